"""Array autodiff core: taped tensors, MLP blocks, optimizer, checkpoints.

Reverse-mode gradients are computed over a recorded graph of numpy array
operations.  Every op stores a vector-Jacobian closure; ``backward`` walks the
graph in reverse topological order and accumulates gradients into leaves.
Gradients are only propagated into tensors created with ``needs_grad=True``
(parameters, probes), so constant inputs cost nothing on the backward pass.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5
CHECKPOINT_MAGIC = "MFD1"


# ---------------------------------------------------------------------------
# taped tensors

class Tensor:
    """A numpy array plus the tape record that produced it."""

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data, needs_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None if not needs_grad else np.zeros_like(self.data)
        self._parents: tuple = ()
        self._vjp = None

    @property
    def needs_grad(self) -> bool:
        return self.grad is not None or self._vjp is not None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # small operator sugar; heavy lifting lives in the module functions
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, needs_grad: bool = False) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, needs_grad=needs_grad)


def _result(data, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op result; records the tape edge only if some parent needs it."""
    out = Tensor(data)
    if any(p.needs_grad for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _accumulate(t: Tensor, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every reachable leaf with needs_grad."""
    if loss.data.shape != ():
        raise ValueError("backward expects a scalar loss tensor")
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite loss; no gradients written")
    # iterative post-order topological sort (graphs can be thousands of nodes)
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.needs_grad and id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            _accumulate(node, g)
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.needs_grad:
                continue
            key = id(p)
            if key in grads:
                # out-of-place: pass-through vjps may alias one buffer to
                # several parents, so += would corrupt the sibling's grad
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if node.grad is not None:  # probed intermediate
            node.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    # sum leading added axes
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return (_unbroadcast(g, a.data.shape) if a.needs_grad else None,
                _unbroadcast(g, b.data.shape) if b.needs_grad else None)

    return _result(a.data + b.data, (a, b), vjp)


def add_n(parts: Iterable) -> Tensor:
    """Sum of same-shape tensors as a single tape record."""
    ts = [as_tensor(p) for p in parts]
    acc = ts[0].data.copy()
    for t in ts[1:]:
        acc += t.data

    def vjp(g):
        return tuple(g if t.needs_grad else None for t in ts)

    return _result(acc, ts, vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return (_unbroadcast(g, a.data.shape) if a.needs_grad else None,
                _unbroadcast(-g, b.data.shape) if b.needs_grad else None)

    return _result(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape) if a.needs_grad else None,
                _unbroadcast(g * a.data, b.data.shape) if b.needs_grad else None)

    return _result(a.data * b.data, (a, b), vjp)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = a.data.dtype.type(s)

    def vjp(g):
        return (g * s,)

    return _result(a.data * s, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return (g @ b.data.T if a.needs_grad else None,
                a.data.T @ g if b.needs_grad else None)

    return _result(a.data @ b.data, (a, b), vjp)


def silu(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):  # exp overflow saturates to sig = 0
        sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def vjp(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _result(out, (x,), vjp)


def square(x) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        return (g * (2.0 * x.data),)

    return _result(x.data * x.data, (x,), vjp)


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    inv = 1.0 / x.data.size

    def vjp(g):
        return (np.full_like(x.data, g * inv),)

    return _result(x.data.mean(dtype=x.data.dtype), (x,), vjp)


def sum_all(x) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        return (np.full_like(x.data, g),)

    return _result(x.data.sum(dtype=x.data.dtype), (x,), vjp)


def concat(parts: Sequence, axis: int = 1) -> Tensor:
    ts = [as_tensor(p) for p in parts]
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        out = []
        for t, a, b in zip(ts, offsets[:-1], offsets[1:]):
            if t.needs_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(a, b)
                out.append(g[tuple(idx)])
            else:
                out.append(None)
        return tuple(out)

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, vjp)


def gather_rows(x, idx: np.ndarray, layout: "SegmentLayout | None" = None) -> Tensor:
    """out[k] = x[idx[k]].  Backward scatter-adds; a SegmentLayout built on idx
    with n_out = len(x) makes the scatter deterministic and fast."""
    x = as_tensor(x)
    if layout is None:
        layout = SegmentLayout(idx, x.data.shape[0])

    def vjp(g):
        return (layout.segment_sum(g),)

    return _result(x.data[idx], (x,), vjp)


class SegmentLayout:
    """Precomputed sort order for deterministic segment sums over an index array."""

    def __init__(self, idx: np.ndarray, n_out: int):
        idx = np.asarray(idx, dtype=np.int64)
        self.idx = idx
        self.n_out = int(n_out)
        self.order = np.argsort(idx, kind="stable")
        sorted_idx = idx[self.order]
        if idx.size:
            starts = np.flatnonzero(
                np.concatenate(([True], sorted_idx[1:] != sorted_idx[:-1])))
            self.starts = starts
            self.targets = sorted_idx[starts]
        else:
            self.starts = np.zeros(0, dtype=np.int64)
            self.targets = np.zeros(0, dtype=np.int64)

    def segment_sum(self, values: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n_out,) + values.shape[1:], dtype=values.dtype)
        if self.idx.size:
            out[self.targets] = np.add.reduceat(values[self.order], self.starts, axis=0)
        return out


def segment_sum(values, layout: SegmentLayout) -> Tensor:
    """Sum rows of `values` into layout.n_out buckets given by layout.idx."""
    values = as_tensor(values)

    def vjp(g):
        return (g[layout.idx],)

    return _result(layout.segment_sum(values.data), (values,), vjp)


def layer_norm(x, eps: float = LN_EPS) -> Tensor:
    """Row-wise normalization to zero mean / unit variance (no affine part)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xn = xc * inv

    def vjp(g):
        # d/dx of (x - mu) * inv with mu, var functions of x
        gm = g.mean(axis=-1, keepdims=True)
        gxn = (g * xn).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xn * gxn),)

    return _result(xn, (x,), vjp)


# ---------------------------------------------------------------------------
# parameters

class ParamStore:
    """Ordered name -> leaf Tensor map with gradient accumulators."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def create(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        if " " in name or "\n" in name:
            raise ValueError(f"parameter name {name!r} contains whitespace")
        t = Tensor(np.asarray(data, dtype=self.dtype), needs_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def n_params(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad[...] = 0.0

    def grad_global_norm(self) -> float:
        total = 0.0
        for t in self._params.values():
            g = t.grad
            total += float(np.dot(g.ravel(), g.ravel()))
        return float(np.sqrt(total))

    def clip_global_norm(self, max_norm: float) -> float:
        """Jointly rescale all gradients so the global L2 norm is <= max_norm."""
        norm = self.grad_global_norm()
        if norm > max_norm and norm > 0.0:
            s = self.dtype.type(max_norm / norm)
            for t in self._params.values():
                t.grad *= s
        return norm

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]):
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(
                f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, t in self._params.items():
            a = np.asarray(arrays[k], dtype=self.dtype)
            if a.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}: {a.shape} vs {t.data.shape}")
            t.data = a


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02,
                     dtype=np.float64) -> np.ndarray:
    """N(0, std^2) resampled until every draw lies within 2 std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


# ---------------------------------------------------------------------------
# MLP blocks

def mlp_init(store: ParamStore, prefix: str, sizes: Sequence[int],
             rng: np.random.Generator, zero_last: bool = False):
    """Create weights/biases for a dense chain sizes[0] -> ... -> sizes[-1].

    Hidden activations are SiLU, output is linear.  Weights are truncated
    normal (std 0.02), biases zero; `zero_last` zeroes the final layer too.
    """
    for k in range(len(sizes) - 1):
        last = k == len(sizes) - 2
        if last and zero_last:
            w = np.zeros((sizes[k], sizes[k + 1]), dtype=store.dtype)
        else:
            w = truncated_normal(rng, (sizes[k], sizes[k + 1]), dtype=store.dtype)
        store.create(f"{prefix}.w{k}", w)
        store.create(f"{prefix}.b{k}", np.zeros(sizes[k + 1], dtype=store.dtype))


def mlp_depth(store: ParamStore, prefix: str) -> int:
    k = 0
    while f"{prefix}.w{k}" in store:
        k += 1
    return k


_ACTIVATIONS = {"silu": silu, "linear": lambda t: t}


def mlp_apply(store: ParamStore, prefix: str, x, activation: str = "silu") -> Tensor:
    """Dense chain with `activation` on hidden layers and a linear output."""
    n = mlp_depth(store, prefix)
    if n == 0:
        raise KeyError(f"no parameters under prefix {prefix!r}")
    act = _ACTIVATIONS[activation]
    h = as_tensor(x)
    for k in range(n):
        w = store[f"{prefix}.w{k}"]
        if h.data.shape[-1] != w.data.shape[0]:
            raise ValueError(
                f"{prefix} layer {k}: input width {h.data.shape[-1]} "
                f"!= weight rows {w.data.shape[0]}")
        h = add(matmul(h, w), store[f"{prefix}.b{k}"])
        if k < n - 1:
            h = act(h)
    return h


def mlp_apply_parts(store: ParamStore, prefix: str,
                    parts: Sequence[tuple[Tensor, np.ndarray | None, SegmentLayout | None]]) -> Tensor:
    """mlp_apply with the first layer evaluated as a sum of row-block products.

    `parts` is a list of (tensor, gather_idx, gather_layout); the first-layer
    weight rows are consumed in part order.  Entries with a gather index are
    transformed first and gathered after (row selection commutes with the
    matmul), which avoids materializing per-edge copies of node states.
    Identical in exact arithmetic to mlp_apply on the concatenated input.
    """
    w0 = store[f"{prefix}.w0"]
    terms = []
    row = 0
    for t, idx, layout in parts:
        width = t.data.shape[-1]
        block = rows(w0, row, row + width)
        y = matmul(t, block)
        if idx is not None:
            y = gather_rows(y, idx, layout)
        terms.append(y)
        row += width
    if row != w0.data.shape[0]:
        raise ValueError(f"parts cover {row} rows, first layer has {w0.data.shape[0]}")
    h = add(add_n(terms), store[f"{prefix}.b0"])
    n = mlp_depth(store, prefix)
    for k in range(1, n):
        h = silu(h)
        h = add(matmul(h, store[f"{prefix}.w{k}"]), store[f"{prefix}.b{k}"])
    return h


def rows(t: Tensor, a: int, b: int) -> Tensor:
    """Row slice t[a:b] as a taped op."""

    def vjp(g):
        out = np.zeros_like(t.data)
        out[a:b] = g
        return (out,)

    return _result(t.data[a:b], (t,), vjp)


def cond_layer_norm(x, g, store: ParamStore, prefix: str) -> Tensor:
    """LayerNorm over features with scale/shift predicted from conditioning g.

    gamma = 1 + g @ ws + bs and beta = g @ wb + bb, so a zero-initialized
    predictor starts as the identity-affine norm.
    """
    xn = layer_norm(x)
    gamma = add(add(matmul(g, store[f"{prefix}.ws"]), store[f"{prefix}.bs"]),
                as_tensor(np.asarray(1.0, dtype=store.dtype)))
    beta = add(matmul(g, store[f"{prefix}.wb"]), store[f"{prefix}.bb"])
    return add(mul(xn, gamma), beta)


def cond_layer_norm_init(store: ParamStore, prefix: str, cond_width: int,
                         width: int, rng: np.random.Generator):
    store.create(f"{prefix}.ws", truncated_normal(rng, (cond_width, width), dtype=store.dtype))
    store.create(f"{prefix}.bs", np.zeros(width, dtype=store.dtype))
    store.create(f"{prefix}.wb", truncated_normal(rng, (cond_width, width), dtype=store.dtype))
    store.create(f"{prefix}.bb", np.zeros(width, dtype=store.dtype))


# ---------------------------------------------------------------------------
# optimization

def cosine_lr(step: int, total_steps: int, base_lr: float, floor: float = 0.0) -> float:
    """Cosine decay from base_lr at step 0 to floor at step total_steps."""
    if total_steps <= 0:
        return base_lr
    t = min(max(step, 0), total_steps) / total_steps
    return floor + 0.5 * (base_lr - floor) * (1.0 + np.cos(np.pi * t))


class AdamW:
    """Decoupled weight decay Adam over a ParamStore.

    update: theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    """

    def __init__(self, store: ParamStore, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 1e-2):
        self.store = store
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in store.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in store.items()}

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for k, p in self.store.items():
            g = p.grad
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter {k!r}")
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / bias1
            v_hat = v / bias2
            p.data -= lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                            + self.weight_decay * p.data)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None):
    """Named-tensor flat binary with an ASCII header; magic MFD1.

    Header lines:
        MFD1
        meta <key> <value>
        tensor <name> <dtype> <ndim> <dims...> <byte offset>
        data <blob bytes>
    followed by the raw little-endian tensor blob.
    """
    meta = meta or {}
    lines = [CHECKPOINT_MAGIC]
    for k, v in meta.items():
        k, v = str(k), str(v)
        if any(c in k for c in " \n") or "\n" in v:
            raise ValueError(f"bad meta entry {k!r}")
        lines.append(f"meta {k} {v}")
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        raw = arr.astype(le, copy=False).tobytes()  # tobytes always emits C order
        dims = " ".join(str(d) for d in arr.shape)
        ndim = arr.ndim
        dim_field = f"{ndim} {dims}".strip()
        lines.append(f"tensor {name} {arr.dtype.name} {dim_field} {offset}")
        blobs.append(raw)
        offset += len(raw)
    lines.append(f"data {offset}")
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    """Returns (meta: dict[str, str], arrays: dict[str, np.ndarray])."""
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.index(b"\n")
    if raw[:nl].decode("ascii", "replace") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    meta: dict[str, str] = {}
    specs = []
    pos = nl + 1
    while True:
        nl = raw.index(b"\n", pos)
        line = raw[pos:nl].decode("ascii")
        pos = nl + 1
        fields = line.split(" ")
        if fields[0] == "meta":
            meta[fields[1]] = " ".join(fields[2:])
        elif fields[0] == "tensor":
            name = fields[1]
            dtype = np.dtype(fields[2]).newbyteorder("<")
            ndim = int(fields[3])
            shape = tuple(int(d) for d in fields[4:4 + ndim])
            offset = int(fields[4 + ndim])
            specs.append((name, dtype, shape, offset))
        elif fields[0] == "data":
            blob_size = int(fields[1])
            break
        else:
            raise ValueError(f"{path}: unknown header line {line!r}")
    blob = raw[pos:pos + blob_size]
    if len(blob) != blob_size:
        raise ValueError(f"{path}: truncated blob ({len(blob)} of {blob_size} bytes)")
    arrays = {}
    for name, dtype, shape, offset in specs:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * dtype.itemsize
        a = np.frombuffer(blob[offset:offset + nbytes], dtype=dtype).reshape(shape)
        arrays[name] = a.astype(dtype.newbyteorder("="))
    return meta, arrays
