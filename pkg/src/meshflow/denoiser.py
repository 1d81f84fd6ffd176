"""Hierarchical message-passing denoiser with EDM-style preconditioning.

The raw network runs encode-process-decode over four directed edge sets in
the fixed order o2o -> o2r -> r2r -> r2o (single-scale mode keeps only o2o).
Every processor round is a pre-norm residual block whose normalization scale
and shift are predicted from a global conditioning vector that fuses the
noise level and the wind angle.
"""

from dataclasses import dataclass, field

import numpy as np

from . import features
from . import numcore as nc
from .features import EDGE_WIDTH, NODE_WIDTH
from .mesh import MultiscaleGraph
from .numcore import ParamStore, SegmentLayout, Tensor

EXEC_ORDER = ("o2o", "o2r", "r2r", "r2o")
MULTISCALE_LAYERS = {"o2o": 2, "o2r": 1, "r2r": 6, "r2o": 1}
SINGLE_SCALE_LAYERS = {"o2o": 3}


@dataclass
class DenoiserConfig:
    hidden: int = 64
    fourier_bands: int = 16
    harmonic_orders: int = 4
    mode: str = "multiscale"
    layers: dict = field(default=None)

    def __post_init__(self):
        if self.mode not in ("multiscale", "single_scale"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.layers is None:
            self.layers = dict(MULTISCALE_LAYERS if self.mode == "multiscale"
                               else SINGLE_SCALE_LAYERS)
        bad = set(self.layers) - set(EXEC_ORDER)
        if bad:
            raise ValueError(f"unknown edge sets {sorted(bad)}")
        if any(int(k) < 1 for k in self.layers.values()):
            raise ValueError("layer counts must be >= 1")
        if self.mode == "single_scale" and set(self.layers) != {"o2o"}:
            raise ValueError("single_scale mode uses only the o2o edge set")
        self.layers = {k: int(v) for k, v in self.layers.items()}

    @property
    def uses_reduced(self) -> bool:
        return any(name != "o2o" for name in self.layers)

    @property
    def cond_input_width(self) -> int:
        return 2 * self.fourier_bands + 2 * self.harmonic_orders


# ---------------------------------------------------------------------------
# global conditioning

def noise_embed_scalar(sigma: float) -> float:
    """The scalar fed to the Fourier embedding in place of raw sigma."""
    return float(np.log(sigma) / 4.0)


def fourier_features(s: float, bands: int) -> np.ndarray:
    """Deterministic half-octave frequency ladder, interleaved cos/sin.

    Frequencies descend from 1 so the lowest band resolves the full range
    of the log-noise scalar without wrapping.
    """
    freq = 2.0 ** (-np.arange(bands) / 2.0)
    ang = 2.0 * np.pi * freq * s
    out = np.empty(2 * bands)
    out[0::2] = np.cos(ang)
    out[1::2] = np.sin(ang)
    return out


def harmonic_features(angle_rad: float, orders: int) -> np.ndarray:
    """(cos k*angle, sin k*angle) for k = 1..orders, interleaved."""
    k = np.arange(1, orders + 1)
    out = np.empty(2 * orders)
    out[0::2] = np.cos(k * angle_rad)
    out[1::2] = np.sin(k * angle_rad)
    return out


def conditioning_vector(sigma: float, angle_rad: float, store: ParamStore,
                        config: DenoiserConfig) -> Tensor:
    """Fused (noise level, wind angle) embedding, shape (1, hidden)."""
    if not sigma > 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x = np.concatenate([
        fourier_features(noise_embed_scalar(sigma), config.fourier_bands),
        harmonic_features(angle_rad, config.harmonic_orders),
    ])[None, :].astype(store.dtype)
    return nc.mlp_apply(store, "cond.mlp", x)


# ---------------------------------------------------------------------------
# parameters

def init_params(config: DenoiserConfig, seed: int, dtype=np.float64) -> ParamStore:
    """Fresh parameter store: truncated-normal weights, zero biases,
    zero-initialized readout so the untrained denoiser is pure skip."""
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    h = config.hidden
    nc.mlp_init(store, "cond.mlp", [config.cond_input_width, h, h, h], rng)
    nc.mlp_init(store, "enc.node_o", [NODE_WIDTH, h, h, h], rng)
    if config.uses_reduced:
        nc.mlp_init(store, "enc.node_r", [NODE_WIDTH, h, h, h], rng)
    for name in EXEC_ORDER:
        if name not in config.layers:
            continue
        nc.mlp_init(store, f"enc.edge_{name}", [EDGE_WIDTH, h, h, h], rng)
        homogeneous = name[0] == name[2]
        for k in range(config.layers[name]):
            prefix = f"blk.{name}.{k}"
            if homogeneous:
                nc.cond_layer_norm_init(store, f"{prefix}.ln", h, h, rng)
            else:
                nc.cond_layer_norm_init(store, f"{prefix}.ln_src", h, h, rng)
                nc.cond_layer_norm_init(store, f"{prefix}.ln_dst", h, h, rng)
            nc.cond_layer_norm_init(store, f"{prefix}.ln_e", h, h, rng)
            nc.mlp_init(store, f"{prefix}.msg", [4 * h, h, h, h], rng)
            nc.mlp_init(store, f"{prefix}.upd", [3 * h, h, h, h], rng)
    nc.cond_layer_norm_init(store, "dec.ln", h, h, rng)
    nc.mlp_init(store, "dec.mlp", [h, h, h, h], rng)
    nc.mlp_init(store, "readout", [h, 2], rng, zero_last=True)
    return store


# ---------------------------------------------------------------------------
# graph preparation

@dataclass
class EdgePack:
    src: np.ndarray
    dst: np.ndarray
    layout_src: SegmentLayout
    layout_dst: SegmentLayout
    bcast: SegmentLayout  # zero index, broadcasts the (1,h) conditioning row


@dataclass
class GraphPack:
    graph: MultiscaleGraph
    n_o: int
    n_r: int
    reduced_idx: np.ndarray
    sets: dict
    bcast_node: dict  # level tag -> SegmentLayout broadcasting g to that level


def _bcast_layout(n_rows: int) -> SegmentLayout:
    return SegmentLayout(np.zeros(n_rows, dtype=np.int64), 1)


def prepare(graph: MultiscaleGraph, config: DenoiserConfig) -> GraphPack:
    """Index arrays and segment layouts for every edge set the config uses."""
    n = {"o": graph.original.n_nodes, "r": graph.reduced.n_nodes}
    sets = {}
    for name in config.layers:
        if name not in graph.edge_sets:
            raise ValueError(f"{config.mode} mode requires edge set {name!r}")
        es = graph.edge_sets[name]
        src = np.asarray(es.src, dtype=np.int64)
        dst = np.asarray(es.dst, dtype=np.int64)
        n_src, n_dst = n[name[0]], n[name[2]]
        if src.size and (src.min() < 0 or src.max() >= n_src
                         or dst.min() < 0 or dst.max() >= n_dst):
            raise ValueError(f"edge set {name!r} has out-of-range indices")
        sets[name] = EdgePack(src, dst,
                              SegmentLayout(src, n_src),
                              SegmentLayout(dst, n_dst),
                              _bcast_layout(src.size))
    bcast_node = {"o": _bcast_layout(n["o"])}
    if config.uses_reduced:
        bcast_node["r"] = _bcast_layout(n["r"])
    return GraphPack(graph, n["o"], n["r"], graph.reduced_indices, sets,
                     bcast_node)


# ---------------------------------------------------------------------------
# forward pass

def _gather_cond(g, layout: SegmentLayout) -> Tensor:
    return nc.gather_rows(g, layout.idx, layout)


def subnetwork_apply(store: ParamStore, name: str, ep: EdgePack, h_src, h_dst,
                     e, g, g_edge, g_dst, n_rounds: int):
    """n_rounds of message passing over one edge set.

    Messages are summed at the destination; node and edge states update
    residually.  For cross-level sets only the destination level changes.
    Returns (h_dst, e).
    """
    homogeneous = name[0] == name[2]
    for k in range(n_rounds):
        prefix = f"blk.{name}.{k}"
        if homogeneous:
            h_src = h_dst
            hn_src = hn_dst = nc.cond_layer_norm(h_dst, g, store, f"{prefix}.ln")
        else:
            hn_src = nc.cond_layer_norm(h_src, g, store, f"{prefix}.ln_src")
            hn_dst = nc.cond_layer_norm(h_dst, g, store, f"{prefix}.ln_dst")
        en = nc.cond_layer_norm(e, g, store, f"{prefix}.ln_e")
        m = nc.mlp_apply_parts(store, f"{prefix}.msg", [
            (hn_src, ep.src, ep.layout_src),
            (hn_dst, ep.dst, ep.layout_dst),
            (en, None, None),
            (g_edge, None, None),
        ])
        agg = nc.segment_sum(m, ep.layout_dst)
        delta = nc.mlp_apply_parts(store, f"{prefix}.upd", [
            (hn_dst, None, None),
            (agg, None, None),
            (g_dst, None, None),
        ])
        h_dst = nc.add(h_dst, delta)
        e = nc.add(e, m)
    return h_dst, e


def denoiser_forward(pack: GraphPack, node_o, node_r, edge_feats: dict, g,
                     store: ParamStore, config: DenoiserConfig) -> Tensor:
    """Raw network output on original nodes, shape (N_o, 2)."""
    h = {"o": nc.mlp_apply(store, "enc.node_o", node_o)}
    if config.uses_reduced:
        h["r"] = nc.mlp_apply(store, "enc.node_r", node_r)
    g_node = {lvl: _gather_cond(g, lay) for lvl, lay in pack.bcast_node.items()}
    for name in EXEC_ORDER:
        if name not in config.layers:
            continue
        ep = pack.sets[name]
        e = nc.mlp_apply(store, f"enc.edge_{name}", edge_feats[name])
        g_edge = _gather_cond(g, ep.bcast)
        dst_lvl = name[2]
        h[dst_lvl], _ = subnetwork_apply(
            store, name, ep, h[name[0]], h[dst_lvl], e, g,
            g_edge, g_node[dst_lvl], config.layers[name])
    hd = nc.cond_layer_norm(h["o"], g, store, "dec.ln")
    out = nc.add(h["o"], nc.mlp_apply(store, "dec.mlp", hd))
    return nc.mlp_apply(store, "readout", out)


# ---------------------------------------------------------------------------
# EDM preconditioning

def precond_coeffs(sigma: float, sigma_data: float):
    """(c_skip, c_out, c_in) of the EDM denoiser parameterization."""
    if not sigma > 0.0 or not sigma_data > 0.0:
        raise ValueError("sigma and sigma_data must be positive")
    s2 = sigma * sigma + sigma_data * sigma_data
    c_skip = sigma_data * sigma_data / s2
    c_out = sigma * sigma_data / np.sqrt(s2)
    c_in = 1.0 / np.sqrt(s2)
    return c_skip, c_out, c_in


def precondition_apply(x_noisy, sigma: float, forward_fn, sigma_data: float) -> Tensor:
    """D(x, sigma) = c_skip*x + c_out*F(c_in*x, sigma)."""
    c_skip, c_out, c_in = precond_coeffs(sigma, sigma_data)
    x = nc.as_tensor(x_noisy)
    fx = forward_fn(nc.scale(x, c_in), sigma)
    return nc.add(nc.scale(x, c_skip), nc.scale(fx, c_out))


# ---------------------------------------------------------------------------
# per-angle static inputs and the full denoise step

class AngleInputs:
    """Feature templates for one (graph, wind angle) pair.

    The first two node-feature columns are placeholders overwritten with the
    scaled noisy field on every denoise call; everything else is static.
    """

    def __init__(self, pack: GraphPack, angle_rad: float, dtype=np.float64):
        self.angle_rad = float(angle_rad)
        zero = np.zeros((pack.n_o, 2))
        tmpl_o, tmpl_r = features.graph_node_features(pack.graph, zero, angle_rad)
        self.node_o = tmpl_o.astype(dtype)
        self.node_r = tmpl_r.astype(dtype)
        efeat = features.edge_features(pack.graph, angle_rad)
        self.edge_feats = {name: efeat[name].astype(dtype) for name in pack.sets}


def denoise_field(pack: GraphPack, inputs: AngleInputs, store: ParamStore,
                  config: DenoiserConfig, sigma_data: float, x_noisy,
                  sigma: float) -> Tensor:
    """The preconditioned denoiser D on one noisy field, shape (N_o, 2).

    The input enters the network through assembled feature matrices, so
    gradients flow to parameters; the direct skip path is the only taped
    route through x itself.
    """

    def forward_fn(x_scaled: Tensor, sig: float) -> Tensor:
        xs = x_scaled.data
        node_o = inputs.node_o.copy()
        node_o[:, 0:2] = xs
        node_r = None
        if config.uses_reduced:
            node_r = inputs.node_r.copy()
            node_r[:, 0:2] = xs[pack.reduced_idx]
        g = conditioning_vector(sig, inputs.angle_rad, store, config)
        return denoiser_forward(pack, node_o, node_r, inputs.edge_feats, g,
                                store, config)

    x = np.asarray(x_noisy, dtype=store.dtype)
    if x.shape != (pack.n_o, 2):
        raise ValueError(f"field shape {x.shape}, expected ({pack.n_o}, 2)")
    return precondition_apply(x, sigma, forward_fn, sigma_data)
