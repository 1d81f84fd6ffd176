"""Gradient, optimizer and checkpoint tests for the autodiff core.

Every differentiable op is checked against a central finite-difference oracle
(h=1e-5, 64-bit) on random inputs, per the module contract.
"""

import numpy as np
import pytest

from meshflow import numcore as nc


def fd_grad(f, x, h=1e-5):
    """Central finite differences of scalar f at array x (the oracle)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


RNG = np.random.default_rng(7)


def test_add_broadcast_grad_matches_fd():
    b = nc.Tensor(RNG.standard_normal((1, 4)), needs_grad=True)
    x = nc.Tensor(RNG.standard_normal((5, 4)), needs_grad=True)
    loss = nc.sum_all(nc.mul(nc.add(x, b), nc.add(x, b)))
    nc.backward(loss)
    fd_b = fd_grad(lambda a: float(np.sum((x.data + a) ** 2)), b.data.copy())
    fd_x = fd_grad(lambda a: float(np.sum((a + b.data) ** 2)), x.data.copy())
    assert np.allclose(b.grad, fd_b, rtol=1e-6, atol=1e-8)
    assert np.allclose(x.grad, fd_x, rtol=1e-6, atol=1e-8)


def test_shared_operand_accumulates_both_paths():
    # y = x + x must give dy/dx = 2 even though the vjp aliases one buffer
    x = nc.Tensor(np.array([1.0, 2.0]), needs_grad=True)
    y = nc.add(x, x)
    z = nc.mul(x, x)
    loss = nc.sum_all(nc.add(y, z))
    nc.backward(loss)
    assert np.allclose(x.grad, 2.0 + 2.0 * x.data)


def test_matmul_grad_matches_fd():
    a0 = RNG.standard_normal((3, 4))
    b0 = RNG.standard_normal((4, 2))
    a = nc.Tensor(a0.copy(), needs_grad=True)
    b = nc.Tensor(b0.copy(), needs_grad=True)
    loss = nc.sum_all(nc.square(nc.matmul(a, b)))
    nc.backward(loss)
    fd_a = fd_grad(lambda m: float(np.sum((m @ b0) ** 2)), a0)
    fd_b = fd_grad(lambda m: float(np.sum((a0 @ m) ** 2)), b0)
    assert np.allclose(a.grad, fd_a, rtol=1e-6, atol=1e-8)
    assert np.allclose(b.grad, fd_b, rtol=1e-6, atol=1e-8)


def test_silu_square_mean_grads_match_fd():
    x0 = RNG.standard_normal((6, 3))
    x = nc.Tensor(x0.copy(), needs_grad=True)
    loss = nc.mean_all(nc.square(nc.silu(x)))
    nc.backward(loss)
    fd = fd_grad(lambda a: float(np.mean((a / (1.0 + np.exp(-a))) ** 2)), x0)
    assert np.allclose(x.grad, fd, rtol=1e-5, atol=1e-8)


def test_concat_and_rows_grads():
    a0, b0 = RNG.standard_normal((4, 2)), RNG.standard_normal((4, 3))
    a = nc.Tensor(a0.copy(), needs_grad=True)
    b = nc.Tensor(b0.copy(), needs_grad=True)
    loss = nc.sum_all(nc.square(nc.concat([a, b], axis=1)))
    nc.backward(loss)
    assert np.allclose(a.grad, 2 * a0)
    assert np.allclose(b.grad, 2 * b0)

    w = nc.Tensor(RNG.standard_normal((6, 3)), needs_grad=True)
    loss = nc.sum_all(nc.rows(w, 2, 5))
    nc.backward(loss)
    want = np.zeros((6, 3))
    want[2:5] = 1.0
    assert np.allclose(w.grad, want)


def test_gather_and_segment_sum_match_scatter_oracle():
    n, e, h = 7, 19, 4
    idx = RNG.integers(0, n, size=e)
    vals0 = RNG.standard_normal((e, h))
    layout = nc.SegmentLayout(idx, n)
    # forward oracle: np.add.at
    want = np.zeros((n, h))
    np.add.at(want, idx, vals0)
    got = layout.segment_sum(vals0)
    assert np.allclose(got, want, atol=1e-12)

    vals = nc.Tensor(vals0.copy(), needs_grad=True)
    out = nc.segment_sum(vals, layout)
    loss = nc.sum_all(nc.square(out))
    nc.backward(loss)
    fd = fd_grad(lambda a: float(np.sum(layout.segment_sum(a) ** 2)), vals0)
    assert np.allclose(vals.grad, fd, rtol=1e-6, atol=1e-8)

    x0 = RNG.standard_normal((n, h))
    x = nc.Tensor(x0.copy(), needs_grad=True)
    loss = nc.sum_all(nc.square(nc.gather_rows(x, idx)))
    nc.backward(loss)
    fd = fd_grad(lambda a: float(np.sum(a[idx] ** 2)), x0)
    assert np.allclose(x.grad, fd, rtol=1e-6, atol=1e-8)


def test_empty_segment_sum_is_zero():
    layout = nc.SegmentLayout(np.zeros(0, dtype=np.int64), 5)
    out = layout.segment_sum(np.zeros((0, 3)))
    assert out.shape == (5, 3)
    assert np.all(out == 0)


def test_layer_norm_grad_matches_fd():
    x0 = RNG.standard_normal((5, 8))
    x = nc.Tensor(x0.copy(), needs_grad=True)
    loss = nc.sum_all(nc.square(nc.layer_norm(x)))
    nc.backward(loss)

    def f(a):
        mu = a.mean(-1, keepdims=True)
        xc = a - mu
        var = (xc * xc).mean(-1, keepdims=True)
        return float(np.sum((xc / np.sqrt(var + nc.LN_EPS)) ** 2))

    fd = fd_grad(f, x0)
    assert np.allclose(x.grad, fd, rtol=1e-4, atol=1e-7)


def test_layer_norm_rows_standardized():
    x = nc.Tensor(RNG.standard_normal((10, 16)) * 3 + 1)
    out = nc.layer_norm(x).data
    assert np.max(np.abs(out.mean(axis=1))) < 1e-10
    assert np.max(np.abs(out.var(axis=1) - 1.0)) < 1e-4


def test_mlp_identity_and_zero_cases():
    store = nc.ParamStore()
    store.create("id.w0", np.eye(2))
    store.create("id.b0", np.zeros(2))
    out = nc.mlp_apply(store, "id", nc.Tensor(np.array([[1.5, -2.0]])), activation="linear")
    assert np.allclose(out.data, [[1.5, -2.0]])

    store.create("z.w0", np.zeros((2, 1)))
    store.create("z.b0", np.array([0.3]))
    out = nc.mlp_apply(store, "z", nc.Tensor(RNG.standard_normal((4, 2))))
    assert np.allclose(out.data, 0.3)


def test_mlp_grad_matches_fd_for_every_weight():
    # random 2 -> 4 -> 2 MLP, SiLU hidden, per the module contract
    rng = np.random.default_rng(3)
    store = nc.ParamStore()
    nc.mlp_init(store, "m", [2, 4, 2], rng)
    for name in store.names():
        store[name].data = rng.standard_normal(store[name].data.shape) * 0.7
    x = RNG.standard_normal((5, 2))

    def run():
        return nc.sum_all(nc.mlp_apply(store, "m", nc.Tensor(x)))

    store.zero_grad()
    nc.backward(run())
    for name in store.names():
        p = store[name]
        got = p.grad.copy()

        def f(arr, p=p):
            old = p.data
            p.data = arr
            val = float(run().data)
            p.data = old
            return val

        want = fd_grad(f, p.data.copy())
        denom = np.maximum(np.abs(want), 1e-8)
        assert np.max(np.abs(got - want) / denom) < 1e-4, name


def test_mlp_apply_parts_equals_concat_form():
    rng = np.random.default_rng(11)
    store = nc.ParamStore()
    nc.mlp_init(store, "e", [10, 6, 6], rng)
    n, e = 5, 12
    h = rng.standard_normal((n, 4))
    edge = rng.standard_normal((e, 4))
    g = rng.standard_normal((1, 2))
    src = rng.integers(0, n, size=e)
    ref = nc.mlp_apply(store, "e", nc.Tensor(
        np.concatenate([h[src], edge, np.repeat(g, e, axis=0)], axis=1)))
    got = nc.mlp_apply_parts(store, "e", [
        (nc.Tensor(h), src, nc.SegmentLayout(src, n)),
        (nc.Tensor(edge), None, None),
        (nc.Tensor(g), None, None),
    ])
    assert np.allclose(got.data, ref.data, atol=1e-12)


def test_mlp_shape_error_names_layer():
    store = nc.ParamStore()
    nc.mlp_init(store, "m", [3, 4, 2], np.random.default_rng(0))
    with pytest.raises(ValueError, match="layer 0"):
        nc.mlp_apply(store, "m", nc.Tensor(np.zeros((2, 5))))


def test_cond_layer_norm_examples():
    store = nc.ParamStore()
    g = nc.Tensor(np.zeros((1, 3)))
    nc.cond_layer_norm_init(store, "ln", 3, 2, np.random.default_rng(0))
    # realize gamma=2, beta=0.5 through the bias terms
    store["ln.bs"].data = np.array([1.0, 1.0])  # gamma = 1 + 1
    store["ln.bb"].data = np.array([0.5, 0.5])
    out = nc.cond_layer_norm(nc.Tensor(np.array([[0.0, 2.0]])), g, store, "ln").data
    assert np.allclose(out, [[-1.5, 2.5]], atol=1e-4)

    # gamma=1, beta=0: standardized rows
    store["ln.bs"].data[:] = 0.0
    store["ln.bb"].data[:] = 0.0
    out = nc.cond_layer_norm(nc.Tensor(np.array([[1.0, -1.0]])), g, store, "ln").data
    assert np.allclose(out, [[1.0, -1.0]], atol=1e-4)

    # constant row maps to beta
    store["ln.bb"].data[:] = 0.25
    out = nc.cond_layer_norm(nc.Tensor(np.full((1, 2), 7.0)), g, store, "ln").data
    assert np.allclose(out, 0.25, atol=1e-6)


def test_cond_layer_norm_grads_match_fd():
    rng = np.random.default_rng(5)
    store = nc.ParamStore()
    nc.cond_layer_norm_init(store, "ln", 3, 4, rng)
    x = rng.standard_normal((6, 4))
    g = rng.standard_normal((1, 3))

    def run():
        return nc.sum_all(nc.square(
            nc.cond_layer_norm(nc.Tensor(x), nc.Tensor(g), store, "ln")))

    store.zero_grad()
    nc.backward(run())
    for name in store.names():
        p = store[name]
        got = p.grad.copy()

        def f(arr, p=p):
            old = p.data
            p.data = arr
            v = float(run().data)
            p.data = old
            return v

        want = fd_grad(f, p.data.copy())
        assert np.allclose(got, want, rtol=1e-4, atol=1e-7), name


def test_backward_rejects_nonfinite_loss():
    t = nc.Tensor(np.array(np.inf))
    with pytest.raises(FloatingPointError):
        nc.backward(t)


def test_grad_zero_for_unused_parameter():
    store = nc.ParamStore()
    used = store.create("u", np.array([3.0]))
    unused = store.create("nope", np.array([1.0]))
    loss = nc.sum_all(nc.square(used))
    nc.backward(loss)
    assert np.allclose(used.grad, 6.0)  # d(w^2)/dw = 2w
    assert np.allclose(unused.grad, 0.0)


def test_adamw_hand_recurrence():
    store = nc.ParamStore()
    p = store.create("theta", np.array([1.0]))
    p.grad[:] = 0.5
    opt = nc.AdamW(store, weight_decay=1e-2)
    opt.step(lr=1e-4)
    # m_hat/(sqrt(v_hat)+eps) ~ 1 at step 1, plus decoupled decay:
    # theta' = 1 - lr*(m_hat/(sqrt(v_hat)+eps)) - lr*wd*theta = 1 - 1.01e-4
    want = 1.0 - 1e-4 * (0.5 / (0.5 + 1e-8)) - 1e-4 * 1e-2 * 1.0
    assert abs(float(p.data[0]) - want) < 1e-12


def test_adamw_zero_grad_no_decay_keeps_params():
    store = nc.ParamStore()
    p = store.create("w", np.array([2.0, -1.0]))
    opt = nc.AdamW(store, weight_decay=0.0)
    opt.step(lr=1e-3)
    assert np.allclose(p.data, [2.0, -1.0])


def test_adamw_rejects_nonfinite_grad():
    store = nc.ParamStore()
    p = store.create("w", np.array([1.0]))
    p.grad[:] = np.nan
    opt = nc.AdamW(store)
    with pytest.raises(FloatingPointError, match="w"):
        opt.step(1e-4)


def test_global_norm_clip_halves_norm_ten():
    store = nc.ParamStore()
    a = store.create("a", np.zeros(3))
    b = store.create("b", np.zeros(2))
    a.grad[:] = [8.0, 0.0, 0.0]
    b.grad[:] = [6.0, 0.0]
    norm = store.clip_global_norm(5.0)
    assert abs(norm - 10.0) < 1e-12
    assert np.allclose(a.grad, [4.0, 0.0, 0.0])
    assert np.allclose(b.grad, [3.0, 0.0])


def test_cosine_lr_endpoints_and_monotone():
    base, total = 1e-4, 1000
    assert nc.cosine_lr(0, total, base) == pytest.approx(base)
    assert nc.cosine_lr(total, total, base) == pytest.approx(0.0, abs=1e-20)
    vals = [nc.cosine_lr(s, total, base) for s in range(0, total + 1, 10)]
    assert all(v0 >= v1 for v0, v1 in zip(vals, vals[1:]))
    assert nc.cosine_lr(total, total, base, floor=1e-6) == pytest.approx(1e-6)


def test_truncated_normal_bounds_and_std():
    rng = np.random.default_rng(0)
    w = nc.truncated_normal(rng, (20000,), std=0.02)
    assert np.max(np.abs(w)) <= 0.04 + 1e-12
    assert 0.015 < np.std(w) < 0.021


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    arrays = {
        "enc.w0": rng.standard_normal((3, 4)),
        "enc.b0": rng.standard_normal(4).astype(np.float32),
        "steps": np.array(7, dtype=np.int64),
    }
    meta = {"sigma_data": "0.3456789", "mode": "multiscale"}
    path = tmp_path / "model.mfd"
    nc.save_checkpoint(path, arrays, meta)
    with open(path, "rb") as f:
        assert f.read(4) == b"MFD1"
    meta2, arrays2 = nc.load_checkpoint(path)
    assert meta2 == meta
    assert set(arrays2) == set(arrays)
    for k in arrays:
        assert arrays2[k].dtype == arrays[k].dtype
        assert np.array_equal(arrays2[k], arrays[k])


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.mfd"
    path.write_bytes(b"NOPE\njunk")
    with pytest.raises(ValueError, match="MFD1"):
        nc.load_checkpoint(path)


def test_paramstore_load_state_validates_names():
    store = nc.ParamStore()
    store.create("a", np.zeros(2))
    with pytest.raises(ValueError, match="mismatch"):
        store.load_state({"b": np.zeros(2)})


def test_determinism_forward_backward():
    def run():
        rng = np.random.default_rng(123)
        store = nc.ParamStore()
        nc.mlp_init(store, "m", [3, 8, 8, 2], rng)
        x = np.random.default_rng(5).standard_normal((10, 3))
        loss = nc.sum_all(nc.square(nc.mlp_apply(store, "m", nc.Tensor(x))))
        nc.backward(loss)
        return float(loss.data), {k: store[k].grad.copy() for k in store.names()}

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    for k in g1:
        assert np.array_equal(g1[k], g2[k])
