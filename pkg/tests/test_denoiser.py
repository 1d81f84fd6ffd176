import numpy as np
import pytest

from meshflow import denoiser as dn
from meshflow import mesh as mm
from meshflow import numcore as nc

from test_mesh import grid_mesh


# --- plain-numpy oracles -----------------------------------------------------

def np_ln(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + 1e-5)


def np_condln(x, g, store, prefix):
    gamma = 1.0 + g @ store[f"{prefix}.ws"].data + store[f"{prefix}.bs"].data
    beta = g @ store[f"{prefix}.wb"].data + store[f"{prefix}.bb"].data
    return np_ln(x) * gamma + beta


def np_mlp_silu(x, store, prefix):
    h = x
    n = 0
    while f"{prefix}.w{n}" in store:
        n += 1
    for k in range(n):
        h = h @ store[f"{prefix}.w{k}"].data + store[f"{prefix}.b{k}"].data
        if k < n - 1:
            h = h * (1.0 / (1.0 + np.exp(-h)))
    return h


def np_round(store, name, src, dst, h_src, h_dst, e, g, k, n_dst):
    """Reference implementation of one message-passing round."""
    prefix = f"blk.{name}.{k}"
    if name[0] == name[2]:
        hn_src = hn_dst = np_condln(h_dst, g, store, f"{prefix}.ln")
    else:
        hn_src = np_condln(h_src, g, store, f"{prefix}.ln_src")
        hn_dst = np_condln(h_dst, g, store, f"{prefix}.ln_dst")
    en = np_condln(e, g, store, f"{prefix}.ln_e")
    gt = np.tile(g, (len(src), 1))
    m = np_mlp_silu(np.concatenate([hn_src[src], hn_dst[dst], en, gt], axis=1),
                    store, f"{prefix}.msg")
    agg = np.zeros((n_dst, m.shape[1]))
    np.add.at(agg, dst, m)
    u = np.concatenate([hn_dst, agg, np.tile(g, (n_dst, 1))], axis=1)
    delta = np_mlp_silu(u, store, f"{prefix}.upd")
    return h_dst + delta, e + m, agg


def edge_pack(src, dst, n_src, n_dst):
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    return dn.EdgePack(src, dst, nc.SegmentLayout(src, n_src),
                       nc.SegmentLayout(dst, n_dst),
                       nc.SegmentLayout(np.zeros(src.size, dtype=np.int64), 1))


def tiny_config(**kw):
    kw.setdefault("hidden", 8)
    kw.setdefault("fourier_bands", 2)
    kw.setdefault("harmonic_orders", 1)
    return dn.DenoiserConfig(**kw)


# --- conditioning ------------------------------------------------------------

def test_harmonics_at_zero():
    assert np.array_equal(dn.harmonic_features(0.0, 4),
                          [1, 0, 1, 0, 1, 0, 1, 0])


def test_conditioning_deterministic_and_periodic():
    cfg = dn.DenoiserConfig()
    store = dn.init_params(cfg, seed=0)
    a = dn.conditioning_vector(0.37, 1.1, store, cfg)
    b = dn.conditioning_vector(0.37, 1.1, store, cfg)
    assert a.data.shape == (1, 64)
    assert np.array_equal(a.data, b.data)
    c = dn.conditioning_vector(0.37, 1.1 + 2 * np.pi, store, cfg)
    assert np.allclose(c.data, a.data, atol=1e-12)


def test_conditioning_rejects_bad_sigma():
    cfg = tiny_config()
    store = dn.init_params(cfg, seed=0)
    for bad in (0.0, -1.0, float("nan")):
        with pytest.raises(ValueError):
            dn.conditioning_vector(bad, 0.0, store, cfg)


def test_config_validation():
    with pytest.raises(ValueError, match="mode"):
        dn.DenoiserConfig(mode="both")
    with pytest.raises(ValueError, match="unknown edge sets"):
        dn.DenoiserConfig(layers={"o2x": 1})
    with pytest.raises(ValueError, match=">= 1"):
        dn.DenoiserConfig(layers={"o2o": 0})
    with pytest.raises(ValueError, match="single_scale"):
        dn.DenoiserConfig(mode="single_scale", layers={"o2o": 1, "r2r": 1})
    assert dn.DenoiserConfig().layers == {"o2o": 2, "o2r": 1, "r2r": 6, "r2o": 1}
    assert dn.DenoiserConfig(mode="single_scale").layers == {"o2o": 3}


# --- preconditioning ---------------------------------------------------------

def test_precond_example_and_limits():
    sd = 0.5514
    c_skip, c_out, c_in = dn.precond_coeffs(sd, sd)
    assert abs(c_in - 1.0 / (sd * np.sqrt(2))) < 1e-12
    assert abs(c_skip - 0.5) < 1e-12
    assert abs(c_out - sd / np.sqrt(2)) < 1e-4 and abs(c_out - 0.3899) < 1e-4
    c_skip, c_out, _ = dn.precond_coeffs(1e-9, sd)
    assert abs(c_skip - 1.0) < 1e-12 and c_out < 1e-8
    with pytest.raises(ValueError):
        dn.precond_coeffs(0.0, sd)


def test_precond_identity():
    sd = 0.4217
    for sigma in [0.01, 0.5514, 2.0, 44.0]:
        c_skip, c_out, c_in = dn.precond_coeffs(sigma, sd)
        assert abs(c_skip + sigma ** 2 * c_in ** 2 - 1.0) < 1e-12
        lam = (sigma ** 2 + sd ** 2) / (sigma * sd) ** 2
        assert abs(lam * c_out ** 2 - 1.0) < 1e-12


def test_precondition_apply_zero_network():
    x = np.random.default_rng(0).standard_normal((5, 2))
    zero_fn = lambda xs, s: nc.as_tensor(np.zeros_like(xs.data))
    d = dn.precondition_apply(x, 0.9, zero_fn, 0.5)
    c_skip, _, _ = dn.precond_coeffs(0.9, 0.5)
    assert np.array_equal(d.data, c_skip * x)


# --- subnetworks vs the concatenated-form oracle ------------------------------

def rand_tensors(rng, *shapes):
    return [nc.as_tensor(rng.standard_normal(s)) for s in shapes]


def test_homogeneous_subnetwork_matches_oracle():
    cfg = tiny_config(mode="single_scale", layers={"o2o": 2})
    store = dn.init_params(cfg, seed=3)
    rng = np.random.default_rng(5)
    n, h = 4, cfg.hidden
    src = [0, 1, 2, 0, 3]
    dst = [1, 2, 0, 2, 1]
    ep = edge_pack(src, dst, n, n)
    hs, es, g = rand_tensors(rng, (n, h), (len(src), h), (1, h))
    g_edge = nc.as_tensor(np.tile(g.data, (len(src), 1)))
    g_dst = nc.as_tensor(np.tile(g.data, (n, 1)))

    out_h, out_e = dn.subnetwork_apply(store, "o2o", ep, hs, hs, es, g,
                                       g_edge, g_dst, 2)
    h_ref, e_ref = hs.data, es.data
    for k in range(2):
        h_ref, e_ref, _ = np_round(store, "o2o", np.array(src), np.array(dst),
                                   h_ref, h_ref, e_ref, g.data, k, n)
    assert np.allclose(out_h.data, h_ref, atol=1e-12)
    assert np.allclose(out_e.data, e_ref, atol=1e-12)


def test_cross_level_subnetwork_matches_oracle_and_keeps_src():
    cfg = tiny_config(layers={"o2r": 1})
    store = dn.init_params(cfg, seed=4)
    rng = np.random.default_rng(6)
    n_src, n_dst, h = 5, 3, cfg.hidden
    src = [0, 1, 2, 3, 4, 0]
    dst = [0, 0, 1, 2, 2, 1]
    ep = edge_pack(src, dst, n_src, n_dst)
    hs, hd, es, g = rand_tensors(rng, (n_src, h), (n_dst, h), (len(src), h), (1, h))
    hs_before = hs.data.copy()
    g_edge = nc.as_tensor(np.tile(g.data, (len(src), 1)))
    g_dst = nc.as_tensor(np.tile(g.data, (n_dst, 1)))

    out_h, out_e = dn.subnetwork_apply(store, "o2r", ep, hs, hd, es, g,
                                       g_edge, g_dst, 1)
    h_ref, e_ref, _ = np_round(store, "o2r", np.array(src), np.array(dst),
                               hs.data, hd.data, es.data, g.data, 0, n_dst)
    assert np.allclose(out_h.data, h_ref, atol=1e-12)
    assert np.allclose(out_e.data, e_ref, atol=1e-12)
    assert np.array_equal(hs.data, hs_before)  # source level untouched


def test_duplicated_edge_doubles_its_aggregate():
    cfg = tiny_config(mode="single_scale", layers={"o2o": 1})
    store = dn.init_params(cfg, seed=7)
    rng = np.random.default_rng(8)
    n, h = 3, cfg.hidden
    hs = rng.standard_normal((n, h))
    g = rng.standard_normal((1, h))
    e1 = rng.standard_normal((1, h))
    e2 = np.concatenate([e1, e1])

    _, _, agg1 = np_round(store, "o2o", np.array([0]), np.array([1]),
                          hs, hs, e1, g, 0, n)
    _, _, agg2 = np_round(store, "o2o", np.array([0, 0]), np.array([1, 1]),
                          hs, hs, e2, g, 0, n)
    assert np.allclose(agg2[1], 2 * agg1[1], atol=1e-12)

    for src, dst, e in [([0], [1], e1), ([0, 0], [1, 1], e2)]:
        ep = edge_pack(src, dst, n, n)
        out_h, _ = dn.subnetwork_apply(
            store, "o2o", ep, nc.as_tensor(hs), nc.as_tensor(hs),
            nc.as_tensor(e), nc.as_tensor(g),
            nc.as_tensor(np.tile(g, (len(src), 1))),
            nc.as_tensor(np.tile(g, (n, 1))), 1)
        ref, _, _ = np_round(store, "o2o", np.array(src), np.array(dst),
                             hs, hs, e, g, 0, n)
        assert np.allclose(out_h.data, ref, atol=1e-12)


def test_empty_edge_set_applies_self_update_only():
    cfg = tiny_config(mode="single_scale", layers={"o2o": 1})
    store = dn.init_params(cfg, seed=9)
    rng = np.random.default_rng(10)
    n, h = 4, cfg.hidden
    hs = rng.standard_normal((n, h))
    g = rng.standard_normal((1, h))
    ep = edge_pack([], [], n, n)
    out_h, out_e = dn.subnetwork_apply(
        store, "o2o", ep, nc.as_tensor(hs), nc.as_tensor(hs),
        nc.as_tensor(np.zeros((0, h))), nc.as_tensor(g),
        nc.as_tensor(np.zeros((0, h))), nc.as_tensor(np.tile(g, (n, 1))), 1)
    hn = np_condln(hs, g, store, "blk.o2o.0.ln")
    u = np.concatenate([hn, np.zeros((n, h)), np.tile(g, (n, 1))], axis=1)
    ref = hs + np_mlp_silu(u, store, "blk.o2o.0.upd")
    assert np.allclose(out_h.data, ref, atol=1e-12)
    assert out_e.data.shape == (0, h)


# --- full forward ------------------------------------------------------------

def small_graph(nx=8, ny=8, ratio=4.0, seed=0):
    m = grid_mesh(nx, ny, jitter=0.02, seed=seed)
    return mm.build_multiscale_graph(m, ratio)


def randomize_readout(store, seed=0):
    rng = np.random.default_rng(seed)
    w = store["readout.w0"]
    w.data = rng.standard_normal(w.data.shape).astype(w.data.dtype) * 0.5


def test_forward_shape_and_zero_readout():
    g = small_graph()
    cfg = tiny_config(hidden=16)
    store = dn.init_params(cfg, seed=1)
    pack = dn.prepare(g, cfg)
    inputs = dn.AngleInputs(pack, 0.6)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((g.original.n_nodes, 2))

    d = dn.denoise_field(pack, inputs, store, cfg, 0.5, x, 0.8)
    assert d.data.shape == (g.original.n_nodes, 2)
    c_skip, _, _ = dn.precond_coeffs(0.8, 0.5)
    assert np.allclose(d.data, c_skip * x, atol=0)  # zero-init readout

    randomize_readout(store)
    d1 = dn.denoise_field(pack, inputs, store, cfg, 0.5, x, 0.8)
    d2 = dn.denoise_field(pack, inputs, store, cfg, 0.5, x, 0.8)
    assert not np.allclose(d1.data, c_skip * x)
    assert np.array_equal(d1.data, d2.data)
    assert np.isfinite(d1.data).all()


def test_single_scale_same_inputs_same_shape():
    g = small_graph()
    x = np.random.default_rng(3).standard_normal((g.original.n_nodes, 2))
    outs = {}
    for mode in ("multiscale", "single_scale"):
        cfg = tiny_config(hidden=16, mode=mode)
        store = dn.init_params(cfg, seed=5)
        randomize_readout(store)
        pack = dn.prepare(g, cfg)
        inputs = dn.AngleInputs(pack, 0.2)
        outs[mode] = dn.denoise_field(pack, inputs, store, cfg, 0.5, x, 1.3)
    assert outs["multiscale"].data.shape == outs["single_scale"].data.shape


def test_missing_edge_set_is_config_error():
    g = small_graph()
    partial = mm.MultiscaleGraph(
        g.original, g.reduced, g.reduced_indices, g.assignment,
        {k: v for k, v in g.edge_sets.items() if k != "o2r"})
    cfg = tiny_config()
    with pytest.raises(ValueError, match="requires edge set 'o2r'"):
        dn.prepare(partial, cfg)
    # single-scale does not need the cross-level sets
    dn.prepare(partial, tiny_config(mode="single_scale"))


def permute_graph(g, perm_o, perm_r):
    inv_o, inv_r = np.argsort(perm_o), np.argsort(perm_r)
    orig = mm.Mesh(g.original.points[inv_o], g.original.node_type[inv_o],
                   perm_o[g.original.triangles])
    red = mm.Mesh(g.reduced.points[inv_r], g.reduced.node_type[inv_r],
                  g.reduced.triangles)
    ri = perm_o[g.reduced_indices][inv_r]
    assign = perm_r[g.assignment][inv_o]
    maps = {"o": perm_o, "r": perm_r}
    sets = {}
    for name, es in g.edge_sets.items():
        sets[name] = mm.EdgeSet(name, maps[name[0]][es.src], maps[name[2]][es.dst])
    return mm.MultiscaleGraph(orig, red, ri, assign, sets)


def test_permutation_equivariance():
    g = small_graph(seed=6)
    cfg = tiny_config(hidden=16)
    store = dn.init_params(cfg, seed=11)
    randomize_readout(store, seed=12)
    rng = np.random.default_rng(13)
    x = rng.standard_normal((g.original.n_nodes, 2))
    perm_o = rng.permutation(g.original.n_nodes)
    perm_r = rng.permutation(g.reduced.n_nodes)

    pack = dn.prepare(g, cfg)
    base = dn.denoise_field(pack, dn.AngleInputs(pack, 0.9), store, cfg,
                            0.5, x, 0.7)

    g2 = permute_graph(g, perm_o, perm_r)
    pack2 = dn.prepare(g2, cfg)
    inv_o = np.argsort(perm_o)
    out2 = dn.denoise_field(pack2, dn.AngleInputs(pack2, 0.9), store, cfg,
                            0.5, x[inv_o], 0.7)
    assert np.abs(out2.data[perm_o] - base.data).max() < 1e-10


def bool_reach(g, cfg, start_node):
    """Exact receptive field of one input node through the staged propagation."""
    reach = {"o": np.zeros(g.original.n_nodes, dtype=bool),
             "r": np.zeros(g.reduced.n_nodes, dtype=bool)}
    reach["o"][start_node] = True
    for name in dn.EXEC_ORDER:
        if name not in cfg.layers:
            continue
        es = g.edge_sets[name]
        for _ in range(cfg.layers[name]):
            hit = reach[name[0]][es.src]
            reach[name[2]][es.dst[hit]] = True
    return reach["o"]


def test_receptive_field_probe():
    m = grid_mesh(100, 2)  # 200-node strip
    g = mm.build_multiscale_graph(m, 5.0)
    src_node, out_node = 20, 80  # columns 10 and 40: ~30 hops apart

    results = {}
    for mode in ("multiscale", "single_scale"):
        cfg = tiny_config(hidden=8, mode=mode)
        assert bool_reach(g, cfg, src_node)[out_node] == (mode == "multiscale")
        store = dn.init_params(cfg, seed=20)
        randomize_readout(store, seed=21)
        pack = dn.prepare(g, cfg)
        inputs = dn.AngleInputs(pack, 0.4)
        feats_o = nc.Tensor(inputs.node_o.copy(), needs_grad=True)
        node_r = inputs.node_r if cfg.uses_reduced else None
        gvec = dn.conditioning_vector(0.5, 0.4, store, cfg)
        out = dn.denoiser_forward(pack, feats_o, node_r, inputs.edge_feats,
                                  gvec, store, cfg)
        probe = nc.mean_all(nc.gather_rows(out, np.array([out_node])))
        nc.backward(probe)
        results[mode] = np.abs(feats_o.grad[src_node]).max()
    assert results["single_scale"] == 0.0
    assert results["multiscale"] > 0.0


def test_gradcheck_full_denoiser_small():
    m = grid_mesh(4, 3, jitter=0.02, seed=9)  # 12 nodes
    g = mm.build_multiscale_graph(m, 3.0)
    cfg = tiny_config(layers={"o2o": 1, "o2r": 1, "r2r": 1, "r2o": 1})
    store = dn.init_params(cfg, seed=30)
    randomize_readout(store, seed=31)
    pack = dn.prepare(g, cfg)
    inputs = dn.AngleInputs(pack, 0.8)
    rng = np.random.default_rng(32)
    x = rng.standard_normal((12, 2))
    target = rng.standard_normal((12, 2))

    def loss_value():
        d = dn.denoise_field(pack, inputs, store, cfg, 0.5, x, 0.9)
        return nc.mean_all(nc.square(nc.sub(d, target)))

    store.zero_grad()
    nc.backward(loss_value())
    h = 1e-6
    checked = 0
    for name, p in store.items():
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for i in range(0, flat.size, 29):
            keep = flat[i]
            flat[i] = keep + h
            fp = loss_value().data
            flat[i] = keep - h
            fm = loss_value().data
            flat[i] = keep
            fd = (fp - fm) / (2 * h)
            assert abs(fd - gflat[i]) <= 1e-6 + 1e-4 * max(abs(fd), abs(gflat[i])), \
                f"{name}[{i}]: fd={fd} tape={gflat[i]}"
            checked += 1
    assert checked > 150
