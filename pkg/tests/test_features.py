import numpy as np
import pytest

from meshflow import features as ff
from meshflow import mesh as mm

from test_mesh import grid_mesh


def small_graph(seed=0):
    m = grid_mesh(8, 8, jitter=0.02, seed=seed)
    return mm.build_multiscale_graph(m, 4.0)


def test_node_feature_layout():
    pts = [[0.0, 0.0], [2.0, 0.0], [1.0, 2.0]]
    types = [mm.NODE_WALL, mm.NODE_BOUNDARY, mm.NODE_FLUID]
    m = mm.make_mesh(pts, types, [[0, 1, 2]])
    uv = np.array([[1.0, -2.0], [0.5, 0.25], [0.0, 3.0]])
    f = ff.node_features(m, uv, 0.0)
    assert f.shape == (3, 9)
    assert np.array_equal(f[:, 0:2], uv)
    assert np.array_equal(f[0, 2:5], [1, 0, 0])  # wall
    assert np.array_equal(f[1, 2:5], [0, 1, 0])  # boundary
    assert np.array_equal(f[2, 2:5], [0, 0, 1])  # fluid
    assert f[:, 2:5].sum(axis=1).tolist() == [1, 1, 1]
    # bbox [0,2]x[0,2], half-width 1, center (1,1)
    assert np.allclose(f[:, 5:7], [[-1, -1], [1, -1], [0, 1]])
    assert np.allclose(f[:, 7:9], [[1, 0]] * 3)  # angle 0


def test_node_features_angle_and_mismatch():
    m = grid_mesh(3, 3)
    f = ff.node_features(m, np.zeros((9, 2)), np.pi / 2)
    assert np.allclose(f[:, 7], 0.0)
    assert np.allclose(f[:, 8], 1.0)
    with pytest.raises(ValueError, match="does not match"):
        ff.node_features(m, np.zeros((4, 2)), 0.0)


def test_node_features_pure():
    m = grid_mesh(5, 5, jitter=0.03, seed=1)
    uv = np.random.default_rng(0).standard_normal((25, 2))
    a = ff.node_features(m, uv, 0.7)
    b = ff.node_features(m, uv, 0.7)
    assert np.array_equal(a, b)


def test_edge_hand_examples():
    # two-node segment embedded in a triangle so validation passes
    pts = [[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]]
    m = mm.make_mesh(pts, [mm.NODE_FLUID] * 3, [[0, 1, 2]])
    g = mm.build_multiscale_graph(m, 1.0)
    o2o = g.edge_sets["o2o"]
    row = np.flatnonzero((o2o.src == 0) & (o2o.dst == 1))[0]

    f0 = ff.edge_features(g, 0.0)["o2o"]
    assert np.allclose(f0[row], [1, 0, 1, 1, 0], atol=1e-15)
    f90 = ff.edge_features(g, np.pi / 2)["o2o"]
    assert np.allclose(f90[row], [1, 0, 1, 0, -1], atol=1e-15)

    rev = np.flatnonzero((o2o.src == 1) & (o2o.dst == 0))[0]
    assert np.allclose(f90[rev, [0, 1, 3, 4]], -f90[row, [0, 1, 3, 4]], atol=1e-15)
    assert f90[rev, 2] == f90[row, 2]


def test_projection_rotation_identity():
    g = small_graph()
    feats = ff.edge_features(g, 0.31)
    for name, f in feats.items():
        d = f[:, 2]
        ok = d > 0
        lhs = f[ok, 3] ** 2 + f[ok, 4] ** 2
        assert np.allclose(lhs, 1.0, rtol=1e-10), name


def test_zero_length_cross_level_rows_are_zero():
    g = small_graph()
    feats = ff.edge_features(g, 1.1)
    o2r = g.edge_sets["o2r"]
    self_rows = g.reduced_indices[o2r.dst] == o2r.src
    assert self_rows.any()
    assert np.array_equal(feats["o2r"][self_rows], np.zeros((self_rows.sum(), 5)))


def test_wind_frame_consistency():
    m = grid_mesh(7, 7, jitter=0.02, seed=3)
    g = mm.build_multiscale_graph(m, 4.0)
    delta = 0.83
    base = ff.edge_features(g, 0.4)

    rot = np.array([[np.cos(delta), np.sin(delta)],
                    [-np.sin(delta), np.cos(delta)]])  # rows: transposed rotation
    m2 = mm.Mesh(m.points @ rot, m.node_type, m.triangles)
    g2 = mm.MultiscaleGraph(m2, mm.Mesh(m2.points[g.reduced_indices],
                                        g.reduced.node_type, g.reduced.triangles),
                            g.reduced_indices, g.assignment, g.edge_sets)
    moved = ff.edge_features(g2, 0.4 + delta)
    for name in base:
        assert np.allclose(moved[name][:, 2:], base[name][:, 2:], atol=1e-12), name


def test_graph_node_features_shared_box():
    g = small_graph(seed=4)
    uv = np.random.default_rng(2).standard_normal((g.original.n_nodes, 2))
    orig, red = ff.graph_node_features(g, uv, 0.9)
    assert orig.shape == (g.original.n_nodes, 9)
    assert red.shape == (g.reduced.n_nodes, 9)
    # reduced rows restrict the original rows exactly (same box, same field)
    assert np.array_equal(red, orig[g.reduced_indices])


def test_edge_geometry_matches_features():
    g = small_graph(seed=5)
    geo = ff.edge_geometry(g)
    via = ff.edge_features(g, 0.27, geometry=geo)
    direct = ff.edge_features(g, 0.27)
    for name in via:
        assert np.array_equal(via[name], direct[name])
