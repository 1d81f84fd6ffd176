"""Per-node and per-edge input tensors for the denoiser.

Node rows are [Ux, Uy | one-hot(wall, boundary, fluid) | x, y | cos(angle),
sin(angle)] with coordinates normalized to [-1, 1] by the domain half-width.
Edge rows are [dx, dy, d, p_par, p_perp] in raw mesh units, where the two
projections are the cosines of the edge direction against the wind frame.
"""

import numpy as np

from .mesh import Mesh, MultiscaleGraph, NODE_WALL, NODE_BOUNDARY, NODE_FLUID

NODE_WIDTH = 9
EDGE_WIDTH = 5

# column order of the type one-hot block
_TYPE_ORDER = (NODE_WALL, NODE_BOUNDARY, NODE_FLUID)


def domain_box(mesh: Mesh):
    """Center and scalar half-width of the mesh bounding box."""
    lo = mesh.points.min(axis=0)
    hi = mesh.points.max(axis=0)
    half = float((hi - lo).max()) / 2.0
    if half <= 0.0:
        half = 1.0
    return (lo + hi) / 2.0, half


def node_features(mesh: Mesh, noisy_uv: np.ndarray, angle_rad: float,
                  box=None) -> np.ndarray:
    """Assemble the (N, 9) node input matrix.

    `box` overrides the normalization frame; pass the original mesh's box
    when featurizing a reduced level so both levels share coordinates.
    """
    noisy_uv = np.asarray(noisy_uv, dtype=np.float64)
    if noisy_uv.shape != (mesh.n_nodes, 2):
        raise ValueError(
            f"field shape {noisy_uv.shape} does not match mesh with "
            f"{mesh.n_nodes} nodes")
    center, half = domain_box(mesh) if box is None else box
    out = np.empty((mesh.n_nodes, NODE_WIDTH), dtype=np.float64)
    out[:, 0:2] = noisy_uv
    for col, code in enumerate(_TYPE_ORDER):
        out[:, 2 + col] = mesh.node_type == code
    out[:, 5:7] = (mesh.points - center) / half
    out[:, 7] = np.cos(angle_rad)
    out[:, 8] = np.sin(angle_rad)
    return out


def graph_node_features(graph: MultiscaleGraph, noisy_uv: np.ndarray,
                        angle_rad: float):
    """Node features for both levels, normalized by the original mesh box."""
    box = domain_box(graph.original)
    orig = node_features(graph.original, noisy_uv, angle_rad, box=box)
    red = node_features(graph.reduced,
                        np.asarray(noisy_uv, dtype=np.float64)[graph.reduced_indices],
                        angle_rad, box=box)
    return orig, red


def edge_geometry(graph: MultiscaleGraph):
    """Wind-independent edge columns (dx, dy, d) per edge set."""
    pos = {"o": graph.original.points, "r": graph.reduced.points}
    out = {}
    for name, es in graph.edge_sets.items():
        delta = pos[name[2]][es.dst] - pos[name[0]][es.src]
        d = np.hypot(delta[:, 0], delta[:, 1])
        out[name] = np.concatenate([delta, d[:, None]], axis=1)
    return out


def edge_features(graph: MultiscaleGraph, angle_rad: float,
                  geometry=None) -> dict:
    """The (E, 5) edge matrices per edge set for a given wind angle.

    Zero-length edges (cross-level self pairs) get all-zero rows.
    """
    if geometry is None:
        geometry = edge_geometry(graph)
    ca, sa = np.cos(angle_rad), np.sin(angle_rad)
    out = {}
    for name, geo in geometry.items():
        dx, dy, d = geo[:, 0], geo[:, 1], geo[:, 2]
        feats = np.zeros((geo.shape[0], EDGE_WIDTH), dtype=np.float64)
        ok = d > 0.0
        feats[ok, 0] = dx[ok]
        feats[ok, 1] = dy[ok]
        feats[ok, 2] = d[ok]
        feats[ok, 3] = (dx[ok] * ca + dy[ok] * sa) / d[ok]
        feats[ok, 4] = (dy[ok] * ca - dx[ok] * sa) / d[ok]
        out[name] = feats
    return out
