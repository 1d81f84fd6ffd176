"""Mesh types, reduced-mesh construction, and the four directed edge sets.

The hierarchy used by the denoiser couples an original triangle mesh to a
coarse subset of its nodes: o2o edges live on the original mesh, r2r edges
connect reduced nodes whose assigned clusters touch, and o2r/r2o project
between the levels.  All structures are immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

# node type codes; order matches the one-hot layout in `features`
NODE_WALL = 0
NODE_BOUNDARY = 1
NODE_FLUID = 2

_TYPE_TO_CHAR = {NODE_WALL: "W", NODE_BOUNDARY: "B", NODE_FLUID: "F"}
_CHAR_TO_TYPE = {v: k for k, v in _TYPE_TO_CHAR.items()}

DUPLICATE_TOL = 1e-9  # meters
EDGE_SET_NAMES = ("o2o", "o2r", "r2r", "r2o")


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Mesh:
    """Unstructured 2D triangle mesh with typed nodes."""

    points: np.ndarray     # (N, 2) float64, meters
    node_type: np.ndarray  # (N,) int, NODE_* codes
    triangles: np.ndarray  # (T, 3) int64, CCW not required

    @property
    def n_nodes(self) -> int:
        return self.points.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]


@dataclass(frozen=True)
class EdgeSet:
    name: str
    src: np.ndarray  # (E,) int64
    dst: np.ndarray  # (E,) int64

    @property
    def n_edges(self) -> int:
        return self.src.shape[0]


@dataclass(frozen=True)
class MultiscaleGraph:
    original: Mesh
    reduced: Mesh
    reduced_indices: np.ndarray  # (K,) original-node index of each reduced node
    assignment: np.ndarray       # (N,) original node -> reduced node index
    edge_sets: dict = field(default_factory=dict)  # name -> EdgeSet


def _validate(points: np.ndarray, node_type: np.ndarray, triangles: np.ndarray,
              check_duplicates: bool = True) -> Mesh:
    if points.ndim != 2 or points.shape[1] != 2:
        raise MeshError(f"points must be (N,2), got {points.shape}")
    if not np.isfinite(points).all():
        bad = np.flatnonzero(~np.isfinite(points).all(axis=1))
        raise MeshError(f"non-finite coordinates at nodes {bad[:10].tolist()}")
    n = points.shape[0]
    if node_type.shape != (n,):
        raise MeshError("node_type length mismatch")
    if triangles.size:
        if triangles.min() < 0 or triangles.max() >= n:
            raise MeshError(
                f"triangle index out of range [0,{n}): min={triangles.min()} max={triangles.max()}")
        p = points[triangles]
        cross = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                 - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
        span = points.max(axis=0) - points.min(axis=0)
        scale = float(max(span[0], span[1], 1e-30))
        degen = np.flatnonzero(np.abs(cross) <= 1e-14 * scale * scale)
        if degen.size:
            raise MeshError(f"degenerate (zero-area) triangles: {degen[:10].tolist()}")
    if check_duplicates and n > 1:
        pairs = cKDTree(points).query_pairs(DUPLICATE_TOL, output_type="ndarray")
        if len(pairs):
            raise MeshError(f"duplicate nodes within {DUPLICATE_TOL}: {pairs[:5].tolist()}")
    return Mesh(points, node_type.astype(np.int64), triangles.astype(np.int64))


def make_mesh(points, node_type, triangles) -> Mesh:
    """Validated Mesh from arrays (duplicate/degeneracy/range checks)."""
    return _validate(np.asarray(points, dtype=np.float64),
                     np.asarray(node_type),
                     np.asarray(triangles, dtype=np.int64).reshape(-1, 3))


# ---------------------------------------------------------------------------
# file formats (line-oriented text; floats use repr round-tripping)

def save_mesh(path, mesh: Mesh):
    with open(path, "w") as f:
        f.write(f"MESH v1 {mesh.n_nodes} {mesh.n_triangles}\n")
        for (x, y), t in zip(mesh.points, mesh.node_type):
            f.write(f"{float(x)!r} {float(y)!r} {_TYPE_TO_CHAR[int(t)]}\n")
        for i, j, k in mesh.triangles:
            f.write(f"{i} {j} {k}\n")


def load_mesh(path) -> Mesh:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise MeshError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "MESH" or head[1] != "v1":
        raise MeshError(f"{path}:1: bad header {lines[0]!r}")
    try:
        n_nodes, n_tris = int(head[2]), int(head[3])
    except ValueError:
        raise MeshError(f"{path}:1: non-integer counts in header") from None
    if len(lines) < 1 + n_nodes + n_tris:
        raise MeshError(f"{path}: expected {1 + n_nodes + n_tris} lines, got {len(lines)}")
    points = np.empty((n_nodes, 2), dtype=np.float64)
    types = np.empty(n_nodes, dtype=np.int64)
    for i in range(n_nodes):
        ln = 2 + i
        parts = lines[1 + i].split()
        if len(parts) != 3:
            raise MeshError(f"{path}:{ln}: expected 'x y type'")
        try:
            points[i, 0] = float(parts[0])
            points[i, 1] = float(parts[1])
        except ValueError:
            raise MeshError(f"{path}:{ln}: bad coordinate") from None
        if parts[2] not in _CHAR_TO_TYPE:
            raise MeshError(f"{path}:{ln}: unknown node type {parts[2]!r} for node {i}")
        types[i] = _CHAR_TO_TYPE[parts[2]]
    tris = np.empty((n_tris, 3), dtype=np.int64)
    for t in range(n_tris):
        ln = 2 + n_nodes + t
        parts = lines[1 + n_nodes + t].split()
        if len(parts) != 3:
            raise MeshError(f"{path}:{ln}: expected 'i j k'")
        try:
            tris[t] = [int(p) for p in parts]
        except ValueError:
            raise MeshError(f"{path}:{ln}: bad triangle index") from None
    try:
        return _validate(points, types, tris)
    except MeshError as e:
        raise MeshError(f"{path}: {e}") from None


def save_field(path, uv: np.ndarray, angle_deg: float):
    uv = np.asarray(uv, dtype=np.float64)
    with open(path, "w") as f:
        f.write(f"FIELD v1 {uv.shape[0]} {float(angle_deg)!r}\n")
        for ux, uy in uv:
            f.write(f"{float(ux)!r} {float(uy)!r}\n")


def load_field(path):
    """Returns (uv: (N,2) float64, angle_deg: float)."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise MeshError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "FIELD" or head[1] != "v1":
        raise MeshError(f"{path}:1: bad header {lines[0]!r}")
    n = int(head[2])
    angle = float(head[3])
    if len(lines) < 1 + n:
        raise MeshError(f"{path}: expected {n} value lines, got {len(lines) - 1}")
    uv = np.empty((n, 2), dtype=np.float64)
    for i in range(n):
        parts = lines[1 + i].split()
        if len(parts) != 2:
            raise MeshError(f"{path}:{2 + i}: expected 'ux uy'")
        uv[i, 0] = float(parts[0])
        uv[i, 1] = float(parts[1])
    if not np.isfinite(uv).all():
        raise MeshError(f"{path}: non-finite values")
    return uv, angle


# ---------------------------------------------------------------------------
# reduction and edge sets

def build_reduced_mesh(mesh: Mesh, target_ratio: float):
    """Farthest-point subset of the nodes plus nearest-center assignment.

    Selection is seeded at the node closest to the coordinate centroid; ties
    break to the lowest index, so the result is order-deterministic.
    Returns (reduced Mesh, assignment array).  The reduced mesh keeps the
    selected nodes' coordinates/types and has no triangles (its connectivity
    is the cluster-adjacency edge set).
    """
    if target_ratio < 1.0:
        raise MeshError(f"target_ratio must be >= 1, got {target_ratio}")
    n = mesh.n_nodes
    if n == 0:
        raise MeshError("empty mesh")
    target = int(round(n / target_ratio))
    if target >= n:
        idx = np.arange(n, dtype=np.int64)
        reduced = Mesh(mesh.points.copy(), mesh.node_type.copy(),
                       np.zeros((0, 3), dtype=np.int64))
        return reduced, idx.copy(), idx
    if target < 4:
        raise MeshError(
            f"target_ratio {target_ratio} leaves {target} of {n} nodes; need >= 4")
    pts = mesh.points
    centroid = pts.mean(axis=0)
    seed = int(np.argmin(((pts - centroid) ** 2).sum(axis=1)))
    selected = np.empty(target, dtype=np.int64)
    selected[0] = seed
    dist = ((pts - pts[seed]) ** 2).sum(axis=1)
    for k in range(1, target):
        nxt = int(np.argmax(dist))
        selected[k] = nxt
        np.minimum(dist, ((pts - pts[nxt]) ** 2).sum(axis=1), out=dist)
    selected.sort()  # stable node order in the reduced mesh
    _, assignment = cKDTree(pts[selected]).query(pts)
    reduced = Mesh(pts[selected].copy(), mesh.node_type[selected].copy(),
                   np.zeros((0, 3), dtype=np.int64))
    return reduced, selected, assignment.astype(np.int64)


def _undirected_unique(pairs: np.ndarray, n: int) -> np.ndarray:
    """Unique undirected pairs (i<j) from an (E,2) array, sorted."""
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    keep = lo != hi
    code = lo[keep].astype(np.int64) * n + hi[keep]
    code = np.unique(code)
    return np.stack([code // n, code % n], axis=1)


def triangle_edges(mesh: Mesh) -> np.ndarray:
    """Unique undirected triangle edges as an (E,2) array with i<j."""
    t = mesh.triangles
    pairs = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=0)
    return _undirected_unique(pairs, mesh.n_nodes)


def node_neighbors(mesh: Mesh) -> list:
    """Sorted 1-ring neighbor ids per node, from triangle adjacency."""
    und = triangle_edges(mesh)
    order = np.lexsort((und[:, 1], und[:, 0]))
    out = [[] for _ in range(mesh.n_nodes)]
    for i, j in und[order]:
        out[i].append(j)
        out[j].append(i)
    return [np.array(sorted(js), dtype=np.int64) for js in out]


def build_edge_sets(mesh: Mesh, reduced: Mesh, reduced_indices: np.ndarray,
                    assignment: np.ndarray) -> MultiscaleGraph:
    """Assemble the four directed edge sets of the hierarchy.

    o2o: both directions of each unique triangle edge.
    r2r: both directions of pairs of reduced nodes whose clusters are adjacent.
    o2r: i -> assignment(i), plus i -> each r2r neighbor of assignment(i).
    r2o: exact reversal of o2r.
    """
    n = mesh.n_nodes
    und = triangle_edges(mesh)
    incident = np.zeros(n, dtype=bool)
    incident[und.ravel()] = True
    if not incident.all():
        missing = np.flatnonzero(~incident)
        raise MeshError(f"isolated original nodes (no incident triangle): "
                        f"{missing[:20].tolist()}")
    o2o_src = np.concatenate([und[:, 0], und[:, 1]])
    o2o_dst = np.concatenate([und[:, 1], und[:, 0]])

    k = reduced.n_nodes
    ca = assignment[und]  # cluster pair per original edge
    r_und = _undirected_unique(ca, k)
    r2r_src = np.concatenate([r_und[:, 0], r_und[:, 1]])
    r2r_dst = np.concatenate([r_und[:, 1], r_und[:, 0]])

    # reduced adjacency in CSR form for the o2r fan-out
    order = np.argsort(r2r_src, kind="stable")
    adj_dst = r2r_dst[order]
    counts = np.bincount(r2r_src, minlength=k)
    offsets = np.concatenate([[0], np.cumsum(counts)])

    centers = assignment
    fan = counts[centers]
    o2r_src = np.concatenate([np.arange(n, dtype=np.int64),
                              np.repeat(np.arange(n, dtype=np.int64), fan)])
    neigh = np.concatenate([adj_dst[offsets[c]:offsets[c + 1]] for c in centers]) \
        if n else np.zeros(0, dtype=np.int64)
    o2r_dst = np.concatenate([centers.astype(np.int64), neigh])

    graph = MultiscaleGraph(
        original=mesh, reduced=reduced,
        reduced_indices=np.asarray(reduced_indices, dtype=np.int64),
        assignment=np.asarray(assignment, dtype=np.int64),
        edge_sets={
            "o2o": EdgeSet("o2o", o2o_src.astype(np.int64), o2o_dst.astype(np.int64)),
            "o2r": EdgeSet("o2r", o2r_src, o2r_dst),
            "r2r": EdgeSet("r2r", r2r_src.astype(np.int64), r2r_dst.astype(np.int64)),
            "r2o": EdgeSet("r2o", o2r_dst.copy(), o2r_src.copy()),
        })
    _check_graph(graph)
    return graph


def _check_graph(g: MultiscaleGraph):
    n, k = g.original.n_nodes, g.reduced.n_nodes
    o2r = g.edge_sets["o2r"]
    if np.bincount(o2r.src, minlength=n).min() < 1:
        raise MeshError("some original node has no o2r edge")
    if np.bincount(o2r.dst, minlength=k).min() < 1:
        raise MeshError("some reduced node receives no o2r edge")
    r2r = g.edge_sets["r2r"]
    # connectivity on nonisolated reduced nodes
    present = np.zeros(k, dtype=bool)
    present[r2r.src] = True
    if present.any():
        comp = _connected_component(r2r.src, r2r.dst, k, int(np.flatnonzero(present)[0]))
        if not comp[present].all():
            raise MeshError("r2r graph disconnected on its nonisolated nodes")


def _connected_component(src, dst, n, start) -> np.ndarray:
    order = np.argsort(src, kind="stable")
    s, d = src[order], dst[order]
    counts = np.bincount(s, minlength=n)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    seen = np.zeros(n, dtype=bool)
    seen[start] = True
    frontier = [start]
    while frontier:
        nxt = []
        for u in frontier:
            for v in d[offsets[u]:offsets[u + 1]]:
                if not seen[v]:
                    seen[v] = True
                    nxt.append(int(v))
        frontier = nxt
    return seen


def build_multiscale_graph(mesh: Mesh, target_ratio: float) -> MultiscaleGraph:
    reduced, indices, assignment = build_reduced_mesh(mesh, target_ratio)
    return build_edge_sets(mesh, reduced, indices, assignment)


# ---------------------------------------------------------------------------
# graph persistence (text, line-oriented like the mesh format)

def save_graph(path, g: MultiscaleGraph):
    with open(path, "w") as f:
        f.write(f"GRAPH v1 {g.original.n_nodes} {g.reduced.n_nodes}\n")
        f.write("REDUCED " + " ".join(map(str, g.reduced_indices)) + "\n")
        f.write("ASSIGN " + " ".join(map(str, g.assignment)) + "\n")
        for name in EDGE_SET_NAMES:
            es = g.edge_sets[name]
            f.write(f"EDGES {name} {es.n_edges}\n")
            f.write(" ".join(map(str, es.src)) + "\n")
            f.write(" ".join(map(str, es.dst)) + "\n")


def load_graph(path, mesh: Mesh) -> MultiscaleGraph:
    with open(path) as f:
        lines = f.read().splitlines()
    head = lines[0].split()
    if head[:2] != ["GRAPH", "v1"]:
        raise MeshError(f"{path}:1: bad header {lines[0]!r}")
    n, k = int(head[2]), int(head[3])
    if n != mesh.n_nodes:
        raise MeshError(f"{path}: graph has {n} nodes, mesh has {mesh.n_nodes}")

    def ints(line, tag):
        parts = line.split()
        if parts[0] != tag:
            raise MeshError(f"{path}: expected {tag} line, got {parts[0]!r}")
        return np.array([int(p) for p in parts[1:]], dtype=np.int64)

    reduced_idx = ints(lines[1], "REDUCED")
    assignment = ints(lines[2], "ASSIGN")
    if reduced_idx.size != k or assignment.size != n:
        raise MeshError(f"{path}: count mismatch in REDUCED/ASSIGN")
    reduced = Mesh(mesh.points[reduced_idx].copy(), mesh.node_type[reduced_idx].copy(),
                   np.zeros((0, 3), dtype=np.int64))
    edge_sets = {}
    row = 3
    for _ in range(4):
        hdr = lines[row].split()
        if hdr[0] != "EDGES" or hdr[1] not in EDGE_SET_NAMES:
            raise MeshError(f"{path}: bad edge-set header {lines[row]!r}")
        name, count = hdr[1], int(hdr[2])
        src = np.array(lines[row + 1].split(), dtype=np.int64) if count else np.zeros(0, np.int64)
        dst = np.array(lines[row + 2].split(), dtype=np.int64) if count else np.zeros(0, np.int64)
        if src.size != count or dst.size != count:
            raise MeshError(f"{path}: edge count mismatch for {name}")
        edge_sets[name] = EdgeSet(name, src, dst)
        row += 3
    g = MultiscaleGraph(mesh, reduced, reduced_idx, assignment, edge_sets)
    _check_graph(g)
    return g
