"""Synthetic dataset oracle: obstacle meshes and analytic potential flow.

Ground truth is ideal incompressible flow around circular obstacles,
built from a uniform stream plus one doublet per disk with iterated image
corrections for disk-disk interaction.  The field is exactly divergence-free
and irrotational; wall tangency is exact for a single disk and bounded by
the image-iteration truncation for several.
"""

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay

from . import mesh as msh
from .mesh import Mesh, MeshError, NODE_BOUNDARY, NODE_FLUID, NODE_WALL

IMAGE_ROUNDS = 3
GOLDEN = 0.618033988749895


@dataclass(frozen=True)
class Disk:
    cx: float
    cy: float
    r: float


class ObstacleSet:
    """Disks inside the square domain [-L, L]^2."""

    def __init__(self, disks, half_width: float):
        self.disks = [Disk(float(d[0]), float(d[1]), float(d[2]))
                      if not isinstance(d, Disk) else d for d in disks]
        self.half_width = float(half_width)
        L = self.half_width
        if L <= 0:
            raise ValueError("half_width must be positive")
        for i, d in enumerate(self.disks):
            if d.r <= 0:
                raise ValueError(f"disk {i} has nonpositive radius")
            if abs(d.cx) + d.r > L or abs(d.cy) + d.r > L:
                raise ValueError(f"disk {i} extends outside the domain")
        for i in range(len(self.disks)):
            for j in range(i + 1, len(self.disks)):
                a, b = self.disks[i], self.disks[j]
                gap = math.hypot(a.cx - b.cx, a.cy - b.cy) - a.r - b.r
                if gap < 0.05 * L:
                    raise ValueError(
                        f"disks {i} and {j} too close: gap {gap:.4g} < 0.05*L")

    def coverage(self) -> float:
        """Fraction of the domain area covered by disks."""
        return sum(math.pi * d.r ** 2 for d in self.disks) / (4 * self.half_width ** 2)


# ---------------------------------------------------------------------------
# analytic flow

def _image_doublets(obs: ObstacleSet, angle_rad: float, u_inf: float):
    """Doublet positions/strengths from iterated circle-theorem images.

    A doublet of strength mu at d has, in the circle (c, a), an image at
    c + a^2/conj(d - c) of strength -conj(mu) * a^2 / conj(d - c)^2.
    """
    centers = np.array([complex(d.cx, d.cy) for d in obs.disks])
    radii = np.array([d.r for d in obs.disks])
    # response of each disk to the uniform stream
    pos = [centers.copy()]
    mu = [u_inf * radii ** 2 * np.exp(1j * angle_rad) * np.ones_like(centers)]
    owner = [np.arange(len(centers))]
    for _ in range(IMAGE_ROUNDS):
        new_pos, new_mu, new_owner = [], [], []
        for k in range(len(centers)):
            c, a = centers[k], radii[k]
            outside = owner[-1] != k
            if not outside.any():
                continue
            d = pos[-1][outside]
            m = mu[-1][outside]
            rel = np.conj(d - c)
            new_pos.append(c + a * a / rel)
            new_mu.append(-np.conj(m) * a * a / rel ** 2)
            new_owner.append(np.full(int(outside.sum()), k))
        if not new_pos:
            break
        pos.append(np.concatenate(new_pos))
        mu.append(np.concatenate(new_mu))
        owner.append(np.concatenate(new_owner))
    return np.concatenate(pos), np.concatenate(mu)


def potential_flow(obs: ObstacleSet, angle_rad: float, u_inf: float,
                   points: np.ndarray) -> np.ndarray:
    """Velocity (N, 2) of the ideal flow at the given points.

    Points must lie on or outside every disk.
    """
    points = np.asarray(points, dtype=np.float64)
    z = points[:, 0] + 1j * points[:, 1]
    for i, d in enumerate(obs.disks):
        inside = np.abs(z - complex(d.cx, d.cy)) < d.r * (1.0 - 1e-12)
        if inside.any():
            raise ValueError(
                f"{int(inside.sum())} evaluation points inside disk {i}")
    w = np.full(z.shape, u_inf * np.exp(-1j * angle_rad), dtype=complex)
    if obs.disks:
        pos, mu = _image_doublets(obs, angle_rad, u_inf)
        w = w - (mu[None, :] / (z[:, None] - pos[None, :]) ** 2).sum(axis=1)
    return np.stack([w.real, -w.imag], axis=1)


# ---------------------------------------------------------------------------
# mesh generation

def _ring(cx, cy, radius, n, offset):
    t = offset + 2.0 * np.pi * np.arange(n) / n
    return np.stack([cx + radius * np.cos(t), cy + radius * np.sin(t)], axis=1)


# Near a disk of radius a the doublet field's third derivative scales like
# (U/a^3)(a/r)^5, so equidistributing the quadratic-fit error over rings
# wants spacing h(r) = h_wall * (r/a)^(5/2) with h_wall ~ a^(3/2).
WALL_SPACING_COEF = 0.17
ANNULUS_EXTENT = 2.6
ANNULUS_BUDGET_FRAC = 0.65
# extra node budget per obstacle beyond the first, so multi-disk meshes
# keep the same near-wall resolution as single-disk ones
NODES_PER_EXTRA_DISK = 450


def _disk_rings(d: Disk, h_w: float, h_cap: float):
    """(radius, count, offset, is_wall) rows of the graded ring ladder."""
    n0 = max(16, int(math.ceil(2 * np.pi * d.r / h_w)))
    rows = [(d.r, n0, 0.0, True)]
    r = d.r + 0.75 * h_w
    prev_n = n0
    gap = 0.75 * h_w
    while True:
        local = h_w * (r / d.r) ** 2.5
        if local >= h_cap or r > ANNULUS_EXTENT * d.r:
            break
        n = max(12, int(math.ceil(2 * np.pi * r / local)))
        rows.append((r, n, np.pi / prev_n, False))
        prev_n = n
        gap = 0.9 * local
        r += gap
    return rows, r - gap, gap


def _scatter(obs: ObstacleSet, h: float, target: int,
             rng: np.random.Generator):
    """Node positions and types for one candidate mesh."""
    L = obs.half_width
    pts, types = [], []

    # outer square, one shared node per corner
    n_side = max(3, int(round(2 * L / h)))
    edge = np.linspace(-L, L, n_side + 1)
    for side in range(4):
        coords = edge[:-1]
        if side == 0:
            p = np.stack([coords, np.full(len(coords), -L)], axis=1)
        elif side == 1:
            p = np.stack([np.full(len(coords), L), coords], axis=1)
        elif side == 2:
            p = np.stack([-coords, np.full(len(coords), L)], axis=1)
        else:
            p = np.stack([np.full(len(coords), -L), -coords], axis=1)
        pts.append(p)
        types.append(np.full(len(p), NODE_BOUNDARY))

    # graded annulus per disk; coarsen if the ladders would eat the budget
    h_walls = [min(WALL_SPACING_COEF * d.r ** 1.5, 0.6 * h)
               for d in obs.disks]
    est = sum(2.0 * d.r ** 2 / hw ** 2
              for d, hw in zip(obs.disks, h_walls))
    if est > ANNULUS_BUDGET_FRAC * target:
        h_walls = [hw * math.sqrt(est / (ANNULUS_BUDGET_FRAC * target))
                   for hw in h_walls]

    annulus_edge = []
    for j, d in enumerate(obs.disks):
        rows, r_edge, gap_edge = _disk_rings(d, h_walls[j], h)
        for rad, n, off, is_wall in rows:
            ring = _ring(d.cx, d.cy, rad, n, off + 2 * np.pi * GOLDEN * j)
            if is_wall:
                pts.append(ring)
                types.append(np.full(n, NODE_WALL))
                continue
            keep = np.ones(len(ring), dtype=bool)
            for m, other in enumerate(obs.disks):
                if m == j:
                    continue
                dist = np.hypot(ring[:, 0] - other.cx, ring[:, 1] - other.cy)
                keep &= dist > other.r + 0.4 * h_walls[m]
            keep &= np.abs(ring).max(axis=1) < L - 0.6 * h
            pts.append(ring[keep])
            types.append(np.full(int(keep.sum()), NODE_FLUID))
        annulus_edge.append(r_edge + 0.7 * gap_edge)

    # jittered-grid interior scatter
    m_edge = 0.8 * h
    axis = np.arange(-L + m_edge, L - m_edge + 1e-12, h)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    grid = grid + rng.uniform(-0.35 * h, 0.35 * h, grid.shape)
    keep = np.abs(grid).max(axis=1) < L - 0.7 * h
    for j, d in enumerate(obs.disks):
        dist = np.hypot(grid[:, 0] - d.cx, grid[:, 1] - d.cy)
        keep &= dist > annulus_edge[j]
    pts.append(grid[keep])
    types.append(np.full(int(keep.sum()), NODE_FLUID))

    return np.concatenate(pts), np.concatenate(types)


def generate_mesh(obs: ObstacleSet, target_nodes: int, seed: int) -> Mesh:
    """Triangulated fluid region with typed nodes, about target_nodes in size."""
    if target_nodes < 50:
        raise ValueError("target_nodes must be >= 50")
    if obs.coverage() > 0.5:
        raise ValueError(
            f"obstacles cover {obs.coverage():.0%} of the domain (max 50%)")
    L = obs.half_width
    free_area = 4 * L * L * (1.0 - obs.coverage())
    h0 = math.sqrt(free_area / target_nodes)
    # the graded annuli are nearly h-independent, so fit n(h) = a + c/h^2
    # through two probes and solve for the spacing that hits the target
    n0 = len(_scatter(obs, h0, target_nodes, np.random.default_rng([seed, 0]))[0])
    ratio = max(0.5, min(2.0, math.sqrt(n0 / target_nodes)))
    h1 = h0 * (ratio if abs(ratio - 1.0) > 1e-3 else 1.3)
    n1 = len(_scatter(obs, h1, target_nodes, np.random.default_rng([seed, 0]))[0])
    c = (n0 - n1) / (1.0 / h0 ** 2 - 1.0 / h1 ** 2)
    a = n0 - c / h0 ** 2
    if target_nodes > a and c > 0:
        h = math.sqrt(c / (target_nodes - a))
    else:
        h = h1
    # small budgets can be eaten whole by the graded annuli, which drives
    # the solved spacing to absurd values; cap it so the far field keeps a
    # minimum resolution instead of degenerating to walls plus corners
    h = min(h, L / 3.0)
    points, types = _scatter(obs, h, target_nodes,
                             np.random.default_rng([seed, 1]))

    tri = Delaunay(points).simplices
    cent = points[tri].mean(axis=1)
    keep = np.ones(len(tri), dtype=bool)
    for d in obs.disks:
        keep &= np.hypot(cent[:, 0] - d.cx, cent[:, 1] - d.cy) > d.r
    # drop the rare degenerate sliver so mesh validation stays strict
    p0, p1, p2 = (points[tri[:, k]] for k in range(3))
    area2 = np.abs((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
                   - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0]))
    keep &= area2 > 1e-12 * L * L
    tri = tri[keep]

    used = np.zeros(len(points), dtype=bool)
    used[tri.ravel()] = True
    remap = np.cumsum(used) - 1
    mesh = msh.make_mesh(points[used], types[used], remap[tri])
    if not (mesh.node_type == NODE_FLUID).any():
        raise MeshError("generated mesh has no fluid nodes")
    return mesh


# Radius ranges per disk count, as fractions of the half-width.  Larger
# disks make the near-wall field resolvable at desk-scale node budgets,
# but several large disks cannot stay far enough from the boundary, so
# the range shrinks with the count.
RADIUS_RANGES = {1: (0.20, 0.28), 2: (0.16, 0.20), 3: (0.12, 0.15)}


def sample_obstacles(rng: np.random.Generator, half_width: float,
                     n_disks: int, r_lo: float = None,
                     r_hi: float = None) -> ObstacleSet:
    """Random non-overlapping disks with margins that keep the analytic
    field accurate: generous pairwise gaps for image convergence and a
    far-field disturbance check at the outer boundary."""
    L = half_width
    if r_lo is None or r_hi is None:
        lo, hi = RADIUS_RANGES[min(max(n_disks, 1), 3)]
        r_lo = lo if r_lo is None else r_lo
        r_hi = hi if r_hi is None else r_hi
    t = np.linspace(-L, L, 41)
    border = np.concatenate([
        np.stack([t, np.full_like(t, -L)], axis=1),
        np.stack([t, np.full_like(t, L)], axis=1),
        np.stack([np.full_like(t, -L), t], axis=1),
        np.stack([np.full_like(t, L), t], axis=1),
    ])
    for _ in range(1000):
        radii = rng.uniform(r_lo * L, r_hi * L, n_disks)
        centers = rng.uniform(-0.45 * L, 0.45 * L, (n_disks, 2))
        ok = True
        for i in range(n_disks):
            for j in range(i + 1, n_disks):
                gap = (np.hypot(*(centers[i] - centers[j]))
                       - radii[i] - radii[j])
                if gap < max(0.05 * L, 1.25 * max(radii[i], radii[j])):
                    ok = False
        if not ok:
            continue
        # far-field disturbance ~ sum (a_k / dist_k)^2 at the boundary
        dist = np.hypot(border[:, None, 0] - centers[None, :, 0],
                        border[:, None, 1] - centers[None, :, 1])
        if ((radii[None, :] / dist) ** 2).sum(axis=1).max() > 0.08:
            continue
        return ObstacleSet(
            [Disk(c[0], c[1], r) for c, r in zip(centers, radii)], L)
    raise RuntimeError("could not place obstacles after 1000 attempts")


def divergence_rms(mesh: Mesh, uv: np.ndarray) -> float:
    """RMS of the discrete divergence over fluid nodes.

    Per-node quadratic weighted least-squares gradient over the 2-ring:
    wall and boundary stencils are one-sided, so the quality measure of a
    sampled field is taken where the stencil is interior.
    """
    uv = np.asarray(uv, dtype=np.float64)
    nbr = msh.node_neighbors(mesh)
    vals = []
    for i in range(mesh.n_nodes):
        if mesh.node_type[i] != NODE_FLUID:
            continue
        js = set(nbr[i])
        for j in list(js):
            js.update(nbr[j])
        js.discard(i)
        js = np.fromiter(sorted(js), dtype=np.int64)
        dp = mesh.points[js] - mesh.points[i]
        s = np.sqrt((dp ** 2).sum(axis=1)).mean()
        dx, dy = dp[:, 0] / s, dp[:, 1] / s
        basis = np.stack([dx, dy, 0.5 * dx ** 2, dx * dy, 0.5 * dy ** 2], axis=1)
        w = 1.0 / (dx ** 2 + dy ** 2)
        bw = basis * w[:, None]
        gram = basis.T @ bw
        if js.size < 5 or np.linalg.cond(gram) > 1e12:
            continue
        coef = np.linalg.solve(gram, bw.T)
        du = uv[js] - uv[i]
        vals.append((coef[0] @ du[:, 0] + coef[1] @ du[:, 1]) / s)
    if not vals:
        raise ValueError("no fluid nodes with a usable stencil")
    v = np.array(vals)
    return float(np.sqrt((v ** 2).mean()))


# ---------------------------------------------------------------------------
# dataset generation

@dataclass
class GenConfig:
    out_dir: str
    seed: int
    n_train: int = 4
    n_test: int = 2
    n_angles: int = 36
    nodes_lo: int = 800
    nodes_hi: int = 1100
    half_width: float = 1.0
    u_inf: float = 1.0
    disks_lo: int = 1
    disks_hi: int = 2


@dataclass
class ManifestEntry:
    split: str
    mesh_path: str
    angle_deg: float
    field_path: str


@dataclass
class DatasetManifest:
    root: str
    seed: int
    scale: tuple  # (sx, sy) applied to every stored field
    entries: list

    def mesh_paths(self, split=None):
        seen = []
        for e in self.entries:
            if split in (None, e.split) and e.mesh_path not in seen:
                seen.append(e.mesh_path)
        return seen


def _atomic_write(path, writer):
    tmp = f"{path}.tmp"
    writer(tmp)
    os.replace(tmp, path)


def generate_dataset(cfg: GenConfig) -> DatasetManifest:
    """Meshes, per-angle fields, and the manifest, written to out_dir.

    Fields are stored in physical units so wall tangency holds exactly on
    disk; the manifest records per-component max factors over the TRAIN
    split, and dividing by them puts every train component in [-1, 1].
    Test fields share the train factors.
    """
    if cfg.n_train + cfg.n_test < 3:
        raise ValueError("need at least 3 mesh configurations")
    os.makedirs(cfg.out_dir, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    angles = np.arange(cfg.n_angles) * (360.0 / cfg.n_angles)

    meshes = []
    for i in range(cfg.n_train + cfg.n_test):
        split = "train" if i < cfg.n_train else "test"
        n_disks = int(rng.integers(cfg.disks_lo, cfg.disks_hi + 1))
        obs = sample_obstacles(rng, cfg.half_width, n_disks)
        target = (int(rng.integers(cfg.nodes_lo, cfg.nodes_hi + 1))
                  + NODES_PER_EXTRA_DISK * (n_disks - 1))
        mesh = generate_mesh(obs, target, seed=int(rng.integers(2 ** 31)))
        name = f"{split}_{i}.mesh"
        _atomic_write(os.path.join(cfg.out_dir, name),
                      lambda p, m=mesh: msh.save_mesh(p, m))
        meshes.append((split, name, mesh, obs))

    raw = {}
    for split, name, mesh, obs in meshes:
        for a in angles:
            uv = potential_flow(obs, math.radians(a), cfg.u_inf, mesh.points)
            raw[(name, float(a))] = uv
    train_fields = [uv for (name, _), uv in raw.items()
                    if name.startswith("train")]
    sx = max(float(np.abs(uv[:, 0]).max()) for uv in train_fields)
    sy = max(float(np.abs(uv[:, 1]).max()) for uv in train_fields)

    entries = []
    for split, name, mesh, obs in meshes:
        stem = name[:-len(".mesh")]
        for a in angles:
            uv = raw[(name, float(a))]
            fname = f"{stem}_a{int(round(a)):03d}.field"
            _atomic_write(os.path.join(cfg.out_dir, fname),
                          lambda p, u=uv, ang=a: msh.save_field(p, u, ang))
            entries.append(ManifestEntry(split, name, float(a), fname))

    manifest = DatasetManifest(cfg.out_dir, cfg.seed, (sx, sy), entries)
    _atomic_write(os.path.join(cfg.out_dir, "manifest.txt"),
                  lambda p: _write_manifest(p, manifest))
    return manifest


def _write_manifest(path, manifest: DatasetManifest):
    with open(path, "w") as f:
        f.write(f"# seed {manifest.seed}\n")
        f.write(f"# scale {manifest.scale[0]!r} {manifest.scale[1]!r}\n")
        for e in manifest.entries:
            f.write(f"{e.split} {e.mesh_path} {e.angle_deg!r} {e.field_path}\n")


def load_manifest(path) -> DatasetManifest:
    root = os.path.dirname(os.path.abspath(path))
    seed, scale = None, None
    entries = []
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "#":
                if parts[1] == "seed":
                    seed = int(parts[2])
                elif parts[1] == "scale":
                    scale = (float(parts[2]), float(parts[3]))
                continue
            if len(parts) != 4 or parts[0] not in ("train", "test"):
                raise MeshError(f"{path}:{ln}: bad manifest line")
            entries.append(ManifestEntry(parts[0], parts[1],
                                         float(parts[2]), parts[3]))
    if seed is None or scale is None:
        raise MeshError(f"{path}: missing seed or scale header")
    return DatasetManifest(root, seed, scale, entries)
