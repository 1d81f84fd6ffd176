"""Evaluation suite for (generated, ground-truth) velocity field pairs.

Per-angle metrics: relative L2 errors for the vector field, each component,
and the speed; mean endpoint error; mean cosine similarity; SSIM between
rasterized speed images; a structure-function curve distance; per-component
1-Wasserstein distances of the value distributions; and nodewise moments.
Snapshot ensembles get a POD energy spectrum. Report writers emit CSV, a
text table, PGM rasters, and POD spectra; every report header records the
discretization defaults so results are self-describing.
"""

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh, node_neighbors

COSINE_EPS = 1e-8
S2_EPS = 1e-8
KDE_BW_FLOOR = 1e-6

RASTER_R = 128
S2_BINS = 24
S2_PAIRS = 200_000
KDE_GRID = 256

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def default_meta(**overrides) -> dict:
    """Self-description header written into every report."""
    meta = {
        "raster_r": RASTER_R,
        "raster_interp": "barycentric-p1",
        "ssim_window": f"{SSIM_WINDOW}x{SSIM_WINDOW}-gaussian-sigma{SSIM_SIGMA}",
        "ssim_k1": SSIM_K1,
        "ssim_k2": SSIM_K2,
        "s2_bins": S2_BINS,
        "s2_pairs": S2_PAIRS,
        "kde_bandwidth": f"silverman-floor-{KDE_BW_FLOOR}",
        "cosine_eps": COSINE_EPS,
    }
    meta.update(overrides)
    return meta


def _as_field(arr, name="field") -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 2 or out.shape[1] != 2:
        raise ValueError(f"{name} must have shape (N, 2), got {out.shape}")
    return out


def _check_pair(pred, gt):
    pred = _as_field(pred, "pred")
    gt = _as_field(gt, "gt")
    if pred.shape[0] != gt.shape[0]:
        raise ValueError(
            f"field node counts differ: {pred.shape[0]} vs {gt.shape[0]}")
    return pred, gt


def _check_on_mesh(field: np.ndarray, mesh: Mesh):
    if field.shape[0] != mesh.n_nodes:
        raise ValueError(
            f"field has {field.shape[0]} nodes, mesh has {mesh.n_nodes}")


def _rel_l2(p: np.ndarray, t: np.ndarray) -> float:
    d = p - t
    if d.ndim == 1:
        num = float(np.sqrt(np.mean(d * d)))
        den = float(np.sqrt(np.mean(t * t)))
    else:
        num = float(np.sqrt(np.mean(np.sum(d * d, axis=1))))
        den = float(np.sqrt(np.mean(np.sum(t * t, axis=1))))
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / den


def pointwise_metrics(pred, gt) -> dict:
    """Nodewise error scalars for one field pair.

    Keys: rel_l2_u / rel_l2_ux / rel_l2_uy / rel_l2_mag (RMS of the error
    over RMS of the truth), mae (mean endpoint error), cosine (mean cosine
    similarity with an additive 1e-8 in the denominator).
    """
    pred, gt = _check_pair(pred, gt)
    mag_p = np.hypot(pred[:, 0], pred[:, 1])
    mag_g = np.hypot(gt[:, 0], gt[:, 1])
    dot = np.sum(pred * gt, axis=1)
    cosine = float(np.mean(dot / (mag_p * mag_g + COSINE_EPS)))
    return {
        "rel_l2_u": _rel_l2(pred, gt),
        "rel_l2_ux": _rel_l2(pred[:, 0], gt[:, 0]),
        "rel_l2_uy": _rel_l2(pred[:, 1], gt[:, 1]),
        "rel_l2_mag": _rel_l2(mag_p, mag_g),
        "mae": float(np.mean(np.hypot(*(pred - gt).T))),
        "cosine": cosine,
    }


# ---------------------------------------------------------------- raster


def raster_field(mesh: Mesh, values, r: int = RASTER_R):
    """Interpolate a nodal scalar onto an r x r cell-center grid.

    Returns (grid, mask); mask is True where some triangle covers the cell
    center, so obstacle holes and uncovered corners stay masked. Linear
    interpolation inside each triangle.
    """
    if r < 32:
        raise ValueError(f"raster resolution must be >= 32, got {r}")
    values = np.asarray(values, dtype=np.float64).ravel()
    _check_on_mesh(values[:, None], mesh)
    pts = mesh.points
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-300)
    xs = lo[0] + (np.arange(r) + 0.5) * span[0] / r
    ys = lo[1] + (np.arange(r) + 0.5) * span[1] / r

    grid = np.zeros((r, r), dtype=np.float64)
    mask = np.zeros((r, r), dtype=bool)
    for tri in mesh.triangles:
        a, b, c = pts[tri[0]], pts[tri[1]], pts[tri[2]]
        det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1])
        if abs(det) < 1e-300:
            continue
        tx0 = min(a[0], b[0], c[0])
        tx1 = max(a[0], b[0], c[0])
        ty0 = min(a[1], b[1], c[1])
        ty1 = max(a[1], b[1], c[1])
        ix = np.flatnonzero((xs >= tx0) & (xs <= tx1))
        iy = np.flatnonzero((ys >= ty0) & (ys <= ty1))
        if ix.size == 0 or iy.size == 0:
            continue
        gx = xs[ix][None, :]
        gy = ys[iy][:, None]
        l1 = ((b[1] - c[1]) * (gx - c[0]) + (c[0] - b[0]) * (gy - c[1])) / det
        l2 = ((c[1] - a[1]) * (gx - c[0]) + (a[0] - c[0]) * (gy - c[1])) / det
        l3 = 1.0 - l1 - l2
        inside = (l1 >= -1e-12) & (l2 >= -1e-12) & (l3 >= -1e-12)
        if not inside.any():
            continue
        val = (l1 * values[tri[0]] + l2 * values[tri[1]]
               + l3 * values[tri[2]])
        sub_y, sub_x = np.nonzero(inside)
        grid[iy[sub_y], ix[sub_x]] = val[inside]
        mask[iy[sub_y], ix[sub_x]] = True
    return grid, mask


def _gaussian_taps(n: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA):
    x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter2(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    out = np.array([np.convolve(row, taps, mode="same") for row in img])
    return np.array([np.convolve(col, taps, mode="same") for col in out.T]).T


def ssim_raster(pred, gt, mesh: Mesh, r: int = RASTER_R) -> float:
    """SSIM between the rasterized speed images of two fields.

    Statistics use a Gaussian window; a pixel contributes only when its
    whole window lies inside the image with no masked cell, so obstacle
    cells never enter the mean. Dynamic range is the larger unmasked speed
    of the two rasters.
    """
    pred, gt = _check_pair(pred, gt)
    _check_on_mesh(pred, mesh)
    img_p, mask = raster_field(mesh, np.hypot(pred[:, 0], pred[:, 1]), r)
    img_g, _ = raster_field(mesh, np.hypot(gt[:, 0], gt[:, 1]), r)
    if not mask.any():
        raise ValueError("rasterization produced an all-masked grid")

    half = SSIM_WINDOW // 2
    ones = np.ones(SSIM_WINDOW, dtype=np.float64)
    cover = _filter2(mask.astype(np.float64), ones)
    valid = cover >= SSIM_WINDOW * SSIM_WINDOW - 1e-9
    valid[:half, :] = valid[-half:, :] = False
    valid[:, :half] = valid[:, -half:] = False
    if not valid.any():
        raise ValueError("no fully unmasked SSIM window in the raster")

    dyn = max(float(img_p[mask].max()), float(img_g[mask].max()))
    if dyn <= 0.0:
        dyn = 1.0
    c1 = (SSIM_K1 * dyn) ** 2
    c2 = (SSIM_K2 * dyn) ** 2

    img_p = np.where(mask, img_p, 0.0)
    img_g = np.where(mask, img_g, 0.0)
    taps = _gaussian_taps()
    mu_p = _filter2(img_p, taps)
    mu_g = _filter2(img_g, taps)
    var_p = _filter2(img_p * img_p, taps) - mu_p * mu_p
    var_g = _filter2(img_g * img_g, taps) - mu_g * mu_g
    cov = _filter2(img_p * img_g, taps) - mu_p * mu_g
    num = (2.0 * mu_p * mu_g + c1) * (2.0 * cov + c2)
    den = (mu_p * mu_p + mu_g * mu_g + c1) * (var_p + var_g + c2)
    return float(np.mean(num[valid] / den[valid]))


# ------------------------------------------------- structure function


@dataclass(frozen=True)
class S2Result:
    """Binned structure-function curves shared by one sampled pair set."""

    r: np.ndarray        # (K,) geometric bin centers, non-empty bins only
    pred: np.ndarray     # (K,) S2 of the generated field
    gt: np.ndarray       # (K,) S2 of the truth field
    counts: np.ndarray   # (K,) pairs per kept bin
    dropped_bins: int    # empty bins removed before weighting


def _sample_pairs(n: int, n_pairs: int, seed: int):
    avail = n * (n - 1) // 2
    if n < 2:
        raise ValueError("need at least 2 nodes to form pairs")
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    if n_pairs > avail:
        raise ValueError(f"n_pairs {n_pairs} exceeds available pairs {avail}")
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, n_pairs)
    j = rng.integers(0, n - 1, n_pairs)
    j = j + (j >= i)
    return i, j


def _bin_pairs(r: np.ndarray, n_bins: int):
    ok = r > 0.0
    if not ok.any():
        raise ValueError("all sampled pairs have zero separation")
    r_ok = r[ok]
    r_lo, r_hi = float(r_ok.min()), float(r_ok.max())
    if r_lo == r_hi:
        edges = np.array([r_lo * (1.0 - 1e-12), r_hi * (1.0 + 1e-12)])
    else:
        edges = np.geomspace(r_lo, r_hi, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, r_ok, side="right") - 1,
                  0, len(edges) - 2)
    return ok, idx, edges


def _s2_curve(idx, n_bins, d_sq):
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=d_sq, minlength=n_bins)
    return counts, sums


def structure_function(points, values, n_bins: int = S2_BINS,
                       n_pairs: int = S2_PAIRS, seed: int = 0):
    """S2 curve of a nodal scalar over randomly sampled point pairs.

    Returns (r_centers, s2, counts) for the non-empty log-spaced bins.
    """
    points = np.asarray(points, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64).ravel()
    i, j = _sample_pairs(points.shape[0], n_pairs, seed)
    r = np.hypot(*(points[i] - points[j]).T)
    ok, idx, edges = _bin_pairs(r, n_bins)
    d = values[i][ok] - values[j][ok]
    counts, sums = _s2_curve(idx, len(edges) - 1, d * d)
    keep = counts > 0
    centers = np.sqrt(edges[:-1] * edges[1:])
    return centers[keep], sums[keep] / counts[keep], counts[keep]


def structure_function_distance(pred, gt, mesh: Mesh,
                                n_bins: int = S2_BINS,
                                n_pairs: int = S2_PAIRS,
                                seed: int = 0):
    """Weighted relative distance between the speed S2 curves of two fields.

    Both curves share one sampled pair set. Bin weights are proportional to
    pair counts; empty bins are dropped, the rest reweighted, and the drop
    count recorded on the result. Returns (eps_s2, S2Result).
    """
    pred, gt = _check_pair(pred, gt)
    _check_on_mesh(pred, mesh)
    i, j = _sample_pairs(mesh.n_nodes, n_pairs, seed)
    r = np.hypot(*(mesh.points[i] - mesh.points[j]).T)
    ok, idx, edges = _bin_pairs(r, n_bins)
    mag_p = np.hypot(pred[:, 0], pred[:, 1])
    mag_g = np.hypot(gt[:, 0], gt[:, 1])
    dp = mag_p[i][ok] - mag_p[j][ok]
    dg = mag_g[i][ok] - mag_g[j][ok]
    counts, sums_p = _s2_curve(idx, len(edges) - 1, dp * dp)
    _, sums_g = _s2_curve(idx, len(edges) - 1, dg * dg)
    keep = counts > 0
    counts_k = counts[keep]
    s2_p = sums_p[keep] / counts_k
    s2_g = sums_g[keep] / counts_k
    w = counts_k / counts_k.sum()
    num = float(np.sqrt(np.sum(w * (s2_p - s2_g) ** 2)))
    den = float(np.sqrt(np.sum(w * s2_g ** 2)))
    eps = num / (den + S2_EPS)
    centers = np.sqrt(edges[:-1] * edges[1:])
    result = S2Result(r=centers[keep], pred=s2_p, gt=s2_g, counts=counts_k,
                      dropped_bins=int(len(counts) - keep.sum()))
    return eps, result


# ----------------------------------------------------- distributions


def _silverman_bw(x: np.ndarray) -> float:
    sd = float(np.std(x))
    q75, q25 = np.percentile(x, [75.0, 25.0])
    iqr = float(q75 - q25)
    spread = min(sd, iqr / 1.34) if iqr > 0.0 else sd
    return max(0.9 * spread * len(x) ** (-0.2), KDE_BW_FLOOR)


def _exact_w1(a: np.ndarray, b: np.ndarray) -> float:
    # integral of |F_a - F_b| over the merged breakpoints; for equal sizes
    # this equals the mean absolute difference of matched sorted samples
    a = np.sort(a)
    b = np.sort(b)
    allv = np.sort(np.concatenate([a, b]))
    deltas = np.diff(allv)
    ca = np.searchsorted(a, allv[:-1], side="right") / len(a)
    cb = np.searchsorted(b, allv[:-1], side="right") / len(b)
    return float(np.sum(np.abs(ca - cb) * deltas))


def pdf_wasserstein(pred_values, gt_values, n_grid: int = KDE_GRID):
    """Gaussian-KDE curves of two sample sets plus their exact W1 distance.

    Bandwidth is Silverman's rule per set with a 1e-6 floor for degenerate
    all-equal samples. Returns (xs, pdf_pred, pdf_gt, w1).
    """
    a = np.asarray(pred_values, dtype=np.float64).ravel()
    b = np.asarray(gt_values, dtype=np.float64).ravel()
    if len(a) < 10 or len(b) < 10:
        raise ValueError(
            f"need at least 10 samples per set, got {len(a)} and {len(b)}")
    ha, hb = _silverman_bw(a), _silverman_bw(b)
    lo = min(a.min() - 3.0 * ha, b.min() - 3.0 * hb)
    hi = max(a.max() + 3.0 * ha, b.max() + 3.0 * hb)
    xs = np.linspace(lo, hi, n_grid)

    def kde(data, h):
        z = (xs[:, None] - data[None, :]) / h
        return np.exp(-0.5 * z * z).mean(axis=1) / (h * np.sqrt(2.0 * np.pi))

    return xs, kde(a, ha), kde(b, hb), _exact_w1(a, b)


def pod_energy(fields, subtract_mean: bool = False) -> np.ndarray:
    """Energy fraction per mode of a snapshot ensemble.

    Snapshots stack both velocity components into one state row; singular
    values squared are normalized to sum 1 (descending). An identically
    zero matrix (e.g. one snapshot repeated with `subtract_mean=True`) is
    degenerate and reports all-zero energies instead of a unit spectrum.
    """
    mats = [_as_field(f, f"snapshot {k}") for k, f in enumerate(fields)]
    if len(mats) < 2:
        raise ValueError(f"need at least 2 snapshots, got {len(mats)}")
    n = mats[0].shape[0]
    for k, m in enumerate(mats):
        if m.shape[0] != n:
            raise ValueError(
                f"snapshot {k} has {m.shape[0]} nodes, expected {n}")
    x = np.stack([np.concatenate([m[:, 0], m[:, 1]]) for m in mats])
    if subtract_mean:
        x = x - x.mean(axis=0)
    s = np.linalg.svd(x, compute_uv=False)
    total = float(np.sum(s * s))
    if total == 0.0:
        return np.zeros(len(s), dtype=np.float64)
    return s * s / total


# ------------------------------------------------------- derivatives


def vorticity(uv, mesh: Mesh):
    """Nodewise curl via a weighted least-squares gradient on the 1-ring.

    Weights are 1/d^2. Returns (omega, flagged); nodes with fewer than two
    non-collinear neighbors get omega 0 and a True flag.
    """
    uv = _as_field(uv)
    _check_on_mesh(uv, mesh)
    pts = mesh.points
    omega = np.zeros(mesh.n_nodes, dtype=np.float64)
    flagged = np.zeros(mesh.n_nodes, dtype=bool)
    for i, nbrs in enumerate(node_neighbors(mesh)):
        d = pts[nbrs] - pts[i]
        d_sq = np.sum(d * d, axis=1)
        keep = d_sq > 0.0
        d, d_sq, nbrs = d[keep], d_sq[keep], nbrs[keep]
        if len(nbrs) < 2:
            flagged[i] = True
            continue
        w = 1.0 / d_sq
        wd = d * w[:, None]
        gram = wd.T @ d
        det = gram[0, 0] * gram[1, 1] - gram[0, 1] * gram[1, 0]
        if det <= 1e-14 * (gram[0, 0] + gram[1, 1]) ** 2:
            flagged[i] = True
            continue
        du = uv[nbrs] - uv[i]
        grad = np.linalg.solve(gram, wd.T @ du)  # grad[a, c] = d u_c / d x_a
        omega[i] = grad[0, 1] - grad[1, 0]
    return omega, flagged


def flow_moments(uv) -> dict:
    """Population mean and std of each component and the speed."""
    uv = _as_field(uv)
    if uv.shape[0] == 0:
        raise ValueError("empty field")
    mag = np.hypot(uv[:, 0], uv[:, 1])
    out = {}
    for name, vals in (("ux", uv[:, 0]), ("uy", uv[:, 1]), ("mag", mag)):
        out[name] = (float(np.mean(vals)), float(np.std(vals)))
    return out


# ------------------------------------------------------------ report


def evaluate_pair(pred, gt, mesh: Mesh, raster_r: int = RASTER_R,
                  s2_bins: int = S2_BINS, s2_pairs: int = S2_PAIRS,
                  seed: int = 0) -> dict:
    """All per-angle scalar metrics for one (generated, truth) pair.

    The pair budget for the structure function is clamped to the pairs the
    mesh actually has.
    """
    pred, gt = _check_pair(pred, gt)
    _check_on_mesh(pred, mesh)
    row = pointwise_metrics(pred, gt)
    row["ssim"] = ssim_raster(pred, gt, mesh, raster_r)
    avail = mesh.n_nodes * (mesh.n_nodes - 1) // 2
    eps, s2 = structure_function_distance(
        pred, gt, mesh, n_bins=s2_bins, n_pairs=min(s2_pairs, avail),
        seed=seed)
    row["eps_s2"] = eps
    row["s2_dropped_bins"] = float(s2.dropped_bins)
    mag_p = np.hypot(pred[:, 0], pred[:, 1])
    mag_g = np.hypot(gt[:, 0], gt[:, 1])
    row["w1_ux"] = pdf_wasserstein(pred[:, 0], gt[:, 0])[3]
    row["w1_uy"] = pdf_wasserstein(pred[:, 1], gt[:, 1])[3]
    row["w1_mag"] = pdf_wasserstein(mag_p, mag_g)[3]
    for side, field in (("pred", pred), ("gt", gt)):
        for name, (mu, sd) in flow_moments(field).items():
            row[f"mu_{name}_{side}"] = mu
            row[f"sd_{name}_{side}"] = sd
    return row


def aggregate_rows(rows):
    """Mean and population-std dicts over the numeric keys of the rows.

    Values are sorted before reduction so aggregation does not depend on
    the angle order.
    """
    if not rows:
        raise ValueError("no rows to aggregate")
    mean_row, std_row = {}, {}
    for key in rows[0]:
        vals = [row[key] for row in rows]
        if not all(isinstance(v, (int, float)) for v in vals):
            continue
        arr = np.sort(np.asarray(vals, dtype=np.float64))
        mean_row[key] = float(np.mean(arr))
        std_row[key] = float(np.std(arr))
    return mean_row, std_row


def _format_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path, rows, meta=None, label_key: str = "angle_deg"):
    """One CSV row per angle plus mean/std aggregate rows.

    `meta` key/value pairs become '# key=value' header lines.
    """
    if not rows:
        raise ValueError("no rows to write")
    keys = list(rows[0].keys())
    mean_row, std_row = aggregate_rows(rows)
    with open(path, "w", encoding="ascii") as f:
        for k, v in (meta or {}).items():
            f.write(f"# {k}={v}\n")
        f.write(",".join(keys) + "\n")
        for row in rows:
            f.write(",".join(_format_cell(row[k]) for k in keys) + "\n")
        for label, agg in (("mean", mean_row), ("std", std_row)):
            cells = []
            for k in keys:
                if k == label_key:
                    cells.append(label)
                else:
                    cells.append(repr(agg[k]) if k in agg else "")
            f.write(",".join(cells) + "\n")


def write_metrics_text(path, rows, meta=None, label_key: str = "angle_deg"):
    """Human-readable fixed-width table with the same content as the CSV."""
    if not rows:
        raise ValueError("no rows to write")
    keys = list(rows[0].keys())
    mean_row, std_row = aggregate_rows(rows)

    def fmt(v):
        return f"{v:.6g}" if isinstance(v, float) else str(v)

    table = [[fmt(row[k]) for k in keys] for row in rows]
    for label, agg in (("mean", mean_row), ("std", std_row)):
        table.append([label if k == label_key else
                      (fmt(agg[k]) if k in agg else "") for k in keys])
    widths = [max(len(keys[c]), max(len(r[c]) for r in table))
              for c in range(len(keys))]
    with open(path, "w", encoding="ascii") as f:
        for k, v in (meta or {}).items():
            f.write(f"# {k}={v}\n")
        f.write("  ".join(k.ljust(w) for k, w in zip(keys, widths)).rstrip()
                + "\n")
        for r in table:
            f.write("  ".join(c.rjust(w) for c, w in zip(r, widths)) + "\n")


def write_pgm(path, grid: np.ndarray, mask: np.ndarray):
    """8-bit ASCII PGM of a raster; masked cells are black (0).

    Unmasked values map linearly onto 1..255; rows are written top-down in
    image convention (largest y first).
    """
    grid = np.asarray(grid, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("all-masked raster")
    vmin = float(grid[mask].min())
    vmax = float(grid[mask].max())
    span = vmax - vmin
    if span <= 0.0:
        span = 1.0
    pix = np.zeros(grid.shape, dtype=np.int64)
    pix[mask] = 1 + np.round(254.0 * (grid[mask] - vmin) / span).astype(np.int64)
    with open(path, "w", encoding="ascii") as f:
        f.write(f"P2\n{grid.shape[1]} {grid.shape[0]}\n255\n")
        for row in pix[::-1]:
            f.write(" ".join(str(int(p)) for p in row) + "\n")


def write_raster_csv(path, grid: np.ndarray, mask: np.ndarray):
    """Raster values as CSV, masked cells as nan, row 0 at the bottom."""
    grid = np.asarray(grid, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    with open(path, "w", encoding="ascii") as f:
        for row, ok in zip(grid, mask):
            f.write(",".join(repr(float(v)) if m else "nan"
                             for v, m in zip(row, ok)) + "\n")


def write_pod_csv(path, spectra: dict):
    """POD energy fractions as CSV, one column per named spectrum."""
    if not spectra:
        raise ValueError("no spectra to write")
    names = list(spectra.keys())
    cols = [np.asarray(spectra[n], dtype=np.float64).ravel() for n in names]
    depth = max(len(c) for c in cols)
    with open(path, "w", encoding="ascii") as f:
        f.write("mode," + ",".join(names) + "\n")
        for m in range(depth):
            cells = [repr(float(c[m])) if m < len(c) else "" for c in cols]
            f.write(f"{m}," + ",".join(cells) + "\n")
