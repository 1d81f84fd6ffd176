"""Command-line orchestration: datasets, training, sampling, evaluation.

Commands are driven by an INI config with sections [data] [graph] [model]
[diffusion] [train] [sample] [eval]; every key has a documented default in
`SCHEMA` and `data.seed` is mandatory (the env var MFD_SEED overrides it;
all other randomness derives from that one seed by fixed offsets). Each
command echoes the exact config bytes and their SHA-256 into its output
directory. Given the same config and seed, every output file is bit-for-bit
reproducible except the timing columns.
"""

import argparse
import configparser
import hashlib
import json
import math
import os
import shutil
import sys
import time
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import denoiser as dn
from . import diffusion as df
from . import mesh as msh
from . import metrics as mt
from . import synthcfd as sc

REQUIRED = object()

# Per-section keys as key: (type, default). REQUIRED has no default.
SCHEMA = {
    "data": {
        "seed": (int, REQUIRED),     # master seed for every command
        "out": (str, "dataset"),     # dataset directory
        "n_train": (int, 4),
        "n_test": (int, 2),
        "n_angles": (int, 36),       # evenly spaced wind angles per mesh
        "nodes_lo": (int, 800),      # node budget draw, inclusive bounds
        "nodes_hi": (int, 1100),
        "half_width": (float, 1.0),
        "u_inf": (float, 1.0),
        "disks_lo": (int, 1),        # obstacles per mesh, inclusive bounds
        "disks_hi": (int, 2),
    },
    "graph": {
        "reduction_ratio": (float, 4.0),   # original/reduced node ratio
    },
    "model": {
        "hidden": (int, 64),
        "fourier_bands": (int, 16),
        "harmonic_orders": (int, 4),
        "mode": (str, "multiscale"),       # multiscale | single_scale
        "layers_o2o": (int, 0),            # 0 keeps the mode default depth
        "layers_o2r": (int, 0),
        "layers_r2r": (int, 0),
        "layers_r2o": (int, 0),
    },
    "diffusion": {
        "sigma_data": (float, 0.0),  # 0 measures it from the train targets
        "rho": (float, 7.0),
        "s_churn": (float, 2.5),
        "s_min": (float, 0.75),
        "s_noise": (float, 1.05),
    },
    "train": {
        "preset": (str, "desk"),     # desk | paper (sets the steps default)
        "steps": (int, -1),          # -1 = preset default (20000 / 200000)
        "batch": (int, 2),
        "lr": (float, 1e-4),
        "lr_floor": (float, 1e-5),
        "trace_every": (int, 10),
        "checkpoint_every": (int, 0),  # 0 = only the final checkpoint
        "dtype": (str, "float64"),     # float64 | float32
        "out": (str, "run"),           # training output directory
    },
    "sample": {
        "n_steps": (int, 20),
        "angles": (str, "0:360:10"),   # start:stop:step or comma list, deg
        "sweep": (str, "5,10,20,40"),  # step counts for sweep-steps
    },
    "eval": {
        "raster_r": (int, 128),
        "s2_bins": (int, 24),
        "s2_pairs": (int, 200000),
        "workers": (int, 1),           # threads over (mesh, angle) items
    },
}

PRESET_STEPS = {"desk": 20000, "paper": 200000}
DTYPES = {"float64": np.float64, "float32": np.float32}

# fixed offsets from data.seed, one stream per purpose
_SEED_INIT = 101
_SEED_TRAIN = 202
_SEED_SAMPLE = 303
_SEED_EVAL = 404

CKPT_NAME = "checkpoint.npz"


@dataclass
class RunConfig:
    text: str
    sha256: str
    values: dict

    def get(self, section: str, key: str):
        return self.values[(section, key)]


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        text = f.read()
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    if cp.defaults():
        raise ValueError("DEFAULT section is not supported")
    for sect in cp.sections():
        if sect not in SCHEMA:
            raise ValueError(f"unknown config section [{sect}]")
        for key in cp[sect]:
            if key not in SCHEMA[sect]:
                raise ValueError(f"unknown config key {sect}.{key}")
    values = {}
    for sect, keys in SCHEMA.items():
        for key, (typ, default) in keys.items():
            if cp.has_option(sect, key):
                raw = cp.get(sect, key)
                try:
                    values[(sect, key)] = typ(raw)
                except ValueError:
                    raise ValueError(
                        f"bad value for {sect}.{key}: {raw!r}") from None
            elif default is REQUIRED:
                raise ValueError(f"config must set {sect}.{key}")
            else:
                values[(sect, key)] = default
    env = os.environ.get("MFD_SEED")
    if env is not None:
        try:
            values[("data", "seed")] = int(env)
        except ValueError:
            raise ValueError(f"MFD_SEED must be an integer, got {env!r}") \
                from None
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return RunConfig(text, digest, values)


def _atomic_text(path, text: str):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def echo_config(out_dir, rc: RunConfig):
    """The exact config bytes plus a hash/seed stamp, per output directory."""
    os.makedirs(out_dir, exist_ok=True)
    _atomic_text(os.path.join(out_dir, "config.ini"), rc.text)
    stamp = (f"sha256={rc.sha256}\n"
             f"seed={rc.get('data', 'seed')}\n")
    _atomic_text(os.path.join(out_dir, "config.sha256"), stamp)


def parse_angles(spec: str) -> list:
    """Angle list in degrees from 'start:stop:step' or 'a,b,c'."""
    spec = spec.strip()
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) not in (2, 3):
            raise ValueError(f"bad angle range {spec!r}")
        start, stop = float(parts[0]), float(parts[1])
        step = float(parts[2]) if len(parts) == 3 else 1.0
        if step <= 0.0 or stop <= start:
            raise ValueError(f"bad angle range {spec!r}")
        angles = list(np.arange(start, stop, step))
    else:
        angles = [float(p) for p in spec.split(",") if p.strip()]
    if not angles:
        raise ValueError(f"empty angle list {spec!r}")
    names = {_angle_tag(a) for a in angles}
    if len(names) != len(angles):
        raise ValueError("angle list collides after filename rounding")
    return angles


def _angle_tag(angle_deg: float) -> str:
    return f"a{int(round(angle_deg)):03d}"


def parse_steps_list(spec: str) -> list:
    try:
        steps = [int(p) for p in spec.split(",") if p.strip()]
    except ValueError:
        raise ValueError(f"bad step list {spec!r}") from None
    if not steps or any(s < 1 for s in steps):
        raise ValueError(f"bad step list {spec!r}")
    return steps


# ------------------------------------------------------------ checkpoints


def save_checkpoint(path, state: dict, meta: dict):
    arrays = {"__meta__": np.array(json.dumps(meta, sort_keys=True))}
    arrays.update(state)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path):
    try:
        z = np.load(path, allow_pickle=False)
    except (zipfile.BadZipFile, ValueError):
        raise ValueError(f"{path}: not a checkpoint file") from None
    with z:
        if "__meta__" not in z.files:
            raise ValueError(f"{path}: not a checkpoint (no metadata entry)")
        meta = json.loads(str(z["__meta__"][()]))
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    return arrays, meta


def _model_config(rc: RunConfig) -> dn.DenoiserConfig:
    layers = {}
    for name in dn.EXEC_ORDER:
        v = rc.get("model", f"layers_{name}")
        if v:
            layers[name] = v
    return dn.DenoiserConfig(
        hidden=rc.get("model", "hidden"),
        fourier_bands=rc.get("model", "fourier_bands"),
        harmonic_orders=rc.get("model", "harmonic_orders"),
        mode=rc.get("model", "mode"),
        layers=layers or None)


def _train_dtype(rc: RunConfig):
    name = rc.get("train", "dtype")
    if name not in DTYPES:
        raise ValueError(f"train.dtype must be one of {sorted(DTYPES)}, "
                         f"got {name!r}")
    return DTYPES[name]


def check_compat(meta: dict, rc: RunConfig):
    """The config must agree with the checkpoint on every model knob."""
    dconfig = _model_config(rc)
    pairs = [
        ("model.hidden", dconfig.hidden, meta["hidden"]),
        ("model.fourier_bands", dconfig.fourier_bands, meta["fourier_bands"]),
        ("model.harmonic_orders", dconfig.harmonic_orders,
         meta["harmonic_orders"]),
        ("model.mode", dconfig.mode, meta["mode"]),
        ("graph.reduction_ratio", rc.get("graph", "reduction_ratio"),
         meta["reduction_ratio"]),
        ("train.dtype", rc.get("train", "dtype"), meta["dtype"]),
    ]
    for name in dn.EXEC_ORDER:
        if dconfig.layers.get(name) != meta["layers"].get(name):
            pairs.append((f"model.layers_{name}", dconfig.layers.get(name),
                          meta["layers"].get(name)))
    explicit_sd = rc.get("diffusion", "sigma_data")
    if explicit_sd > 0.0:
        pairs.append(("diffusion.sigma_data", explicit_sd,
                      meta["sigma_data"]))
    for name, cfg_v, ckpt_v in pairs:
        if cfg_v != ckpt_v:
            raise ValueError(
                f"incompatible checkpoint: {name} is {ckpt_v!r} in the "
                f"checkpoint but {cfg_v!r} in the config")


def _diffusion_config(rc: RunConfig, sigma_data: float) -> df.DiffusionConfig:
    return df.DiffusionConfig.from_sigma_data(
        sigma_data,
        rho=rc.get("diffusion", "rho"),
        n_steps=rc.get("sample", "n_steps"),
        s_churn=rc.get("diffusion", "s_churn"),
        s_min=rc.get("diffusion", "s_min"),
        s_noise=rc.get("diffusion", "s_noise"))


# -------------------------------------------------------- dataset access


def _manifest_path(rc: RunConfig) -> str:
    return os.path.join(rc.get("data", "out"), "manifest.txt")


def _graph_path(mesh_path: str) -> str:
    root, ext = os.path.splitext(mesh_path)
    return f"{root}.graph"


def _load_or_build_graph(mesh_path: str, mesh, ratio: float):
    gpath = _graph_path(mesh_path)
    if os.path.exists(gpath):
        return msh.load_graph(gpath, mesh)
    graph = msh.build_multiscale_graph(mesh, ratio)
    sc._atomic_write(gpath, lambda p: msh.save_graph(p, graph))
    return graph


def _mesh_entries(manifest, split: str):
    """[(mesh_path, [(angle_deg, field_path), ...])] preserving file order."""
    by_mesh = {}
    order = []
    for e in manifest.entries:
        if e.split != split:
            continue
        mp = os.path.join(manifest.root, e.mesh_path)
        if mp not in by_mesh:
            by_mesh[mp] = []
            order.append(mp)
        by_mesh[mp].append((e.angle_deg,
                            os.path.join(manifest.root, e.field_path)))
    return [(mp, by_mesh[mp]) for mp in order]


# ------------------------------------------------------------- commands


def cmd_gen_data(rc: RunConfig, args) -> int:
    data = {key: rc.get("data", key) for key in SCHEMA["data"]}
    if data["half_width"] <= 0.0:
        raise ValueError("data.half_width must be positive")
    if data["u_inf"] <= 0.0:
        raise ValueError("data.u_inf must be positive")
    if data["n_train"] < 1 or data["n_test"] < 1:
        raise ValueError("data.n_train and data.n_test must be >= 1")
    if data["n_angles"] < 1:
        raise ValueError("data.n_angles must be >= 1")
    if not 50 <= data["nodes_lo"] <= data["nodes_hi"]:
        raise ValueError("need 50 <= data.nodes_lo <= data.nodes_hi")
    if not 1 <= data["disks_lo"] <= data["disks_hi"] <= max(sc.RADIUS_RANGES):
        raise ValueError(
            f"need 1 <= data.disks_lo <= data.disks_hi "
            f"<= {max(sc.RADIUS_RANGES)}")

    out = data.pop("out")
    stage = f"{out}.stage"
    if os.path.exists(stage):
        shutil.rmtree(stage)
    sc.generate_dataset(sc.GenConfig(out_dir=stage, **data))
    os.makedirs(out, exist_ok=True)
    for name in sorted(os.listdir(stage)):
        os.replace(os.path.join(stage, name), os.path.join(out, name))
    os.rmdir(stage)

    manifest = sc.load_manifest(os.path.join(out, "manifest.txt"))
    ratio = rc.get("graph", "reduction_ratio")
    n_graphs = 0
    for rel in manifest.mesh_paths():
        mesh_path = os.path.join(manifest.root, rel)
        mesh = msh.load_mesh(mesh_path)
        graph = msh.build_multiscale_graph(mesh, ratio)
        sc._atomic_write(_graph_path(mesh_path),
                         lambda p, g=graph: msh.save_graph(p, g))
        n_graphs += 1
    echo_config(out, rc)
    n_fields = len(manifest.entries)
    print(f"dataset: {n_graphs} meshes, {n_fields} fields, "
          f"{n_graphs} graphs -> {out}")
    return 0


def cmd_build_graphs(rc: RunConfig, args) -> int:
    manifest = sc.load_manifest(_manifest_path(rc))
    ratio = rc.get("graph", "reduction_ratio")
    for rel in manifest.mesh_paths():
        mesh_path = os.path.join(manifest.root, rel)
        mesh = msh.load_mesh(mesh_path)
        graph = msh.build_multiscale_graph(mesh, ratio)
        sc._atomic_write(_graph_path(mesh_path),
                         lambda p, g=graph: msh.save_graph(p, g))
    echo_config(rc.get("data", "out"), rc)
    print(f"graphs: {len(manifest.mesh_paths())} rebuilt at ratio {ratio}")
    return 0


def _train_steps(rc: RunConfig) -> int:
    preset = rc.get("train", "preset")
    if preset not in PRESET_STEPS:
        raise ValueError(f"train.preset must be one of "
                         f"{sorted(PRESET_STEPS)}, got {preset!r}")
    steps = rc.get("train", "steps")
    if steps < 0:
        return PRESET_STEPS[preset]
    return steps


def cmd_train(rc: RunConfig, args) -> int:
    manifest = sc.load_manifest(_manifest_path(rc))
    dconfig = _model_config(rc)
    dtype = _train_dtype(rc)
    ratio = rc.get("graph", "reduction_ratio")
    scale = np.array(manifest.scale, dtype=np.float64)

    items = []
    x0_all = []
    for mesh_path, fields in _mesh_entries(manifest, "train"):
        mesh = msh.load_mesh(mesh_path)
        graph = _load_or_build_graph(mesh_path, mesh, ratio)
        pack = dn.prepare(graph, dconfig)
        for angle_deg, field_path in fields:
            uv, _ = msh.load_field(field_path)
            x0 = (uv / scale).astype(dtype)
            inputs = dn.AngleInputs(pack, math.radians(angle_deg),
                                    dtype=dtype)
            items.append(df.TrainItem(pack, inputs, x0))
            x0_all.append(x0)
    if not items:
        raise ValueError("manifest has no train entries")

    sigma_data = rc.get("diffusion", "sigma_data")
    if sigma_data <= 0.0:
        stacked = np.concatenate([x.ravel() for x in x0_all])
        sigma_data = float(np.sqrt(np.mean(stacked * stacked)))
    dcfg = _diffusion_config(rc, sigma_data)

    seed = rc.get("data", "seed")
    store = dn.init_params(dconfig, seed=seed + _SEED_INIT, dtype=dtype)
    steps = _train_steps(rc)
    out = rc.get("train", "out")
    echo_config(out, rc)

    meta = {
        "config_sha256": rc.sha256,
        "sigma_data": sigma_data,
        "hidden": dconfig.hidden,
        "fourier_bands": dconfig.fourier_bands,
        "harmonic_orders": dconfig.harmonic_orders,
        "mode": dconfig.mode,
        "layers": dconfig.layers,
        "reduction_ratio": ratio,
        "dtype": rc.get("train", "dtype"),
        "scale": [float(scale[0]), float(scale[1])],
        "steps": steps,
        "lr": rc.get("train", "lr"),
        "batch": rc.get("train", "batch"),
    }

    def on_checkpoint(state, step, tag):
        name = {"final": CKPT_NAME, "abort": "checkpoint_abort.npz"}.get(
            tag, f"checkpoint_{step:06d}.npz")
        save_checkpoint(os.path.join(out, name), state,
                        dict(meta, steps=step))

    if steps == 0:
        save_checkpoint(os.path.join(out, CKPT_NAME), store.state_dict(),
                        dict(meta, steps=0))
        _atomic_text(os.path.join(out, "loss.csv"),
                     "step,loss,sigma_mean,lr\n")
        print(f"train: 0 steps, wrote initialization checkpoint -> {out}")
        return 0

    result = df.train(
        items, store, dconfig, dcfg, steps,
        base_lr=rc.get("train", "lr"), lr_floor=rc.get("train", "lr_floor"),
        batch_size=rc.get("train", "batch"), seed=seed + _SEED_TRAIN,
        trace_every=rc.get("train", "trace_every"),
        checkpoint_every=rc.get("train", "checkpoint_every"),
        on_checkpoint=on_checkpoint)
    tmp = os.path.join(out, "loss.csv.tmp")
    df.save_trace(tmp, result.trace)
    os.replace(tmp, os.path.join(out, "loss.csv"))
    first = result.trace[0][1]
    last = result.trace[-1][1]
    print(f"train: {len(items)} items, {steps} steps, "
          f"sigma_data={sigma_data:.6g}, loss {first:.4g} -> {last:.4g}, "
          f"checkpoint -> {os.path.join(out, CKPT_NAME)}")
    return 0


def _restore_model(rc: RunConfig, ckpt_path: str, full_check: bool = True):
    """Rebuild (store, dconfig, meta) from a checkpoint.

    `full_check=False` skips the model-section comparison for commands that
    legitimately mix architectures (ablate); graph and dtype compatibility
    are still enforced there.
    """
    arrays, meta = load_checkpoint(ckpt_path)
    if full_check:
        check_compat(meta, rc)
    else:
        ratio = rc.get("graph", "reduction_ratio")
        if ratio != meta["reduction_ratio"]:
            raise ValueError(
                f"incompatible checkpoint: graph.reduction_ratio is "
                f"{meta['reduction_ratio']!r} in the checkpoint but "
                f"{ratio!r} in the config")
    dconfig = dn.DenoiserConfig(
        hidden=meta["hidden"], fourier_bands=meta["fourier_bands"],
        harmonic_orders=meta["harmonic_orders"], mode=meta["mode"],
        layers=dict(meta["layers"]))
    store = dn.init_params(dconfig, seed=0, dtype=DTYPES[meta["dtype"]])
    store.load_state(arrays)
    return store, dconfig, meta


def _sample_mesh(rc, store, dconfig, meta, mesh_path, out_dir, angles,
                 n_steps, seed0):
    """One FIELD file per angle; returns [(angle, n_steps, seconds)]."""
    mesh = msh.load_mesh(mesh_path)
    graph = _load_or_build_graph(mesh_path, mesh, meta["reduction_ratio"])
    pack = dn.prepare(graph, dconfig)
    dcfg = _diffusion_config(rc, meta["sigma_data"])
    scale = np.array(meta["scale"], dtype=np.float64)
    dtype = DTYPES[meta["dtype"]]
    stem = os.path.splitext(os.path.basename(mesh_path))[0]
    timing = []
    for k, angle in enumerate(angles):
        inputs = dn.AngleInputs(pack, math.radians(angle), dtype=dtype)

        def fn(x, s):
            return dn.denoise_field(pack, inputs, store, dconfig,
                                    meta["sigma_data"], x, s)

        t0 = time.perf_counter()
        x = df.sample(fn, (mesh.n_nodes, 2), dcfg, seed=seed0 + k,
                      n_steps=n_steps)
        elapsed = time.perf_counter() - t0
        uv = np.asarray(x, dtype=np.float64) * scale
        name = f"{stem}_{_angle_tag(angle)}.field"
        sc._atomic_write(os.path.join(out_dir, name),
                         lambda p, u=uv, a=angle: msh.save_field(p, u, a))
        timing.append((float(angle), int(n_steps), elapsed))
    return timing


def _write_timing(path, rows):
    lines = ["angle_deg,n_steps,wall_s"]
    lines += [f"{a!r},{n},{s!r}" for a, n, s in rows]
    _atomic_text(path, "\n".join(lines) + "\n")


def cmd_sample(rc: RunConfig, args) -> int:
    store, dconfig, meta = _restore_model(rc, args.checkpoint)
    angles = parse_angles(rc.get("sample", "angles"))
    n_steps = rc.get("sample", "n_steps")
    os.makedirs(args.out, exist_ok=True)
    echo_config(args.out, rc)
    seed0 = rc.get("data", "seed") + _SEED_SAMPLE
    timing = _sample_mesh(rc, store, dconfig, meta, args.mesh, args.out,
                          angles, n_steps, seed0)
    _write_timing(os.path.join(args.out, "timing.csv"), timing)
    mean_s = float(np.mean([t[2] for t in timing]))
    print(f"sample: {len(angles)} angles x {n_steps} steps, "
          f"mean {mean_s:.3f} s/field -> {args.out}")
    return 0


def _discover_pairs(pred_dir: str, gt_dir: str):
    """Matched (name, mesh_path) lists plus the names missing in pred."""
    gt_fields = sorted(f for f in os.listdir(gt_dir) if f.endswith(".field"))
    if not gt_fields:
        raise ValueError(f"no .field files in {gt_dir}")
    pairs, gaps = [], []
    for name in gt_fields:
        stem = name.rsplit("_a", 1)[0]
        mesh_path = os.path.join(gt_dir, f"{stem}.mesh")
        if not os.path.exists(mesh_path):
            gaps.append(f"{name} (no mesh {stem}.mesh)")
            continue
        pred_path = os.path.join(pred_dir, name)
        if not os.path.exists(pred_path):
            gaps.append(name)
            continue
        pairs.append((name, stem, mesh_path))
    return pairs, gaps


def _read_timing(pred_dir: str) -> dict:
    path = os.path.join(pred_dir, "timing.csv")
    if not os.path.exists(path):
        return {}
    out = {}
    with open(path) as f:
        next(f)
        for line in f:
            cells = line.split(",")
            out[f"{float(cells[0]):.6g}"] = float(cells[2])
    return out


def _evaluate_pairs(rc: RunConfig, pred_dir: str, gt_dir: str,
                    full: bool = True):
    """Per-pair metric rows over matching field files.

    Returns (rows, gaps, fields) where fields[name] = (pred, gt, mesh,
    stem, angle) for reuse by the curve exports.
    """
    pairs, gaps = _discover_pairs(pred_dir, gt_dir)
    seed = rc.get("data", "seed") + _SEED_EVAL
    timing = _read_timing(pred_dir) if full else {}
    meshes = {}
    for _, stem, mesh_path in pairs:
        if stem not in meshes:
            meshes[stem] = msh.load_mesh(mesh_path)

    def one(idx_name):
        idx, (name, stem, _) = idx_name
        mesh = meshes[stem]
        gt, angle = msh.load_field(os.path.join(gt_dir, name))
        pred, _ = msh.load_field(os.path.join(pred_dir, name))
        if full:
            row = mt.evaluate_pair(
                pred, gt, mesh, raster_r=rc.get("eval", "raster_r"),
                s2_bins=rc.get("eval", "s2_bins"),
                s2_pairs=rc.get("eval", "s2_pairs"), seed=seed + idx)
        else:
            row = mt.pointwise_metrics(pred, gt)
            avail = mesh.n_nodes * (mesh.n_nodes - 1) // 2
            eps, _ = mt.structure_function_distance(
                pred, gt, mesh, n_bins=rc.get("eval", "s2_bins"),
                n_pairs=min(rc.get("eval", "s2_pairs"), avail),
                seed=seed + idx)
            row["eps_s2"] = eps
        out = {"mesh": stem, "angle_deg": float(angle)}
        out.update(row)
        key = f"{float(angle):.6g}"
        if timing and key in timing:
            out["sample_time_s"] = timing[key]
        return name, out, (pred, gt, mesh, stem, float(angle))

    workers = rc.get("eval", "workers")
    work = list(enumerate(pairs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, work))
    else:
        results = [one(w) for w in work]
    rows = [r for _, r, _ in results]
    have_timing = [("sample_time_s" in r) for r in rows]
    if any(have_timing) and not all(have_timing):
        for r in rows:
            r.pop("sample_time_s", None)
    fields = {name: data for name, _, data in results}
    return rows, gaps, fields


def _export_curves(out_dir: str, fields, rc: RunConfig):
    """Representative curve exports: the first angle of each mesh gets
    rasters, S2, and PDF curves; POD spectra cover all angles per mesh."""
    by_stem = {}
    for name, (pred, gt, mesh, stem, angle) in sorted(fields.items()):
        by_stem.setdefault(stem, []).append((angle, name, pred, gt, mesh))
    for stem, group in by_stem.items():
        group.sort(key=lambda g: g[0])
        angle, name, pred, gt, mesh = group[0]
        r = rc.get("eval", "raster_r")
        for side, field in (("pred", pred), ("gt", gt)):
            grid, mask = mt.raster_field(
                mesh, np.hypot(field[:, 0], field[:, 1]), r)
            mt.write_pgm(os.path.join(out_dir, f"speed_{stem}_{side}.pgm"),
                         grid, mask)
            mt.write_raster_csv(
                os.path.join(out_dir, f"speed_{stem}_{side}.csv"),
                grid, mask)
        avail = mesh.n_nodes * (mesh.n_nodes - 1) // 2
        _, s2 = mt.structure_function_distance(
            pred, gt, mesh, n_bins=rc.get("eval", "s2_bins"),
            n_pairs=min(rc.get("eval", "s2_pairs"), avail),
            seed=rc.get("data", "seed") + _SEED_EVAL)
        lines = ["r,s2_pred,s2_gt,pairs"]
        lines += [f"{float(rr)!r},{float(pp)!r},{float(gg)!r},{int(cc)}"
                  for rr, pp, gg, cc in zip(s2.r, s2.pred, s2.gt, s2.counts)]
        _atomic_text(os.path.join(out_dir, f"s2_{stem}.csv"),
                     "\n".join(lines) + "\n")
        for comp, col in (("ux", 0), ("uy", 1)):
            xs, pa, pb, _ = mt.pdf_wasserstein(pred[:, col], gt[:, col])
            lines = ["x,pdf_pred,pdf_gt"]
            lines += [f"{float(x)!r},{float(p)!r},{float(g)!r}"
                      for x, p, g in zip(xs, pa, pb)]
            _atomic_text(os.path.join(out_dir, f"pdf_{stem}_{comp}.csv"),
                         "\n".join(lines) + "\n")
        if len(group) >= 2:
            pod_pred = mt.pod_energy([g[2] for g in group])
            pod_gt = mt.pod_energy([g[3] for g in group])
            mt.write_pod_csv(os.path.join(out_dir, f"pod_{stem}.csv"),
                             {"pred": pod_pred, "gt": pod_gt})


def cmd_evaluate(rc: RunConfig, args) -> int:
    rows, gaps, fields = _evaluate_pairs(rc, args.pred, args.gt)
    if not rows:
        raise ValueError("no matching (mesh, angle) pairs to evaluate")
    os.makedirs(args.out, exist_ok=True)
    echo_config(args.out, rc)
    meta = mt.default_meta(
        raster_r=rc.get("eval", "raster_r"),
        s2_bins=rc.get("eval", "s2_bins"),
        s2_pairs=rc.get("eval", "s2_pairs"),
        config_sha256=rc.sha256)
    if gaps:
        meta["missing_pairs"] = ";".join(gaps)
    mt.write_metrics_csv(os.path.join(args.out, "metrics.csv"), rows,
                         meta=meta)
    mt.write_metrics_text(os.path.join(args.out, "metrics.txt"), rows,
                          meta=meta)
    _export_curves(args.out, fields, rc)
    for g in gaps:
        print(f"missing pair: {g}")
    mean_row, _ = mt.aggregate_rows(rows)
    print(f"evaluate: {len(rows)} pairs, {len(gaps)} missing, "
          f"rel_l2_u={mean_row['rel_l2_u']:.4g}, "
          f"cosine={mean_row['cosine']:.4g} -> {args.out}")
    return 0


def _sample_split(rc, ckpt_path, out_dir, angles, n_steps,
                  full_check: bool = True):
    """Sample every test mesh of the dataset into out_dir."""
    store, dconfig, meta = _restore_model(rc, ckpt_path, full_check)
    manifest = sc.load_manifest(_manifest_path(rc))
    entries = _mesh_entries(manifest, "test")
    if not entries:
        raise ValueError("manifest has no test entries")
    os.makedirs(out_dir, exist_ok=True)
    timing = []
    base = rc.get("data", "seed") + _SEED_SAMPLE
    for m_idx, (mesh_path, _) in enumerate(entries):
        timing += _sample_mesh(rc, store, dconfig, meta, mesh_path, out_dir,
                               angles, n_steps, base + 1000 * m_idx)
    _write_timing(os.path.join(out_dir, "timing.csv"), timing)
    return meta, timing


def _format_pm(mean: float, std: float) -> str:
    return f"{mean:.6g}+-{std:.6g}"


def cmd_ablate(rc: RunConfig, args) -> int:
    angles = parse_angles(rc.get("sample", "angles"))
    n_steps = rc.get("sample", "n_steps")
    gt_dir = rc.get("data", "out")
    os.makedirs(args.out, exist_ok=True)
    echo_config(args.out, rc)

    columns = []
    labels = []
    for ckpt in (args.checkpoint_a, args.checkpoint_b):
        _, meta = load_checkpoint(ckpt)
        label = meta["mode"]
        if label in labels:
            label = f"{label}_b"
        labels.append(label)
        pred_dir = os.path.join(args.out, f"sample_{label}")
        _sample_split(rc, ckpt, pred_dir, angles, n_steps, full_check=False)
        rows, _, _ = _evaluate_pairs(rc, pred_dir, gt_dir)
        mean_row, std_row = mt.aggregate_rows(rows)
        columns.append((mean_row, std_row))

    keys = [k for k in columns[0][0] if k != "angle_deg"]
    lines = [f"metric,{labels[0]},{labels[1]}"]
    for k in keys:
        cells = [_format_pm(col[0][k], col[1][k]) for col in columns]
        lines.append(f"{k},{cells[0]},{cells[1]}")
    table = "\n".join(lines) + "\n"
    _atomic_text(os.path.join(args.out, "ablate.csv"), table)
    width = max(len(k) for k in keys) + 2
    text = [f"{'metric'.ljust(width)}{labels[0]:>24}{labels[1]:>24}"]
    for line in lines[1:]:
        k, a, b = line.split(",")
        text.append(f"{k.ljust(width)}{a:>24}{b:>24}")
    _atomic_text(os.path.join(args.out, "ablate.txt"),
                 "\n".join(text) + "\n")
    print(f"ablate: {labels[0]} vs {labels[1]}, "
          f"{len(keys)} metrics -> {args.out}")
    return 0


def cmd_sweep_steps(rc: RunConfig, args) -> int:
    angles = parse_angles(rc.get("sample", "angles"))
    steps_list = parse_steps_list(rc.get("sample", "sweep"))
    gt_dir = rc.get("data", "out")
    os.makedirs(args.out, exist_ok=True)
    echo_config(args.out, rc)

    metric_lines = ["n_steps,rel_l2_u,rel_l2_mag,cosine,eps_s2"]
    time_lines = ["n_steps,mean_wall_s,total_wall_s"]
    for n in steps_list:
        pred_dir = os.path.join(args.out, f"sample_n{n:03d}")
        _, timing = _sample_split(rc, args.checkpoint, pred_dir, angles, n)
        rows, _, _ = _evaluate_pairs(rc, pred_dir, gt_dir, full=False)
        mean_row, _ = mt.aggregate_rows(rows)
        metric_lines.append(
            f"{n},{mean_row['rel_l2_u']!r},{mean_row['rel_l2_mag']!r},"
            f"{mean_row['cosine']!r},{mean_row['eps_s2']!r}")
        walls = [t[2] for t in timing]
        time_lines.append(
            f"{n},{float(np.mean(walls))!r},{float(np.sum(walls))!r}")
        print(f"sweep: n_steps={n} rel_l2_u={mean_row['rel_l2_u']:.4g}")
    _atomic_text(os.path.join(args.out, "sweep_metrics.csv"),
                 "\n".join(metric_lines) + "\n")
    _atomic_text(os.path.join(args.out, "sweep_time.csv"),
                 "\n".join(time_lines) + "\n")
    print(f"sweep: {len(steps_list)} step counts -> {args.out}")
    return 0


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="meshflow",
        description="Geometry-conditioned flow-field generator toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True,
                        help="INI config file path")
        sp.set_defaults(fn=fn)
        return sp

    add("gen-data", cmd_gen_data,
        "generate meshes, flow fields, manifest, and graphs")
    add("build-graphs", cmd_build_graphs,
        "rebuild multiscale graphs for an existing dataset")
    add("train", cmd_train, "train the denoiser on the dataset")

    sp = add("sample", cmd_sample, "sample fields on one mesh")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate,
             "metric report over matching field files")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)

    sp = add("ablate", cmd_ablate,
             "two-model comparison table on the test split")
    sp.add_argument("--checkpoint-a", required=True)
    sp.add_argument("--checkpoint-b", required=True)
    sp.add_argument("--out", required=True)

    sp = add("sweep-steps", cmd_sweep_steps,
             "metric and timing tables over sampler step counts")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = load_config(args.config)
        return args.fn(rc, args)
    except (ValueError, OSError, RuntimeError, FloatingPointError,
            configparser.Error) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
