"""Command-line entry point: ``attnormals <subcommand> [flags]``.

Every subcommand writes its outputs plus ``effective_config.json`` into
``--out-dir``. Settings resolve as flags > ``--config`` JSON file > defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import data_io, experiments, metrics, model, registration
from .geometry import PointCloud, SpatialIndex, extract_patches, normalize_to_unit_sphere

logger = logging.getLogger("attnormals")

COMMON_DEFAULTS = {"seed": 0, "k": None, "estimator": "pca", "checkpoint": None, "out_dir": "."}

DEFAULTS = {
    "synth": {"kind": "sphere", "n_points": 2000, "param": [], "name": None, "normalize": False},
    "estimate": {"input": None, "normals": None, "alphas": [5.0, 10.0]},
    "train": {"manifest": None, "split_file": None, "n_shapes": 40, "n_points": 2000, "patches_per_shape": 500,
              "kinds": ["sphere", "cube", "plane-with-crease", "blob"], "epochs": 60, "batch_size": 64,
              "lr": 1e-3, "decay_epochs": None, "frozen_temperature": False, "model": "desk"},
    "eval": {"manifest": None, "split_file": None, "input": [], "use_pidx": False, "alphas": [5.0, 10.0],
             "n_shapes": 12, "n_points": 2000, "patches_per_shape": 300,
             "kinds": ["sphere", "cube", "plane-with-crease", "blob"]},
    "sweep-k": {"ks": [5, 8, 12, 16, 20, 30, 40, 50], "estimators": None, "n_shapes": 12, "n_points": 2000,
                "patches_per_shape": 300, "kinds": ["plane-with-crease"], "manifest": None, "split_file": None},
    "icp": {"input": [], "estimators": None, "n_points": 2000, "angles": [10.0, 10.0, 10.0],
            "translation": [0.01, 0.01, 0.01], "max_iterations": 200, "stop_threshold": 1e-5},
    "attn-dump": {"input": None, "indices": None, "n_patches": 32},
}


class CliError(Exception):
    """User-facing failure: printed to stderr, exit code 1."""


def positive_int(text) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return value


def positive_float(text) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def float_list(text) -> list:
    return [float(v) for v in text.split(",") if v.strip()]


def int_list(text) -> list:
    values = [positive_int(v) for v in text.split(",") if v.strip()]
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def index_list(text) -> list:
    values = [int(v) for v in text.split(",") if v.strip()]
    if not values or min(values) < 0:
        raise argparse.ArgumentTypeError(f"expected non-negative indices, got {text}")
    return values


def str_list(text) -> list:
    return [v.strip() for v in text.split(",") if v.strip()]


def triple(text) -> list:
    values = float_list(text)
    if len(values) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text}")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--k", type=positive_int, help="neighbourhood size")
    common.add_argument("--estimator", choices=experiments.ESTIMATORS)
    common.add_argument("--checkpoint", help="model checkpoint (read by tmhsa, written by train)")
    common.add_argument("--out-dir")
    common.add_argument("--config", help="JSON file of defaults; explicit flags win")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="attnormals", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic shape with analytic normals")
    p.add_argument("--kind", choices=data_io.SHAPE_KINDS)
    p.add_argument("--n-points", type=positive_int)
    p.add_argument("--param", action="append", metavar="KEY=VALUE", help="shape parameter, repeatable")
    p.add_argument("--name")
    p.add_argument("--normalize", action="store_true", default=None, help="fit into the unit sphere")

    p = sub.add_parser("estimate", parents=[common], help="estimate normals of one cloud")
    p.add_argument("--input", help=".xyz point file")
    p.add_argument("--normals", help="ground-truth .normals (default: sibling of --input if present)")
    p.add_argument("--alphas", type=float_list)

    p = sub.add_parser("train", parents=[common], help="train the attention model")
    p.add_argument("--manifest", help="dataset root directory")
    p.add_argument("--split-file", help="shape list inside the dataset root")
    p.add_argument("--n-shapes", type=positive_int)
    p.add_argument("--n-points", type=positive_int)
    p.add_argument("--patches-per-shape", type=positive_int)
    p.add_argument("--kinds", type=str_list)
    p.add_argument("--epochs", type=positive_int)
    p.add_argument("--batch-size", type=positive_int)
    p.add_argument("--lr", type=positive_float)
    p.add_argument("--decay-epochs", type=int_list)
    p.add_argument("--frozen-temperature", action="store_true", default=None)
    p.add_argument("--model", choices=("desk", "full"), help="network width preset")

    p = sub.add_parser("eval", parents=[common], help="angle errors over a dataset")
    p.add_argument("--manifest")
    p.add_argument("--split-file")
    p.add_argument("--input", action="append", help=".xyz file with sibling .normals, repeatable")
    p.add_argument("--use-pidx", action="store_true", default=None)
    p.add_argument("--alphas", type=float_list)
    p.add_argument("--n-shapes", type=positive_int)
    p.add_argument("--n-points", type=positive_int)
    p.add_argument("--patches-per-shape", type=positive_int)
    p.add_argument("--kinds", type=str_list)

    p = sub.add_parser("sweep-k", parents=[common], help="accuracy against neighbourhood size")
    p.add_argument("--ks", type=int_list)
    p.add_argument("--estimators", type=str_list)
    p.add_argument("--manifest")
    p.add_argument("--split-file")
    p.add_argument("--n-shapes", type=positive_int)
    p.add_argument("--n-points", type=positive_int)
    p.add_argument("--patches-per-shape", type=positive_int)
    p.add_argument("--kinds", type=str_list)

    p = sub.add_parser("icp", parents=[common], help="register perturbed shapes with point-to-plane ICP")
    p.add_argument("--input", action="append", help=".xyz file with sibling .normals, repeatable")
    p.add_argument("--estimators", type=str_list)
    p.add_argument("--n-points", type=positive_int)
    p.add_argument("--angles", type=triple, help="rotation about x,y,z in degrees")
    p.add_argument("--translation", type=triple)
    p.add_argument("--max-iterations", type=positive_int)
    p.add_argument("--stop-threshold", type=positive_float)

    p = sub.add_parser("attn-dump", parents=[common], help="export attention maps")
    p.add_argument("--input")
    p.add_argument("--indices", type=index_list)
    p.add_argument("--n-patches", type=positive_int)
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, the optional JSON config and explicitly given flags."""
    cfg = dict(COMMON_DEFAULTS)
    cfg.update(DEFAULTS[args.command])
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise CliError(f"config {args.config} must hold a JSON object")
        for key, value in loaded.items():
            key = key.replace("-", "_")
            if key not in cfg:
                raise CliError(f"unknown config key {key!r} for {args.command}")
            cfg[key] = value
    for key, value in vars(args).items():
        if key in cfg and value is not None:
            cfg[key] = value
    cfg["command"] = args.command
    if cfg["k"] is not None and int(cfg["k"]) < 1:
        raise CliError("k must be >= 1")
    return cfg


def _echo_config(cfg: dict):
    os.makedirs(cfg["out_dir"], exist_ok=True)
    with open(os.path.join(cfg["out_dir"], "effective_config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require_file(path, what):
    if not path:
        raise CliError(f"missing {what}")
    if not os.path.isfile(path):
        raise CliError(f"{what} not found: {path}")


def _load_params(cfg, need: bool):
    """Checkpoint parameters when the estimator needs them; resolves the effective k."""
    if not need:
        return None, cfg["k"]
    _require_file(cfg["checkpoint"], "checkpoint")
    mcfg, params, _ = model.load_checkpoint(cfg["checkpoint"])
    if cfg["k"] is not None and cfg["k"] != mcfg.k:
        raise CliError(f"checkpoint was trained at k={mcfg.k}, got --k {cfg['k']}")
    return params, mcfg.k


def _load_cloud(path, normals_path=None, use_pidx=False) -> PointCloud:
    _require_file(path, "input")
    if normals_path is None:
        sibling = os.path.splitext(path)[0] + ".normals"
        normals_path = sibling if os.path.exists(sibling) else None
    elif not os.path.isfile(normals_path):
        raise CliError(f"normals not found: {normals_path}")
    return data_io.load_shape(path, normals_path, use_pidx=use_pidx)


def _dataset(cfg) -> list:
    """``[(name, cloud, query_indices)]`` from a manifest, explicit inputs, or the synthetic suite."""
    if cfg.get("manifest"):
        if not cfg.get("split_file"):
            raise CliError("--manifest needs --split-file")
        manifest = data_io.load_manifest(cfg["manifest"], cfg["split_file"])
        out = []
        for name in manifest.shapes:
            cloud = manifest.load(name, use_pidx=bool(cfg.get("use_pidx")))
            out.append((name, cloud, cloud.meta.get("eval_indices")))
        return out
    if cfg.get("input"):
        return [(os.path.splitext(os.path.basename(p))[0], _load_cloud(p, use_pidx=bool(cfg.get("use_pidx"))), None)
                for p in cfg["input"]]
    shapes = experiments.make_shape_set(cfg["n_shapes"], cfg["n_points"], cfg["patches_per_shape"], cfg["seed"],
                                        tuple(cfg["kinds"]))
    return [(f"{c.meta['kind']}_{i:03d}", c, idx) for i, (c, idx) in enumerate(zip(shapes.clouds, shapes.indices))]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(cfg):
    params = {}
    for item in cfg["param"] or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"--param expects KEY=VALUE, got {item!r}")
        values = float_list(value)
        params[key.replace("-", "_")] = values[0] if len(values) == 1 else tuple(values)
    spec = data_io.SyntheticShapeSpec(cfg["kind"], cfg["n_points"], cfg["seed"], params)
    cloud = data_io.synth_shape(spec)
    if cfg["normalize"]:
        cloud, _, _ = normalize_to_unit_sphere(cloud)
    name = cfg["name"] or f"{cfg['kind']}_{cfg['n_points']}_s{cfg['seed']}"
    base = os.path.join(cfg["out_dir"], name)
    data_io.write_xyz(base + ".xyz", cloud)
    data_io.write_normals(base + ".normals", cloud.normals)
    print(f"wrote {base}.xyz ({len(cloud)} points)")


def cmd_estimate(cfg):
    _require_file(cfg["input"], "input")
    params, k = _load_params(cfg, cfg["estimator"] == "tmhsa")
    cloud = _load_cloud(cfg["input"], cfg["normals"])
    if k is None and cfg["estimator"] != "gt":
        raise CliError("--k is required")
    normals = experiments.estimate_normals(cloud, cfg["estimator"], k, params=params)
    name = os.path.splitext(os.path.basename(cfg["input"]))[0]
    out = os.path.join(cfg["out_dir"], f"{name}.normals")
    if os.path.abspath(out) == os.path.abspath(os.path.splitext(cfg["input"])[0] + ".normals"):
        raise CliError(f"refusing to overwrite ground truth {out}; choose another --out-dir")
    data_io.write_normals(out, normals)
    if cloud.normals is not None:
        errors = metrics.unoriented_angles(normals, cloud.normals)
        s = metrics.summarize(errors, cfg["alphas"])
        print(f"{name} {cfg['estimator']} k={k} " + " ".join(f"{key}={v:.4f}" for key, v in s.items()))
    print(f"wrote {out}")


def cmd_train(cfg):
    if cfg["manifest"]:
        data = _dataset(cfg)
        rng = np.random.default_rng(cfg["seed"])
        indices = [np.sort(rng.choice(len(c), size=min(cfg["patches_per_shape"], len(c)), replace=False))
                   for _, c, _ in data]
        shapes = experiments.ShapeSet([normalize_to_unit_sphere(c)[0] for _, c, _ in data], indices)
    else:
        shapes = experiments.make_shape_set(cfg["n_shapes"], cfg["n_points"], cfg["patches_per_shape"], cfg["seed"],
                                            tuple(cfg["kinds"]))
    k = cfg["k"] or 50
    epochs = cfg["epochs"]
    decay = cfg["decay_epochs"] or [int(epochs * 0.45), int(epochs * 0.9)]
    tcfg = model.TrainConfig(epochs=epochs, batch_size=cfg["batch_size"], lr=cfg["lr"], decay_epochs=tuple(decay),
                             seed=cfg["seed"], learn_temperature=not cfg["frozen_temperature"])
    widths = experiments.DESK_MODEL if cfg["model"] == "desk" else {}
    mcfg = model.ModelConfig(k=k, seed=cfg["seed"], **widths)

    def report(epoch, loss, params):
        logger.info("epoch %d loss %.6f t %.4f", epoch, loss, params.temperature)

    coords, normals = shapes.patches(k)
    params, losses = model.train(model.PatchSet(coords, normals), tcfg, mcfg, callback=report)
    ckpt = cfg["checkpoint"] or os.path.join(cfg["out_dir"], "model.ckpt")
    model.save_checkpoint(ckpt, mcfg, params, {"losses": losses})
    with open(os.path.join(cfg["out_dir"], "losses.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "lr"])
        for e, loss in enumerate(losses):
            writer.writerow([e, repr(loss), repr(tcfg.lr_at(e))])
    print(f"trained {len(coords)} patches for {epochs} epochs: loss {losses[0]:.6f} -> {losses[-1]:.6f}, "
          f"t={params.temperature:.4f}; wrote {ckpt}")


def cmd_eval(cfg):
    params, k = _load_params(cfg, cfg["estimator"] == "tmhsa")
    if k is None and cfg["estimator"] != "gt":
        raise CliError("--k is required")
    rows, all_errors = [], []
    for name, cloud, idx in _dataset(cfg):
        if cloud.normals is None:
            raise CliError(f"{name}: no ground-truth normals")
        normals = experiments.estimate_normals(cloud, cfg["estimator"], k, params=params, query_indices=idx)
        errors = experiments.evaluate(cloud, normals, idx)
        metrics.write_errors_csv(os.path.join(cfg["out_dir"], f"{name}_errors.csv"), errors,
                                 np.arange(len(cloud)) if idx is None else idx)
        all_errors.append(errors)
        rows.append((name, metrics.summarize(errors, cfg["alphas"])))
    rows.append(("ALL", metrics.summarize(np.concatenate(all_errors), cfg["alphas"])))
    keys = list(rows[0][1])
    with open(os.path.join(cfg["out_dir"], "summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["shape", *keys])
        for name, s in rows:
            writer.writerow([name, *(repr(s[key]) for key in keys)])
    for name, s in rows:
        print(f"{name} " + " ".join(f"{key}={s[key]:.4f}" for key in keys))


def cmd_sweep_k(cfg):
    estimators = cfg["estimators"] or [cfg["estimator"]]
    for est in estimators:
        if est not in experiments.ESTIMATORS:
            raise CliError(f"unknown estimator {est!r}")
    params, model_k = _load_params({**cfg, "k": None}, "tmhsa" in estimators)
    data = _dataset(cfg)
    shapes = experiments.ShapeSet([c for _, c, _ in data],
                                  [np.arange(len(c)) if idx is None else idx for _, c, idx in data])
    rows = experiments.sweep_k(shapes, cfg["ks"], estimators, params=params, model_k=model_k)
    with open(os.path.join(cfg["out_dir"], "sweep_k.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "estimator", "rmse", "pgp5", "pgp10"])
        for row in rows:
            writer.writerow([row[0], row[1], *(repr(v) for v in row[2:])])
    for k, est, r, p5, p10 in rows:
        print(f"k={k} {est} RMSE={r:.4f} PGP5={p5:.4f} PGP10={p10:.4f}")


def cmd_icp(cfg):
    estimators = cfg["estimators"] or [cfg["estimator"]]
    for est in estimators:
        if est not in experiments.ESTIMATORS:
            raise CliError(f"unknown estimator {est!r}")
    params, model_k = _load_params(cfg, "tmhsa" in estimators)
    k = model_k or 50
    if cfg["input"]:
        shapes = [(os.path.splitext(os.path.basename(p))[0], normalize_to_unit_sphere(_load_cloud(p))[0])
                  for p in cfg["input"]]
    else:
        shapes = [(name, experiments.prepare_shape(spec))
                  for name, spec in experiments.icp_suite(cfg["n_points"], cfg["seed"])]
    icfg = registration.IcpConfig(stop_threshold=cfg["stop_threshold"], max_iterations=cfg["max_iterations"])
    summary = []
    for name, cloud in shapes:
        if cloud.normals is None:
            raise CliError(f"{name}: ground-truth normals are needed to build the destination")
        for est in estimators:
            result = experiments.run_icp_protocol(cloud, est, k, params=params, cfg=icfg,
                                                  angles_deg=cfg["angles"], translation=cfg["translation"])
            registration.write_trace_csv(os.path.join(cfg["out_dir"], f"trace_{name}_{est}.csv"), result)
            summary.append((name, est, result.label))
            print(f"{name} {est} {result.label}")
    with open(os.path.join(cfg["out_dir"], "icp_summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["shape", "normal_source", "iterations"])
        writer.writerows(summary)


def cmd_attn_dump(cfg):
    _require_file(cfg["input"], "input")
    params, k = _load_params(cfg, True)
    cloud = _load_cloud(cfg["input"])
    if cfg["indices"] is not None:
        idx = np.asarray(cfg["indices"], dtype=np.intp)
        if idx.min() < 0 or idx.max() >= len(cloud):
            raise CliError("patch index out of range")
    else:
        rng = np.random.default_rng(cfg["seed"])
        idx = np.sort(rng.choice(len(cloud), size=min(cfg["n_patches"], len(cloud)), replace=False))
    nbrs, centered, _ = extract_patches(cloud, SpatialIndex(cloud.points), k, idx)
    received = model.predict_attention(centered, params)
    csv_path = data_io.write_attention_map(received, os.path.join(cfg["out_dir"], "attention.pgm"))
    with open(os.path.join(cfg["out_dir"], "attention_points.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patch", "center_index", "rank", "point_index", "x", "y", "z", "weight"])
        for p, (center, row, weights) in enumerate(zip(idx, nbrs, received)):
            for rank, (j, w) in enumerate(zip(row, weights)):
                x, y, z = cloud.points[j]
                writer.writerow([p, int(center), rank, int(j), repr(x), repr(y), repr(z), repr(float(w))])
    print(f"wrote {len(idx)} attention rows to {csv_path}")


COMMANDS = {"synth": cmd_synth, "estimate": cmd_estimate, "train": cmd_train, "eval": cmd_eval,
            "sweep-k": cmd_sweep_k, "icp": cmd_icp, "attn-dump": cmd_attn_dump}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        _echo_config(cfg)
        COMMANDS[args.command](cfg)
    except (CliError, ValueError, FileNotFoundError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
