"""Desk-scale experiment recipes built from the library pieces.

These functions are what the CLI subcommands and the acceptance tests call:
normal estimation over whole clouds, neighbourhood-size sweeps, the
learnable-vs-frozen temperature ablation and the ICP registration protocol.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from . import classical, metrics, model, registration
from .data_io import SyntheticShapeSpec, synth_shape
from .geometry import PointCloud, SpatialIndex, extract_patches, normalize_to_unit_sphere

logger = logging.getLogger(__name__)

ESTIMATORS = ("pca", "jet", "tmhsa", "gt")

# desk-scale network: narrower than the library defaults so training fits on one CPU
DESK_MODEL = dict(D=32, H=4, mlp_widths=(32, 32, 32), ffn_hidden=64, fc_widths=(32, 16, 3))


def estimate_normals(cloud: PointCloud, estimator: str, k: int, params=None, index=None, query_indices=None,
                     batch_size: int = 512) -> np.ndarray:
    """Unoriented normals for every point (or ``query_indices``) of ``cloud``."""
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}")
    if estimator == "gt":
        if cloud.normals is None:
            raise ValueError("cloud has no ground-truth normals")
        normals = cloud.normals
        return normals if query_indices is None else normals[query_indices]
    index = index if index is not None else SpatialIndex(cloud.points)
    _, centered, _ = extract_patches(cloud, index, k, query_indices)
    if estimator == "pca":
        return classical.pca_normals(centered)
    if estimator == "jet":
        return classical.jet_normals(centered)
    if params is None:
        raise ValueError("tmhsa estimator needs model parameters")
    return model.predict_normals(centered, params, batch_size=batch_size)


def evaluate(cloud: PointCloud, normals, indices=None) -> np.ndarray:
    """Per-point unoriented angle errors against the cloud's ground truth."""
    gt = cloud.normals if indices is None else cloud.normals[indices]
    return metrics.unoriented_angles(normals, gt)


def random_rotation(seed) -> np.ndarray:
    return Rotation.random(random_state=np.random.default_rng(seed)).as_matrix()


def rotate_cloud(cloud: PointCloud, rotation) -> PointCloud:
    normals = None if cloud.normals is None else cloud.normals @ rotation.T
    return PointCloud(cloud.points @ rotation.T, normals, dict(cloud.meta))


def mixed_shape_specs(count: int, n_points: int, seed: int, kinds=("sphere", "cube", "plane-with-crease", "blob")):
    """Deterministic list of randomized synthetic shape specs cycling through ``kinds``."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        shape_seed = int(rng.integers(2**31))
        if kind == "cube":
            params = {"half_extents": tuple(np.round(rng.uniform(0.4, 1.0, size=3), 6))}
        elif kind == "plane-with-crease":
            params = {"dihedral_deg": float(np.round(rng.uniform(60, 150), 6))}
        elif kind == "blob":
            params = {"bumps": int(rng.integers(12, 40)), "amplitude": float(np.round(rng.uniform(0.06, 0.15), 6)),
                      "width": float(np.round(rng.uniform(0.2, 0.35), 6))}
        elif kind == "ellipsoid":
            params = {"axes": tuple(np.round(np.sort(rng.uniform(0.4, 1.0, size=3))[::-1], 6))}
        else:
            params = {}
        specs.append(SyntheticShapeSpec(kind, n_points, shape_seed, params))
    return specs


def prepare_shape(spec: SyntheticShapeSpec, rotation_seed=None) -> PointCloud:
    """Synthesize, optionally rotate at random, and normalize into the unit sphere."""
    cloud = synth_shape(spec)
    if rotation_seed is not None:
        cloud = rotate_cloud(cloud, random_rotation(rotation_seed))
    cloud, _, _ = normalize_to_unit_sphere(cloud)
    return cloud


@dataclass
class ShapeSet:
    clouds: list
    indices: list

    def patches(self, k: int):
        """Stack ``(coords (M, k, 3), normals (M, 3))`` over all shapes' query points."""
        coords, normals = [], []
        for cloud, idx in zip(self.clouds, self.indices):
            _, centered, _ = extract_patches(cloud, SpatialIndex(cloud.points), k, idx)
            coords.append(centered)
            normals.append(cloud.normals[idx])
        return np.concatenate(coords), np.concatenate(normals)


def make_shape_set(count: int, n_points: int, per_shape: int, seed: int, kinds=None) -> ShapeSet:
    """Randomly rotated synthetic shapes with ``per_shape`` sampled query points each."""
    kinds = kinds or ("sphere", "cube", "plane-with-crease", "blob")
    specs = mixed_shape_specs(count, n_points, seed, kinds)
    rng = np.random.default_rng(seed + 1)
    clouds, indices = [], []
    for spec in specs:
        cloud = prepare_shape(spec, rotation_seed=int(rng.integers(2**31)))
        clouds.append(cloud)
        take = min(per_shape, len(cloud))
        indices.append(np.sort(rng.choice(len(cloud), size=take, replace=False)))
    return ShapeSet(clouds, indices)


def evaluate_shape_set(shapes: ShapeSet, estimator: str, k: int, params=None) -> np.ndarray:
    errors = []
    for cloud, idx in zip(shapes.clouds, shapes.indices):
        normals = estimate_normals(cloud, estimator, k, params=params, query_indices=idx)
        errors.append(evaluate(cloud, normals, idx))
    return np.concatenate(errors)


def train_on_shapes(shapes: ShapeSet, k: int, train_cfg: model.TrainConfig, model_cfg: model.ModelConfig | None = None,
                    callback=None):
    model_cfg = model_cfg or model.ModelConfig(k=k, seed=train_cfg.seed, **DESK_MODEL)
    coords, normals = shapes.patches(k)
    return model.train(model.PatchSet(coords, normals), train_cfg, model_cfg, callback=callback) + (model_cfg,)


def sweep_k(shapes: ShapeSet, ks, estimators=("pca",), params=None, model_k=None):
    """Rows of ``(k, estimator, rmse, pgp5, pgp10)``; a trained model only runs at its own k."""
    unique = []
    for k in ks:
        if k in unique:
            logger.warning("duplicate k=%d ignored", k)
            continue
        unique.append(k)
    rows = []
    for estimator in estimators:
        grid = [model_k] if estimator == "tmhsa" else unique
        for k in grid:
            if estimator == "jet" and k < classical.JET_MIN_POINTS:
                logger.warning("jet skipped at k=%d (needs k >= %d)", k, classical.JET_MIN_POINTS)
                continue
            s = metrics.summarize(evaluate_shape_set(shapes, estimator, k, params))
            rows.append((k, estimator, s["rmse"], s["pgp5"], s["pgp10"]))
    return rows


def temperature_ablation(train: ShapeSet, test: ShapeSet, k: int, seeds, train_cfg: model.TrainConfig,
                         model_kwargs=None):
    """Train learnable-t and frozen-t=1 models per seed on identical data.

    Returns a list of dicts with held-out RMSE of both models and the learned t.
    """
    model_kwargs = DESK_MODEL if model_kwargs is None else model_kwargs
    coords, normals = train.patches(k)
    data = model.PatchSet(coords, normals)
    results = []
    for seed in seeds:
        row = {"seed": seed}
        for learn in (True, False):
            cfg = model.TrainConfig(**{**train_cfg.__dict__, "seed": seed, "learn_temperature": learn})
            mcfg = model.ModelConfig(k=k, seed=seed, **model_kwargs)
            params, losses = model.train(data, cfg, mcfg)
            err = evaluate_shape_set(test, "tmhsa", k, params)
            tag = "learned" if learn else "frozen"
            row[f"{tag}_rmse"] = metrics.rmse(err)
            row[f"{tag}_t"] = params.temperature
            row[f"{tag}_final_loss"] = losses[-1]
        results.append(row)
    return results


def icp_instance(cloud: PointCloud, angles_deg=(10.0, 10.0, 10.0), translation=(0.01, 0.01, 0.01)):
    """Source/destination pair for the registration protocol.

    ``cloud`` should already be normalized to the unit sphere. Returns
    ``(src PointCloud, dst PointCloud with ground-truth normals, true transform)``.
    """
    transform = registration.make_perturbation(angles_deg, translation)
    dst = PointCloud(transform.apply(cloud.points), transform.apply_normals(cloud.normals))
    return cloud, dst, transform


def run_icp_protocol(cloud: PointCloud, estimator: str, k: int, params=None, cfg=None,
                     angles_deg=(10.0, 10.0, 10.0), translation=(0.01, 0.01, 0.01)):
    """Estimate destination normals with ``estimator`` and register source onto destination."""
    src, dst, _ = icp_instance(cloud, angles_deg, translation)
    index = SpatialIndex(dst.points)
    normals = estimate_normals(dst, estimator, k, params=params, index=index)
    return registration.icp(src.points, dst.points, normals, cfg, dst_index=index)


def icp_suite(n_points: int = 2000, seed: int = 0):
    """Named shape specs for the registration protocol.

    Shapes with a continuous rotational symmetry (spheres, tori, cylinders) are
    left out: rotation about the symmetry axis leaves them unchanged, so that
    part of the transform is unobservable.
    """
    return [
        ("blob_a", SyntheticShapeSpec("blob", n_points, seed, {"bumps": 16, "amplitude": 0.12, "width": 0.3})),
        ("blob_b", SyntheticShapeSpec("blob", n_points, seed + 1, {"bumps": 24, "amplitude": 0.1, "width": 0.25})),
        ("ellipsoid", SyntheticShapeSpec("ellipsoid", n_points, seed + 2, {"axes": (1.0, 0.7, 0.5)})),
        ("box", SyntheticShapeSpec("cube", n_points, seed + 3, {"half_extents": (1.0, 0.7, 0.5)})),
        ("blob_c", SyntheticShapeSpec("blob", n_points, seed + 4, {"bumps": 32, "amplitude": 0.08, "width": 0.3})),
        ("box_b", SyntheticShapeSpec("cube", n_points, seed + 5, {"half_extents": (0.9, 0.6, 0.8)})),
    ]
