"""Unoriented angle errors and their RMSE / PGP summaries (all in degrees)."""

from __future__ import annotations

import csv

import numpy as np


def unoriented_angles(pred, gt) -> np.ndarray:
    """Row-wise ``arccos(|cos(pred, gt)|)`` in degrees, always within [0, 90].

    Evaluated as ``atan2(|pred x gt|, |pred . gt|)``, which equals the arccos
    form but stays accurate for nearly parallel or perpendicular vectors.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    pn = np.linalg.norm(pred, axis=-1)
    gn = np.linalg.norm(gt, axis=-1)
    if np.any(pn == 0) or np.any(gn == 0):
        raise ValueError("zero vector has no direction")
    sin = np.linalg.norm(np.cross(pred, gt), axis=-1)
    cos = np.abs(np.sum(pred * gt, axis=-1))
    return np.degrees(np.arctan2(sin, cos))


def unoriented_angle(pred, gt) -> float:
    return float(unoriented_angles(np.reshape(pred, (1, 3)), np.reshape(gt, (1, 3)))[0])


def _errors(errors) -> np.ndarray:
    errors = np.asarray(errors, dtype=np.float64).reshape(-1)
    if errors.size == 0:
        raise ValueError("empty error set")
    return errors


def rmse(errors) -> float:
    errors = _errors(errors)
    return float(np.sqrt(np.mean(errors * errors)))


def pgp(errors, alpha: float) -> float:
    """Fraction of errors strictly below ``alpha`` degrees."""
    errors = _errors(errors)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return float(np.count_nonzero(errors < alpha) / errors.size)


def summarize(errors, alphas=(5, 10)) -> dict:
    out = {"rmse": rmse(errors)}
    for a in alphas:
        out[f"pgp{a:g}"] = pgp(errors, a)
    return out


def summary_line(errors) -> str:
    s = summarize(errors)
    return f"RMSE={s['rmse']:.4f} PGP5={s['pgp5']:.4f} PGP10={s['pgp10']:.4f}"


def write_errors_csv(path, errors, indices=None):
    """Write ``point_index,beta_deg`` rows."""
    errors = _errors(errors)
    indices = np.arange(errors.size) if indices is None else np.asarray(indices)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["point_index", "beta_deg"])
        for i, b in zip(indices, errors):
            writer.writerow([int(i), repr(float(b))])


def read_errors_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([int(r["point_index"]) for r in rows]), np.array([float(r["beta_deg"]) for r in rows])
