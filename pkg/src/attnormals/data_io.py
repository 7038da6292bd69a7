"""Point/normal text files, split manifests, synthetic shapes and attention images.

File layout follows the PCPNet distribution: ``<name>.xyz`` and
``<name>.normals`` hold one whitespace-separated triple per line, an optional
``<name>.pidx`` lists evaluation point indices, and ``trainingset.txt`` /
``testset.txt`` list one shape name per line.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("sphere", "cube", "cylinder", "torus", "plane-with-crease", "ellipsoid", "blob")


# ---------------------------------------------------------------------------
# text formats
# ---------------------------------------------------------------------------


def _read_triples(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 values, got {len(fields)}")
            try:
                rows.append([float(f) for f in fields])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed number in {line.strip()!r}") from None
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def _write_triples(path, values):
    values = np.asarray(values, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as fh:
        for x, y, z in values:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")


def read_xyz(path) -> PointCloud:
    return PointCloud(_read_triples(path))


def write_xyz(path, cloud):
    _write_triples(path, cloud.points if isinstance(cloud, PointCloud) else cloud)


def read_normals(path) -> np.ndarray:
    """Read normals, normalizing each to unit length (warns when off by > 1e-3)."""
    normals = _read_triples(path)
    lengths = np.linalg.norm(normals, axis=1)
    if np.any(lengths == 0):
        bad = int(np.flatnonzero(lengths == 0)[0]) + 1
        raise ValueError(f"{path}: zero-length normal (entry {bad})")
    off = np.abs(lengths - 1.0) > 1e-3
    if np.any(off):
        logger.warning("%s: %d normals not unit length; normalizing", path, int(off.sum()))
    return normals / lengths[:, None]


def write_normals(path, normals):
    _write_triples(path, normals)


def read_pidx(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([int(line) for line in fh if line.strip()], dtype=np.intp)


def read_split(path) -> list:
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    root: str
    shapes: list
    split: str = "test"
    points_files: dict = field(default_factory=dict)
    normals_files: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in self.shapes:
            self.points_files.setdefault(name, os.path.join(self.root, f"{name}.xyz"))
            self.normals_files.setdefault(name, os.path.join(self.root, f"{name}.normals"))

    def validate(self):
        if not self.shapes:
            raise ValueError("empty manifest")
        for name in self.shapes:
            for path in (self.points_files[name], self.normals_files[name]):
                if not os.path.exists(path):
                    raise FileNotFoundError(path)

    def load(self, name, use_pidx: bool = True) -> PointCloud:
        return load_shape(self.points_files[name], self.normals_files[name], use_pidx=use_pidx)


def load_manifest(root, split_file, split: str | None = None) -> DatasetManifest:
    path = split_file if os.path.isabs(split_file) or os.path.exists(split_file) else os.path.join(root, split_file)
    shapes = read_split(path)
    if split is None:
        split = "train" if "train" in os.path.basename(path) else "test"
    manifest = DatasetManifest(root, shapes, split)
    manifest.validate()
    return manifest


def load_shape(points_path, normals_path=None, use_pidx: bool = False) -> PointCloud:
    """Load points (and normals if given). With ``use_pidx`` a sibling ``.pidx``
    file, when present, is recorded as ``meta["eval_indices"]``."""
    points = _read_triples(points_path)
    normals = None
    if normals_path is not None:
        normals = read_normals(normals_path)
        if len(normals) != len(points):
            raise ValueError(
                f"{normals_path}: {len(normals)} normals for {len(points)} points in {points_path}"
            )
    cloud = PointCloud(points, normals)
    pidx = os.path.splitext(points_path)[0] + ".pidx"
    if use_pidx and os.path.exists(pidx):
        cloud.meta["eval_indices"] = read_pidx(pidx)
    return cloud


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticShapeSpec:
    """Shape kind, point count, seed, and kind-specific size parameters.

    Parameters (defaults in brackets):
      sphere: radius [1]
      cube: half_extents [(1, 1, 1)], feature_band [0.02]
      cylinder: radius [0.5], height [2], caps [True]
      torus: major [1], minor [0.3]
      plane-with-crease: half_size [1], dihedral_deg [90], feature_band [0.02]
      ellipsoid: axes [(1, 0.7, 0.5)]
      blob: bumps [12], amplitude [0.15], width [0.35] (radius 1 plus Gaussian bumps
            at random directions; the bump layout is drawn from ``seed``)
    """

    kind: str
    n_points: int
    seed: int = 0
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if isinstance(self.params, dict):
            object.__setattr__(self, "params", tuple(sorted(self.params.items())))
        for key, value in self.options.items():
            if key in ("caps",):
                continue
            if np.any(np.asarray(value, dtype=float) <= 0):
                raise ValueError(f"parameter {key} must be positive")

    @property
    def options(self) -> dict:
        return dict(self.params)


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _sphere(rng, n, radius=1.0):
    d = _unit(rng.normal(size=(n, 3)))
    return d * radius, d, np.zeros(n, bool)


def _cube(rng, n, half_extents=(1.0, 1.0, 1.0), feature_band=0.02):
    h = np.asarray(half_extents, dtype=np.float64)
    areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
    face_p = np.repeat(areas, 2) / (2 * areas.sum())
    face = rng.choice(6, size=n, p=face_p)
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * h
    rows = np.arange(n)
    pts[rows, axis] = sign * h[axis]
    normals = np.zeros((n, 3))
    normals[rows, axis] = sign
    # distance to the nearest edge = smallest in-face distance to a face border
    slack = h - np.abs(pts)
    slack[rows, axis] = np.inf
    feature = slack.min(axis=1) < feature_band * h.max()
    return pts, normals, feature


def _cylinder(rng, n, radius=0.5, height=2.0, caps=True):
    lateral = 2 * np.pi * radius * height
    cap = np.pi * radius**2 if caps else 0.0
    part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    z = rng.uniform(-height / 2, height / 2, size=n)
    r = radius * np.sqrt(rng.uniform(0, 1, size=n))
    pts = np.stack([radius * np.cos(theta), radius * np.sin(theta), z], axis=1)
    normals = np.stack([np.cos(theta), np.sin(theta), np.zeros(n)], axis=1)
    for cap_id, sign in ((1, 1.0), (2, -1.0)):
        m = part == cap_id
        pts[m] = np.stack([r[m] * np.cos(theta[m]), r[m] * np.sin(theta[m]), np.full(m.sum(), sign * height / 2)], 1)
        normals[m] = [0.0, 0.0, sign]
    return pts, normals, np.zeros(n, bool)


def _torus(rng, n, major=1.0, minor=0.3):
    theta = rng.uniform(0, 2 * np.pi, size=n)
    phi = np.empty(n)
    filled = 0
    while filled < n:
        # area element is proportional to (major + minor cos(phi))
        cand = rng.uniform(0, 2 * np.pi, size=2 * (n - filled))
        keep = cand[rng.uniform(0, 1, size=cand.size) * (major + minor) < major + minor * np.cos(cand)]
        take = keep[: n - filled]
        phi[filled:filled + take.size] = take
        filled += take.size
    normals = np.stack([np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi)], 1)
    centers = np.stack([major * np.cos(theta), major * np.sin(theta), np.zeros(n)], 1)
    return centers + minor * normals, normals, np.zeros(n, bool)


def _crease(rng, n, half_size=1.0, dihedral_deg=90.0, feature_band=0.02):
    gamma = (np.pi - np.radians(dihedral_deg)) / 2
    u = rng.uniform(0, half_size, size=n)
    y = rng.uniform(-half_size, half_size, size=n)
    side = np.where(rng.uniform(size=n) < 0.5, 1.0, -1.0)
    pts = np.stack([side * u * np.cos(gamma), y, u * np.sin(gamma)], 1)
    normals = np.stack([-side * np.sin(gamma), np.zeros(n), np.full(n, np.cos(gamma))], 1)
    return pts, normals, u < feature_band * half_size


def _ellipsoid(rng, n, axes=(1.0, 0.7, 0.5)):
    a = np.asarray(axes, dtype=np.float64)
    out = np.empty((n, 3))
    filled = 0
    bound = np.max(a[[1, 0, 0]] * a[[2, 2, 1]])
    while filled < n:
        d = _unit(rng.normal(size=(2 * (n - filled), 3)))
        # area density of the map d -> a * d relative to the sphere
        density = np.linalg.norm(d * a[[1, 0, 0]] * a[[2, 2, 1]], axis=1)
        keep = d[rng.uniform(0, bound, size=len(d)) < density][: n - filled]
        out[filled:filled + len(keep)] = keep
        filled += len(keep)
    pts = out * a
    return pts, _unit(pts / a**2), np.zeros(n, bool)


def _blob(rng, n, bumps=12, amplitude=0.15, width=0.35):
    centers = _unit(rng.normal(size=(int(bumps), 3)))
    heights = amplitude * rng.uniform(-1.0, 1.0, size=int(bumps))

    def radius_and_grad(d):
        diff = d[:, None, :] - centers[None]
        w = heights * np.exp(-np.sum(diff * diff, axis=2) / width**2)
        r = 1.0 + w.sum(axis=1)
        grad = np.einsum("nb,nbj->nj", w, -2.0 * diff / width**2)
        return r, grad

    # rejection-sample directions by the area element r^2 sqrt(1 + |grad_S r|^2 / r^2)
    out = np.empty((n, 3))
    filled = 0
    r_max = 1.0 + amplitude * int(bumps)
    while filled < n:
        d = _unit(rng.normal(size=(2 * (n - filled), 3)))
        r, grad = radius_and_grad(d)
        gs = grad - np.sum(grad * d, axis=1, keepdims=True) * d
        density = r * np.sqrt(r * r + np.sum(gs * gs, axis=1))
        bound = r_max * np.sqrt(r_max**2 + (2 * amplitude * int(bumps) / width) ** 2)
        keep = d[rng.uniform(0, bound, size=len(d)) < density][: n - filled]
        out[filled:filled + len(keep)] = keep
        filled += len(keep)
    r, grad = radius_and_grad(out)
    gs = grad - np.sum(grad * out, axis=1, keepdims=True) * out
    return out * r[:, None], _unit(out - gs / r[:, None]), np.zeros(n, bool)


_GENERATORS = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "torus": _torus,
    "plane-with-crease": _crease,
    "ellipsoid": _ellipsoid,
    "blob": _blob,
}


def synth_shape(spec: SyntheticShapeSpec) -> PointCloud:
    """Sample a shape uniformly by area with exact analytic normals.

    ``meta["feature"]`` flags points near sharp edges (cube edges, the crease
    line) where the ground-truth normal is ambiguous.
    """
    rng = np.random.default_rng(spec.seed)
    pts, normals, feature = _GENERATORS[spec.kind](rng, spec.n_points, **spec.options)
    return PointCloud(pts, _unit(normals), {"feature": feature, "kind": spec.kind})


# ---------------------------------------------------------------------------
# attention images
# ---------------------------------------------------------------------------


def write_attention_map(rows, path):
    """Write stacked attention rows as a P2 PGM (one patch per row, nearest
    neighbour leftmost, linearly scaled to 0-255) plus ``<path>.csv`` with
    the raw weights. Returns the CSV path."""
    if hasattr(rows, "received"):
        rows = rows.received
    try:
        arr = np.array(rows, dtype=np.float64)
    except ValueError:
        raise ValueError("attention rows must have equal length") from None
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError("attention rows must have equal length")
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        pixels = np.rint((arr - lo) / (hi - lo) * 255).astype(int)
    else:
        pixels = np.full(arr.shape, 128, dtype=int)
    with open(path, "w") as fh:
        fh.write(f"P2\n{arr.shape[1]} {arr.shape[0]}\n255\n")
        for row in pixels:
            fh.write(" ".join(str(v) for v in row) + "\n")
    csv_path = os.path.splitext(str(path))[0] + ".csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in arr:
            writer.writerow([f"{v:.17g}" for v in row])
    return csv_path


def read_pgm(path) -> np.ndarray:
    with open(path) as fh:
        tokens = fh.read().split()
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not a P2 PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array([int(t) for t in tokens[4:4 + w * h]]).reshape(h, w)


def read_attention_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh) if row])
