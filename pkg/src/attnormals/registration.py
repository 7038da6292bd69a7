"""Point-to-plane ICP with a Levenberg-Marquardt inner solver.

Each outer iteration pairs every transformed source point with its nearest
destination point, then runs LM on the point-to-plane energy
``sum((n_d . (T x_s - x_d))^2)`` over those fixed pairs. After the update the
correspondences are refreshed and the point-to-point energy
``sum(|T x_s - x_d|^2)`` is compared to the stop threshold. Energies are sums,
so the threshold is only meaningful for clouds normalized to the unit sphere.

Rotation increments are axis-angle vectors composed on the left of the current
rotation; translation increments are additive.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import PointCloud, SpatialIndex


def _pts(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)


@dataclass
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, points) -> np.ndarray:
        return _pts(points) @ self.rotation.T + self.translation

    def apply_normals(self, normals) -> np.ndarray:
        return np.asarray(normals) @ self.rotation.T

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def orthonormalize(rotation) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def make_perturbation(angles_deg, translation) -> RigidTransform:
    """Rotation ``Rz @ Ry @ Rx`` from per-axis angles in degrees, plus a translation."""
    ax, ay, az = np.radians(np.asarray(angles_deg, dtype=np.float64))
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return RigidTransform(rz @ ry @ rx, translation)


def apply_increment(transform: RigidTransform, delta) -> RigidTransform:
    """Left-compose the axis-angle part of ``delta`` and add its translation part."""
    delta = np.asarray(delta, dtype=np.float64)
    rot = Rotation.from_rotvec(delta[:3]).as_matrix() @ transform.rotation
    return RigidTransform(orthonormalize(rot), transform.translation + delta[3:])


# ---------------------------------------------------------------------------
# energies and correspondences
# ---------------------------------------------------------------------------


def _check_pairs(pairs) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    if len(pairs) == 0:
        raise ValueError("empty correspondence set")
    return pairs


def point_to_point_energy(src, dst, pairs) -> float:
    pairs = _check_pairs(pairs)
    d = _pts(src)[pairs[:, 0]] - _pts(dst)[pairs[:, 1]]
    return float(np.sum(d * d))


def plane_residuals(src, dst, normals_d, pairs, transform: RigidTransform) -> np.ndarray:
    pairs = _check_pairs(pairs)
    moved = transform.apply(_pts(src)[pairs[:, 0]])
    return np.einsum("ij,ij->i", np.asarray(normals_d)[pairs[:, 1]], moved - _pts(dst)[pairs[:, 1]])


def point_to_plane_energy(src, dst, normals_d, pairs, transform: RigidTransform | None = None) -> float:
    transform = RigidTransform.identity() if transform is None else transform
    r = plane_residuals(src, dst, normals_d, pairs, transform)
    return float(np.sum(r * r))


def find_correspondences(src_transformed, dst_index: SpatialIndex) -> np.ndarray:
    """``(i, nearest destination index)`` for every source point, no rejection."""
    pts = _pts(src_transformed)
    _, idx = dst_index.query(pts, 1)
    return np.stack([np.arange(len(pts)), idx[:, 0]], axis=1)


def plane_jacobian(src, dst, normals_d, pairs, transform: RigidTransform) -> np.ndarray:
    """d(residual)/d(omega, dt) at zero increment: rows ``[(R x_s) x n, n]``."""
    pairs = _check_pairs(pairs)
    rotated = _pts(src)[pairs[:, 0]] @ transform.rotation.T
    n = np.asarray(normals_d)[pairs[:, 1]]
    return np.hstack([np.cross(rotated, n), n])


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


_MIN_DAMPING = 1e-12
_MAX_DAMPING = 1e12


@dataclass
class IcpConfig:
    stop_threshold: float = 1e-5
    max_iterations: int = 200
    lm_damping_init: float = 1e-4
    lm_damping_up: float = 10.0
    lm_damping_down: float = 0.3
    lm_max_retries: int = 20
    lm_max_inner: int = 50
    lm_step_tol: float = 1e-10

    def __post_init__(self):
        if self.stop_threshold <= 0:
            raise ValueError("stop_threshold must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class IcpResult:
    transform: RigidTransform
    iterations: int
    converged: bool
    ptpt_trace: list = field(default_factory=list)
    ptplane_trace: list = field(default_factory=list)
    damping_trace: list = field(default_factory=list)
    lm_energies: list = field(default_factory=list)

    @property
    def label(self) -> str:
        return str(self.iterations) if self.converged else "F"


def lm_solve_step(src, dst, normals_d, pairs, transform: RigidTransform, damping: float, cfg: IcpConfig | None = None):
    """One accepted (or finally rejected) LM step on fixed correspondences.

    Solves ``(J^T J + damping * diag(J^T J)) delta = -J^T r`` in the
    minimum-norm least-squares sense, so directions the pairs cannot observe
    (e.g. sliding along a plane) get a zero step. A step is kept only if it
    strictly lowers the point-to-plane energy, otherwise damping is raised and
    the solve retried. Returns ``(delta, new_damping, accepted)``; a rejected
    result carries a zero ``delta``.
    """
    cfg = cfg or IcpConfig()
    pairs = _check_pairs(pairs)
    if len(pairs) < 6:
        raise ValueError("need at least 6 correspondences")
    r = plane_residuals(src, dst, normals_d, pairs, transform)
    # same summation as the trial energies, so acceptance is judged consistently
    energy = point_to_plane_energy(src, dst, normals_d, pairs, transform)
    if not np.isfinite(energy):
        raise ValueError("non-finite point-to-plane energy")
    if energy == 0.0:
        return np.zeros(6), damping * cfg.lm_damping_down, True
    jac = plane_jacobian(src, dst, normals_d, pairs, transform)
    with np.errstate(over="ignore", invalid="ignore"):
        jtj = jac.T @ jac
        jtr = jac.T @ r
    if not (np.all(np.isfinite(jtj)) and np.all(np.isfinite(jtr))):
        # no amount of damping repairs an overflowed system
        raise RuntimeError("solver stalled")
    diag = np.diag(np.diag(jtj))
    lam = min(max(damping, _MIN_DAMPING), _MAX_DAMPING)
    for _ in range(cfg.lm_max_retries + 1):
        try:
            delta = np.linalg.lstsq(jtj + lam * diag, -jtr, rcond=None)[0]
        except np.linalg.LinAlgError:
            delta = None
        if delta is None or not np.all(np.isfinite(delta)):
            if lam >= _MAX_DAMPING:
                raise RuntimeError("solver stalled")
            lam = min(lam * cfg.lm_damping_up, _MAX_DAMPING)
            continue
        trial = point_to_plane_energy(src, dst, normals_d, pairs, apply_increment(transform, delta))
        if trial < energy:
            return delta, max(lam * cfg.lm_damping_down, _MIN_DAMPING), True
        if lam >= _MAX_DAMPING:
            break
        lam = min(lam * cfg.lm_damping_up, _MAX_DAMPING)
    return np.zeros(6), lam, False


def icp(src, dst, normals_d, cfg: IcpConfig | None = None, init: RigidTransform | None = None, dst_index=None) -> IcpResult:
    """Register ``src`` onto ``dst`` by point-to-plane ICP; stop on point-to-point energy."""
    cfg = cfg or IcpConfig()
    src_pts, dst_pts = _pts(src), _pts(dst)
    normals_d = np.asarray(normals_d, dtype=np.float64)
    if len(src_pts) == 0 or len(dst_pts) == 0:
        raise ValueError("empty point cloud")
    if normals_d.shape != dst_pts.shape:
        raise ValueError("need one normal per destination point")
    index = dst_index if dst_index is not None else SpatialIndex(dst_pts)
    transform = RigidTransform.identity() if init is None else init
    result = IcpResult(transform, 0, False)
    pairs = find_correspondences(transform.apply(src_pts), index)
    for it in range(1, cfg.max_iterations + 1):
        # fresh correspondences define a new least-squares problem: restart the damping
        damping = cfg.lm_damping_init
        energies = [point_to_plane_energy(src_pts, dst_pts, normals_d, pairs, transform)]
        for _ in range(cfg.lm_max_inner):
            delta, damping, accepted = lm_solve_step(src_pts, dst_pts, normals_d, pairs, transform, damping, cfg)
            if not accepted:
                break
            transform = apply_increment(transform, delta)
            energies.append(point_to_plane_energy(src_pts, dst_pts, normals_d, pairs, transform))
            if np.linalg.norm(delta) < cfg.lm_step_tol:
                break
        pairs = find_correspondences(transform.apply(src_pts), index)
        ptpt = point_to_point_energy(transform.apply(src_pts), dst_pts, pairs)
        result.ptpt_trace.append(ptpt)
        result.ptplane_trace.append(energies[-1])
        result.damping_trace.append(damping)
        result.lm_energies.append(energies)
        result.iterations = it
        result.transform = transform
        if ptpt < cfg.stop_threshold:
            result.converged = True
            break
    return result


def write_trace_csv(path, result: IcpResult):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "e_ptpt", "e_ptplane", "damping"])
        for i, (a, b, lam) in enumerate(zip(result.ptpt_trace, result.ptplane_trace, result.damping_trace), start=1):
            writer.writerow([i, repr(a), repr(b), repr(lam)])
