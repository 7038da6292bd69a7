"""Classical normal estimators: PCA plane fitting and order-2 jet fitting.

Both work on mean-centered patches and return unoriented unit normals. The
symmetric 3x3 eigen-solver is a vectorized cyclic Jacobi iteration, so whole
clouds are processed in one call via the ``*_normals`` batch functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Patch

_PAIRS = ((0, 1), (0, 2), (1, 2))
_SYM_INDEX = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


@dataclass(frozen=True)
class Sym3:
    """Symmetric 3x3 matrix stored as ``(xx, yy, zz, xy, xz, yz)``."""

    xx: float
    yy: float
    zz: float
    xy: float
    xz: float
    yz: float

    @classmethod
    def from_matrix(cls, m) -> "Sym3":
        m = np.asarray(m, dtype=np.float64)
        return cls(*(float(m[i, j]) for i, j in _SYM_INDEX))

    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.xx, self.xy, self.xz],
                [self.xy, self.yy, self.yz],
                [self.xz, self.yz, self.zz],
            ]
        )

    @property
    def trace(self) -> float:
        return self.xx + self.yy + self.zz


@dataclass(frozen=True)
class EigenDecomp3:
    """Ascending eigenvalues; ``eigenvectors[i]`` pairs with ``eigenvalues[i]``."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


@dataclass(frozen=True)
class JetCoeffs:
    """Height function ``c0 + c1 u + c2 v + c3 u^2 + c4 uv + c5 v^2`` in ``frame``.

    ``frame`` rows are (tangent u, tangent v, reference normal). Coefficients
    are expressed in patch-radius units (``radius``).
    """

    coeffs: np.ndarray
    frame: np.ndarray
    radius: float

    def normal(self) -> np.ndarray:
        n = -self.coeffs[1] * self.frame[0] - self.coeffs[2] * self.frame[1] + self.frame[2]
        return n / np.linalg.norm(n)


def _canonical_sign(vectors):
    # flip so the largest-magnitude component is positive (first one on ties)
    idx = np.argmax(np.abs(vectors), axis=-1)
    lead = np.take_along_axis(vectors, idx[..., None], -1)
    return np.where(lead < 0, -vectors, vectors)


def jacobi_eigh(mats, tol: float = 1e-14, max_sweeps: int = 50):
    """Eigen-decompose a stack of symmetric 3x3 matrices with cyclic Jacobi.

    Parameters
    ----------
    mats : array (..., 3, 3)
        Symmetric matrices (only the upper triangle is trusted).

    Returns
    -------
    w : array (..., 3)
        Eigenvalues in ascending order.
    v : array (..., 3, 3)
        ``v[..., i, :]`` is the unit eigenvector for ``w[..., i]``, with the
        largest-magnitude component made positive.
    """
    mats = np.asarray(mats, dtype=np.float64)
    batch_shape = mats.shape[:-2]
    a = mats.reshape(-1, 3, 3).copy()
    a = np.triu(a) + np.swapaxes(np.triu(a, 1), -1, -2)
    n = len(a)
    v = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    scale = np.maximum(np.linalg.norm(a, axis=(1, 2)), np.finfo(float).tiny)
    rows = np.arange(n)
    for _ in range(max_sweeps):
        off = np.sqrt(a[:, 0, 1] ** 2 + a[:, 0, 2] ** 2 + a[:, 1, 2] ** 2)
        if np.all(off <= tol * scale):
            break
        for p, q in _PAIRS:
            apq = a[:, p, q]
            active = apq != 0
            safe = np.where(active, apq, 1.0)
            theta = (a[:, q, q] - a[:, p, p]) / (2.0 * safe)
            t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            t = np.where(theta == 0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
            rot[rows, p, p] = c
            rot[rows, q, q] = c
            rot[rows, p, q] = s
            rot[rows, q, p] = -s
            a = np.swapaxes(rot, -1, -2) @ a @ rot
            a[:, p, q] = 0.0
            a[:, q, p] = 0.0
            v = v @ rot
    w = np.diagonal(a, axis1=1, axis2=2).copy()
    order = np.argsort(w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, 1)
    vecs = np.take_along_axis(np.swapaxes(v, 1, 2), order[:, :, None], 1)
    vecs = _canonical_sign(vecs)
    return w.reshape(batch_shape + (3,)), vecs.reshape(batch_shape + (3, 3))


def eigh3(m) -> EigenDecomp3:
    mat = m.matrix() if isinstance(m, Sym3) else np.asarray(m, dtype=np.float64)
    w, v = jacobi_eigh(mat)
    return EigenDecomp3(w, v)


def _coords(patch):
    return patch.centered_coords if isinstance(patch, Patch) else np.asarray(patch, dtype=np.float64)


def covariance_matrices(centered):
    """Population covariance ``(1/k) sum (p - mean)(p - mean)^T`` for (..., k, 3) patches."""
    centered = np.asarray(centered, dtype=np.float64)
    d = centered - centered.mean(axis=-2, keepdims=True)
    return np.einsum("...ki,...kj->...ij", d, d) / d.shape[-2]


def covariance(patch) -> Sym3:
    coords = _coords(patch)
    if len(coords) < 3:
        raise ValueError("degenerate patch")
    return Sym3.from_matrix(covariance_matrices(coords))


def pca_normals(centered) -> np.ndarray:
    """Smallest-eigenvalue eigenvectors for a batch of (M, k, 3) patches."""
    centered = np.asarray(centered, dtype=np.float64)
    if centered.shape[-2] < 3:
        raise ValueError("degenerate patch")
    spread = np.max(np.ptp(centered, axis=-2), axis=-1)
    if np.any(spread == 0):
        raise ValueError("degenerate patch")
    cov = covariance_matrices(centered)
    _, v = jacobi_eigh(cov)
    return v[..., 0, :]


def pca_normal(patch) -> np.ndarray:
    return pca_normals(_coords(patch)[None])[0]


def _jet_design(u, v):
    return np.stack([np.ones_like(u), u, v, u * u, u * v, v * v], axis=-1)


def _tangent_frame(normals) -> np.ndarray:
    """Rows (u, v, n) of an orthonormal frame around each unit normal in (M, 3)."""
    axis = np.eye(3)[np.argmin(np.abs(normals), axis=-1)]
    u = np.cross(normals, axis)
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    return np.stack([u, np.cross(normals, u), normals], axis=-2)


def _fit_heights(d, frame, damping):
    """Solve the damped normal equations for each (M, k, 3) offset set in its frame."""
    local = np.einsum("mkj,mij->mki", d, frame)
    design = _jet_design(local[..., 0], local[..., 1])
    sv = np.linalg.svd(design, compute_uv=False)
    tol = sv[:, :1] * max(design.shape[1:]) * np.finfo(float).eps
    if np.any(np.sum(sv > tol, axis=1) < 6):
        raise ValueError("degenerate jet fit")
    ata = np.einsum("mki,mkj->mij", design, design) + damping * np.eye(6)
    atb = np.einsum("mki,mk->mi", design, local[..., 2])
    return np.linalg.solve(ata, atb[..., None])[..., 0]


# six coefficients of the order-2 height function
JET_MIN_POINTS = 6


def _jet_batch(centered, query_row, damping, refine, tol=1e-12):
    centered = np.asarray(centered, dtype=np.float64)
    if centered.shape[-2] < JET_MIN_POINTS:
        raise ValueError("insufficient points for order-2 jet")
    _, vecs = jacobi_eigh(covariance_matrices(centered))
    frame = vecs[:, ::-1, :]
    d = centered - centered[:, query_row : query_row + 1, :]
    radius = np.max(np.linalg.norm(d, axis=2), axis=1)
    if np.any(radius == 0):
        raise ValueError("degenerate jet fit")
    d = d / radius[:, None, None]
    for it in range(refine + 1):
        coeffs = _fit_heights(d, frame, damping)
        n = -coeffs[:, 1:2] * frame[:, 0] - coeffs[:, 2:3] * frame[:, 1] + frame[:, 2]
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        # the fitted tilt shrinks geometrically; stop once every frame has settled
        if it == refine or np.max(np.hypot(coeffs[:, 1], coeffs[:, 2])) < tol:
            break
        frame = _tangent_frame(n)
    return coeffs, frame, radius, n


def jet_fit(patch, query_row: int = 0, damping: float = 1e-12, refine: int = 12) -> JetCoeffs:
    """Least-squares order-2 height function around the query point.

    The initial local frame comes from PCA; coordinates are taken relative to
    the query point (row ``query_row``, the nearest neighbour of itself) and
    divided by the patch radius before fitting. Up to ``refine`` extra passes
    refit in a frame whose normal axis is the previous jet normal, until the
    fitted tilt vanishes; this removes the bias of a tilted initial frame.
    """
    coeffs, frame, radius, _ = _jet_batch(_coords(patch)[None], query_row, damping, refine)
    return JetCoeffs(coeffs[0], frame[0], float(radius[0]))


def jet_normal(patch, query_row: int = 0, refine: int = 12) -> np.ndarray:
    return _canonical_sign(jet_fit(patch, query_row, refine=refine).normal())


def jet_normals(centered, query_row: int = 0, damping: float = 1e-12, refine: int = 12) -> np.ndarray:
    """Batched :func:`jet_normal` over (M, k, 3) patches."""
    return _canonical_sign(_jet_batch(centered, query_row, damping, refine)[3])
