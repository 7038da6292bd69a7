"""Point clouds, k-nearest-neighbour indexing and patch extraction.

A patch is the set of ``k`` nearest neighbours of a query point, shifted so
that its mean sits at the origin. The query point is part of its own patch
(it is at distance zero), so ``k=1`` yields the point itself. Distance ties
are broken by ascending point index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


@dataclass
class PointCloud:
    """Ordered 3D points with optional per-point unit normals.

    ``meta`` holds auxiliary per-point arrays (e.g. a ``"feature"`` mask marking
    points near sharp edges of synthetic shapes).
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ValueError(
                    f"normals/points cardinality mismatch: {len(self.normals)} vs {len(self.points)}"
                )
            lengths = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise ValueError("normals must have unit length")

    def __len__(self):
        return len(self.points)

    def subset(self, indices) -> "PointCloud":
        indices = np.asarray(indices)
        normals = None if self.normals is None else self.normals[indices]
        meta = {
            key: value[indices]
            for key, value in self.meta.items()
            if isinstance(value, np.ndarray) and len(value) == len(self.points)
        }
        return PointCloud(self.points[indices], normals, meta)


@dataclass
class Patch:
    center_index: int
    neighbor_indices: np.ndarray
    centered_coords: np.ndarray
    centroid: np.ndarray

    @property
    def k(self) -> int:
        return len(self.neighbor_indices)


def normalize_to_unit_sphere(cloud: PointCloud):
    """Center a cloud on its centroid and scale it into the unit sphere.

    Returns ``(normalized, scale, shift)`` where
    ``normalized.points == (cloud.points + shift) * scale``.
    Normals are carried through unchanged.
    """
    if len(cloud) == 0:
        raise ValueError("empty point cloud")
    shift = -cloud.points.mean(axis=0)
    shifted = cloud.points + shift
    radius = np.sqrt(np.max(np.einsum("ij,ij->i", shifted, shifted)))
    scale = 1.0 / radius if radius > 0 else 1.0
    out = PointCloud(shifted * scale, cloud.normals, dict(cloud.meta))
    return out, scale, shift


def denormalize(cloud: PointCloud, scale: float, shift) -> PointCloud:
    """Invert :func:`normalize_to_unit_sphere`."""
    return PointCloud(cloud.points / scale - np.asarray(shift), cloud.normals, dict(cloud.meta))


def _sort_by_distance_then_index(dist, idx):
    order = np.lexsort((idx, dist), axis=-1)
    return np.take_along_axis(dist, order, -1), np.take_along_axis(idx, order, -1)


class SpatialIndex:
    """k-NN index over the points of one cloud (immutable after construction).

    Answers match a brute-force distance sort; ties are broken by ascending
    point index.
    """

    def __init__(self, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            raise ValueError("empty point cloud")
        self.points = points
        self._tree = cKDTree(points)

    def __len__(self):
        return len(self.points)

    def query(self, queries, k: int):
        """Return ``(distances, indices)`` of the ``k`` nearest points for each query row."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        if k < 1:
            raise ValueError("k must be positive")
        if k > n:
            raise ValueError("k exceeds cloud size")
        # over-fetch so that ties straddling the k-th neighbour get ordered by index
        fetch = min(n, k + 4)
        while True:
            dist, idx = self._tree.query(queries, k=fetch)
            dist = dist.reshape(len(queries), fetch)
            idx = idx.reshape(len(queries), fetch)
            dist, idx = _sort_by_distance_then_index(dist, idx)
            if fetch == n or np.all(dist[:, k - 1] < dist[:, fetch - 1]):
                return dist[:, :k], idx[:, :k]
            fetch = min(n, 2 * fetch)


def build_index(cloud: PointCloud) -> SpatialIndex:
    return SpatialIndex(cloud.points)


def extract_patch(cloud: PointCloud, index: SpatialIndex, a: int, k: int) -> Patch:
    """The mean-centered ``k``-NN patch around point ``a``."""
    if k > len(cloud):
        raise ValueError("k exceeds cloud size")
    _, nbrs = index.query(cloud.points[a], k)
    nbrs = nbrs[0]
    raw = cloud.points[nbrs]
    centroid = raw.mean(axis=0)
    return Patch(int(a), nbrs, raw - centroid, centroid)


def extract_patches(cloud: PointCloud, index: SpatialIndex, k: int, query_indices=None, chunk: int = 8192):
    """Vectorized patch extraction.

    Returns ``(neighbor_indices (M, k), centered (M, k, 3), centroids (M, 3))``.
    """
    if k > len(cloud):
        raise ValueError("k exceeds cloud size")
    if query_indices is None:
        query_indices = np.arange(len(cloud))
    query_indices = np.asarray(query_indices)
    nbr_chunks = []
    for start in range(0, len(query_indices), chunk):
        _, nbrs = index.query(cloud.points[query_indices[start:start + chunk]], k)
        nbr_chunks.append(nbrs)
    nbrs = np.concatenate(nbr_chunks) if nbr_chunks else np.zeros((0, k), dtype=np.intp)
    raw = cloud.points[nbrs]
    centroids = raw.mean(axis=1)
    return nbrs, raw - centroids[:, None, :], centroids


def center_patch(coords) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    return coords - coords.mean(axis=-2, keepdims=True)
