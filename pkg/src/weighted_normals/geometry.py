"""Point clouds, exact k-NN queries, patch extraction and PCA alignment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegeneratePrediction, InvalidInput

UNIT_TOL = 1e-6


@dataclass
class PointCloud:
    """Ordered ``(m, 3)`` points with optional ``(m, 3)`` unit normals."""

    points: np.ndarray
    normals: np.ndarray | None = None
    bbox_diagonal: float = field(init=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidInput(f"points must have shape (m, 3), got {pts.shape}")
        if len(pts) < 1:
            raise InvalidInput("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise InvalidInput("point cloud contains non-finite coordinates")
        self.points = pts
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise InvalidInput(f"normals shape {nrm.shape} does not match points {pts.shape}")
            lengths = np.linalg.norm(nrm, axis=1)
            if not np.all(np.abs(lengths - 1.0) <= UNIT_TOL):
                bad = int(np.argmax(np.abs(lengths - 1.0)))
                raise InvalidInput(f"normal {bad} has length {lengths[bad]!r}, expected 1")
            self.normals = nrm
        self.bbox_diagonal = bbox_diagonal(pts)

    def __len__(self):
        return len(self.points)


def bbox_diagonal(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


class KnnIndex:
    """Exact Euclidean k-NN over a fixed point set.

    Results are ordered by ascending distance with ties broken by ascending
    index, i.e. identical to a brute-force scan with a stable sort.  A k-d
    tree finds the k-th distance, then every candidate inside that radius is
    re-ranked with the same squared-distance arithmetic as the scan.
    """

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise InvalidInput("cannot index an empty point set")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self):
        return len(self.points)

    def query(self, q, k: int) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64).reshape(3)
        k = min(int(k), len(self.points))
        if k < 1:
            raise InvalidInput("k must be at least 1")
        dist, _ = self._tree.query(q, k=k)
        radius = float(np.max(np.atleast_1d(dist)))
        # widen the ball so floating-point disagreement with the tree cannot drop ties
        radius = radius * (1.0 + 1e-9) + 1e-12
        cand = np.asarray(self._tree.query_ball_point(q, radius), dtype=np.int64)
        cand.sort()
        d2 = np.sum((self.points[cand] - q) ** 2, axis=1)
        order = np.argsort(d2, kind="stable")
        return cand[order[:k]]

    def query_many(self, queries, k: int, workers: int = 1) -> np.ndarray:
        """Vectorized query; returns ``(len(queries), min(k, m))`` indices."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k = min(int(k), len(self.points))
        if k < 1:
            raise InvalidInput("k must be at least 1")
        # over-fetch, then re-rank exactly; fall back to the ball query on boundary ties
        extra = min(k + 8, len(self.points))
        _, idx = self._tree.query(queries, k=extra, workers=workers)
        idx = np.asarray(idx).reshape(len(queries), extra)
        out = np.empty((len(queries), k), dtype=np.int64)
        for row, (q, cand) in enumerate(zip(queries, idx)):
            d2 = np.sum((self.points[cand] - q) ** 2, axis=1)
            order = np.lexsort((cand, d2))
            if extra > k and not d2[order[k - 1]] < d2[order[extra - 1]]:
                out[row] = self.query(q, k)
            else:
                out[row] = cand[order[:k]]
        return out


def build_knn_index(cloud: PointCloud) -> KnnIndex:
    return KnnIndex(cloud.points)


@dataclass
class Patch:
    center_index: int
    point_indices: np.ndarray
    raw_points: np.ndarray

    @property
    def center_point(self) -> np.ndarray:
        pos = int(np.flatnonzero(self.point_indices == self.center_index)[0])
        return self.raw_points[pos]

    def __len__(self):
        return len(self.point_indices)


def extract_patch(cloud: PointCloud, index: KnnIndex, center: int, n: int) -> Patch:
    """The ``n`` nearest points to ``cloud.points[center]``, center included."""
    m = len(cloud)
    if not 1 <= n <= m:
        raise InvalidInput(f"patch size {n} outside [1, {m}]")
    if not 0 <= center < m:
        raise InvalidInput(f"center index {center} outside cloud of {m} points")
    idx = index.query(cloud.points[center], n)
    if center not in idx:
        # a coincident duplicate with a lower index can push the center out on the boundary
        idx = np.concatenate([[center], idx[idx != center][: n - 1]])
    return Patch(int(center), idx, cloud.points[idx].copy())


def extract_patches(cloud: PointCloud, index: KnnIndex, centers, n: int, workers: int = 1) -> list[Patch]:
    m = len(cloud)
    if not 1 <= n <= m:
        raise InvalidInput(f"patch size {n} outside [1, {m}]")
    centers = np.asarray(centers, dtype=np.int64)
    all_idx = index.query_many(cloud.points[centers], n, workers=workers)
    patches = []
    for c, idx in zip(centers, all_idx):
        if c not in idx:
            idx = np.concatenate([[c], idx[idx != c][: n - 1]])
        patches.append(Patch(int(c), idx, cloud.points[idx].copy()))
    return patches


@dataclass
class AlignedPatch:
    """A patch mapped to its PCA frame and scaled into the unit ball.

    ``raw = scale * rotation.T @ local + centroid``.  ``center`` is the query
    point expressed in the same local frame.
    """

    local_points: np.ndarray
    rotation: np.ndarray
    centroid: np.ndarray
    scale: float
    center: np.ndarray

    def to_local_direction(self, v) -> np.ndarray:
        return self.rotation @ np.asarray(v, dtype=np.float64)

    def to_world(self, local) -> np.ndarray:
        return self.scale * np.asarray(local) @ self.rotation + self.centroid


def fix_signs(rows: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude component is positive."""
    rows = np.array(rows, dtype=np.float64, copy=True)
    lead = np.argmax(np.abs(rows), axis=-1)
    vals = np.take_along_axis(rows, lead[..., None], axis=-1)
    return np.where(vals < 0, -rows, rows)


def pca_frame(centered: np.ndarray) -> np.ndarray:
    """Rows are covariance eigenvectors in descending eigenvalue order, det +1."""
    cov = centered.T @ centered / len(centered)
    _, vecs = np.linalg.eigh(cov)
    rot = fix_signs(vecs[:, ::-1].T)
    if np.linalg.det(rot) < 0:
        rot[2] = -rot[2]
    return rot


def align_patch(patch: Patch | np.ndarray, center=None) -> AlignedPatch:
    """Center on the centroid, rotate into the PCA frame, scale to the unit ball."""
    if isinstance(patch, Patch):
        raw = patch.raw_points
        center = patch.center_point if center is None else center
    else:
        raw = np.asarray(patch, dtype=np.float64)
        center = raw[0] if center is None else center
    if raw.ndim != 2 or raw.shape[1] != 3 or len(raw) < 1:
        raise InvalidInput("patch must be a non-empty (N, 3) array")
    center = np.asarray(center, dtype=np.float64)
    centroid = raw.mean(axis=0)
    centered = raw - centroid
    radius = float(np.max(np.linalg.norm(centered, axis=1)))
    if radius == 0.0:
        return AlignedPatch(np.zeros_like(raw), np.eye(3), centroid, 1.0, np.zeros(3))
    rot = pca_frame(centered)
    local = centered @ rot.T
    scale = float(np.max(np.linalg.norm(local, axis=1)))
    return AlignedPatch(local / scale, rot, centroid, scale, rot @ (center - centroid) / scale)


def unalign_normal(predicted, aligned: AlignedPatch) -> np.ndarray:
    """Map a local-frame normal back to world orientation and normalize it."""
    p = np.asarray(predicted, dtype=np.float64)
    if not np.any(p):
        raise DegeneratePrediction("predicted normal is the zero vector")
    world = aligned.rotation.T @ p
    return world / np.linalg.norm(world)
