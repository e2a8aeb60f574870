"""Classical PCA normal estimation over k-nearest-neighbor neighborhoods."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateNeighborhood, InvalidInput
from .geometry import KnnIndex, PointCloud, build_knn_index, fix_signs

PCA_SCALES = {"small": 18, "medium": 112, "large": 450}
RANK_TOL = 1e-12


def _check_k(k: int, m: int):
    if k < 3:
        raise InvalidInput(f"PCA needs k >= 3, got {k}")
    if k > m:
        raise InvalidInput(f"k={k} exceeds cloud size {m}")


def neighborhood_normals(neighborhoods: np.ndarray) -> np.ndarray:
    """Smallest-eigenvalue eigenvector of each ``(k, 3)`` neighborhood covariance.

    Covariance is centered at the neighborhood centroid.  Signs follow the
    largest-magnitude-component-positive rule.
    """
    nb = np.asarray(neighborhoods, dtype=np.float64)
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", centered, centered) / nb.shape[1]
    vals, vecs = np.linalg.eigh(cov)
    # collinear or coincident points leave the normal undetermined
    bad = vals[:, 1] <= RANK_TOL * np.maximum(vals[:, 2], np.finfo(float).tiny)
    if np.any(bad):
        raise DegenerateNeighborhood(f"{int(bad.sum())} rank-deficient neighborhood(s)")
    return fix_signs(vecs[:, :, 0])


def pca_normal(cloud: PointCloud, index: KnnIndex, point: int, k: int) -> np.ndarray:
    _check_k(k, len(cloud))
    idx = index.query(cloud.points[point], k)
    return neighborhood_normals(cloud.points[idx][None])[0]


def pca_normals(cloud: PointCloud, k: int, indices=None, index: KnnIndex | None = None, workers: int = 1) -> np.ndarray:
    """PCA normals for ``indices`` (default: every point)."""
    _check_k(k, len(cloud))
    index = index or build_knn_index(cloud)
    indices = np.arange(len(cloud)) if indices is None else np.asarray(indices, dtype=np.int64)
    nbr = index.query_many(cloud.points[indices], k, workers=workers)
    return neighborhood_normals(cloud.points[nbr])
