"""Training objectives.

Batched losses average over the patches in a batch; the per-patch forms
match the single-patch definitions exactly when ``B == 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegeneratePrediction, InvalidInput, ShapeError

COS_EPS = 1e-8


@dataclass
class LossBreakdown:
    l_cos: float = 0.0
    l_weight: float = 0.0
    l_cont: float = 0.0
    total: float = 0.0

    def as_row(self) -> dict:
        return {"l_cos": self.l_cos, "l_weight": self.l_weight, "l_cont": self.l_cont, "total": self.total}


def weight_targets(n_center, n_neighbors) -> np.ndarray:
    """Squared cosine between each neighbor's normal and the center normal.

    ``n_center`` is ``(3,)`` or ``(B, 3)``; ``n_neighbors`` is ``(N, 3)`` or
    ``(B, N, 3)``.  Values lie in [0, 1] and ignore normal orientation.
    """
    c = np.asarray(n_center, dtype=np.float64)
    nb = np.asarray(n_neighbors, dtype=np.float64)
    if nb.shape[:-2] != c.shape[:-1] or c.shape[-1] != 3 or nb.shape[-1] != 3:
        raise ShapeError(f"center normals {c.shape} and neighbor normals {nb.shape} do not pair up")
    d = np.sum(nb * c[..., None, :], axis=-1)
    return d * d


def weight_loss(w_pred, targets) -> Tensor:
    """``sum_j (w_j - t_j)^2`` per patch, averaged over the batch.

    ``w_pred`` is ``(N,)`` or ``(B, N)``; ``targets`` from :func:`weight_targets`.
    """
    w = ad.as_tensor(w_pred)
    t = np.asarray(targets, dtype=w.data.dtype)
    if w.shape != t.shape:
        raise ShapeError(f"weights {w.shape} and targets {t.shape} differ")
    per_point = ad.square(ad.sub(w, Tensor(t)))
    if w.ndim == 1:
        return ad.sum(per_point)
    return ad.mean(ad.sum(per_point, axis=-1))


def _joint_embeddings(patch_z, normal_z):
    zi, zj = ad.as_tensor(patch_z), ad.as_tensor(normal_z)
    if zi.ndim != 2 or zi.shape != zj.shape:
        raise ShapeError(f"paired embeddings must share shape (B, d), got {zi.shape} and {zj.shape}")
    b = zi.shape[0]
    if b < 2:
        raise InvalidInput("contrastive loss needs B >= 2 pairs")
    if np.any(np.linalg.norm(zi.data, axis=1) == 0) or np.any(np.linalg.norm(zj.data, axis=1) == 0):
        raise InvalidInput("contrastive embeddings must be non-zero")
    return ad.concat([zi, zj], axis=0), b


def _row_losses(z: Tensor, b: int, tau: float) -> Tensor:
    """Per-anchor cross entropy for all 2B anchors of the joint list."""
    u = ad.l2_normalize(z, COS_EPS)
    logits = ad.scale(ad.matmul(u, ad.transpose(u)), 1.0 / tau)
    n2 = 2 * b
    not_self = 1.0 - np.eye(n2)
    positive = np.zeros((n2, n2))
    positive[np.arange(b), np.arange(b) + b] = 1.0
    positive[np.arange(b) + b, np.arange(b)] = 1.0
    denom = ad.sum(ad.mul(ad.exp(logits), Tensor(not_self)), axis=1)
    pos_logit = ad.sum(ad.mul(logits, Tensor(positive)), axis=1)
    return ad.sub(ad.log(denom), pos_logit)


def pair_contrastive_loss(patch_z, normal_z, tau: float, anchor: int, positive: int) -> Tensor:
    """Temperature-scaled cross entropy of one (anchor, positive) pair.

    Indices address the joint list ``[patch_z; normal_z]`` of 2B embeddings.
    """
    z, b = _joint_embeddings(patch_z, normal_z)
    n2 = 2 * b
    if not (0 <= anchor < n2 and 0 <= positive < n2) or anchor == positive:
        raise InvalidInput(f"invalid anchor/positive ({anchor}, {positive}) for 2B={n2}")
    u = ad.l2_normalize(z, COS_EPS)
    row = ad.scale(ad.matmul(ad.take(u, slice(anchor, anchor + 1)), ad.transpose(u)), 1.0 / tau)
    row = ad.reshape(row, (n2,))
    mask = np.ones(n2)
    mask[anchor] = 0.0
    sel = np.zeros(n2)
    sel[positive] = 1.0
    return ad.sub(ad.log(ad.sum(ad.mul(ad.exp(row), Tensor(mask)))), ad.sum(ad.mul(row, Tensor(sel))))


def batch_contrastive_loss(patch_z, normal_z, tau: float, normalization: str = "2B") -> Tensor:
    """Sum of both directions of every patch-normal pair, averaged.

    ``normalization="2B"`` divides by the number of terms (2B); ``"B"``
    divides by the number of pairs.
    """
    z, b = _joint_embeddings(patch_z, normal_z)
    total = ad.sum(_row_losses(z, b, tau))
    if normalization == "2B":
        return ad.scale(total, 1.0 / (2 * b))
    if normalization == "B":
        return ad.scale(total, 1.0 / b)
    raise InvalidInput(f"unknown normalization {normalization!r}")


def cos_loss(n_pred, n_gt) -> Tensor:
    """``1 - (n'.n)^2`` with ``n'`` normalized first; batch mean for ``(B, 3)``."""
    p = ad.as_tensor(n_pred)
    gt = np.asarray(n_gt, dtype=p.data.dtype)
    if p.shape != gt.shape or p.shape[-1] != 3:
        raise ShapeError(f"predicted {p.shape} and ground-truth {gt.shape} normals differ")
    if np.any(np.linalg.norm(p.data, axis=-1) == 0):
        raise DegeneratePrediction("predicted normal is the zero vector")
    c = ad.dot(ad.l2_normalize(p, COS_EPS), Tensor(gt))
    per = ad.add_scalar(ad.scale(ad.square(c), -1.0), 1.0)
    return ad.mean(per) if p.ndim > 1 else ad.reshape(per, ())


def pretrain_loss(l_cont, l_weight, alpha: float = 1.0):
    return _combine(l_cont, l_weight, alpha)


def downstream_loss(l_cos, l_weight, alpha: float = 1.0):
    return _combine(l_cos, l_weight, alpha)


def _combine(main, l_weight, alpha):
    if isinstance(main, Tensor) or isinstance(l_weight, Tensor):
        if alpha == 0 or l_weight is None:
            return ad.as_tensor(main)
        return ad.add(ad.as_tensor(main), ad.scale(l_weight, alpha))
    return float(main) + float(alpha) * float(l_weight or 0.0)
