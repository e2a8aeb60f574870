"""Dual-branch network: EdgeConv point encoder, weight regressor, normal
encoder, projection heads and normal regressor.

All batched tensors are laid out ``(B, N, C)``: batch of patches, points per
patch, channels.  Patches never interact inside the encoder, so a batch is
equivalent to running its patches one at a time.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import DegeneratePrediction, InvalidInput, ShapeError

POINT_BRANCH = ("point_encoder.", "weight_regressor.", "point_head.")
NORMAL_BRANCH = ("normal_encoder.", "normal_head.")
FINETUNE_GROUP = ("point_encoder.", "weight_regressor.", "normal_regressor.")

# local coordinates plus offsets from the query point
INPUT_CHANNELS = 6


@dataclass
class HyperParams:
    k_graph: int = 20
    patch_size: int = 700
    feature_dim: int = 1024
    proj_dim: int = 256
    edge_widths: tuple = (64, 128, 256)
    weight_widths: tuple = (256, 64)
    normal_widths: tuple = (64, 256)
    head_hidden: int = 512
    regressor_widths: tuple = (512, 256)
    tau: float = 0.1
    alpha: float = 1.0
    leaky_slope: float = 0.2

    def __post_init__(self):
        for name in ("edge_widths", "weight_widths", "normal_widths", "regressor_widths"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        ints = [self.k_graph, self.patch_size, self.feature_dim, self.proj_dim, self.head_hidden,
                *self.edge_widths, *self.weight_widths, *self.normal_widths, *self.regressor_widths]
        if min(ints) < 1 or self.tau <= 0 or self.alpha < 0:
            raise InvalidInput("hyper-parameters must be positive")
        if not self.edge_widths:
            raise InvalidInput("at least one EdgeConv layer is required")
        if self.k_graph >= self.patch_size:
            raise InvalidInput(f"k_graph={self.k_graph} must be smaller than patch_size={self.patch_size}")

    @classmethod
    def paper(cls, **overrides):
        return replace(cls(), **overrides)

    @classmethod
    def desk(cls, **overrides):
        base = cls(k_graph=16, patch_size=128, feature_dim=128, proj_dim=64,
                   edge_widths=(32, 64, 64), weight_widths=(64, 32), normal_widths=(64, 128),
                   head_hidden=128, regressor_widths=(64, 32))
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict):
        return cls(**d)


@dataclass
class PatchFeatures:
    """Point-wise features ``F`` (B, N, feature_dim) and their pooled summary."""

    pointwise: Tensor
    max_pooled: Tensor = field(default=None)
    mean_pooled: Tensor = field(default=None)
    global_feature: Tensor = field(default=None)


def knn_graph(x: np.ndarray, k: int) -> np.ndarray:
    """Per-patch k nearest neighbors in feature space, self first.

    ``x`` is ``(B, N, d)``; returns ``(B, N, min(k, N))`` indices sorted by
    distance with ties broken by index.
    """
    if k < 1:
        raise InvalidInput("k_graph must be at least 1")
    _, n, _ = x.shape
    k = min(k, n)
    sq = np.sum(x * x, axis=-1)
    d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * np.einsum("bnd,bmd->bnm", x, x)
    d2 = np.maximum(d2, 0.0)
    diag = np.arange(n)
    d2[:, diag, diag] = -1.0
    return np.argsort(d2, axis=-1, kind="stable")[:, :, :k]


def edgeconv_layer(x: Tensor, w: Tensor, b: Tensor | None, k: int, slope: float = 0.2,
                   graph_space: np.ndarray | None = None) -> Tensor:
    """``x_i' = max_j leaky(W [x_i, x_j - x_i] + b)`` over the k-NN graph.

    The graph is built in ``graph_space`` if given, else in the space of
    ``x`` itself (dynamic graph).  ``W`` stacks the center block on top of
    the edge block.  Because ``W [x_i, x_j - x_i] = (W_c - W_e) x_i + W_e
    x_j`` and leaky-ReLU is monotone, the max over neighbors is taken on the
    per-point projections ``W_e x_j`` before the activation; values equal
    :func:`edgeconv_reference`.
    """
    x = ad.as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"edgeconv expects (B, N, d), got {x.shape}")
    if k < 1:
        raise InvalidInput("k_graph must be at least 1")
    d = x.shape[-1]
    if w.shape[0] != 2 * d:
        raise ShapeError(f"edgeconv weight {w.shape} does not take 2 x {d} inputs")
    idx = knn_graph(x.data if graph_space is None else graph_space, k)
    w_center = ad.take(w, slice(0, d))
    w_edge = ad.take(w, slice(d, 2 * d))
    own = ad.linear(x, ad.sub(w_center, w_edge), b)
    nbr = ad.gather_max(ad.matmul(x, w_edge), idx)
    return ad.leaky_relu(ad.add(own, nbr), slope)


def edgeconv_reference(x: Tensor, w: Tensor, b: Tensor | None, k: int, slope: float = 0.2,
                       graph_space: np.ndarray | None = None) -> Tensor:
    """Literal form: materialize every edge feature, activate, max-pool."""
    x = ad.as_tensor(x)
    idx = knn_graph(x.data if graph_space is None else graph_space, k)
    center = ad.expand(x, axis=2, reps=idx.shape[-1])
    edges = ad.sub(ad.gather(x, idx), center)
    h = ad.linear(ad.concat([center, edges], axis=-1), w, b)
    return ad.max_pool(ad.leaky_relu(h, slope), axis=2)


def _init_linear(store: ParamStore, rng, name: str, fan_in: int, fan_out: int, slope: float, bias=True):
    std = np.sqrt(2.0 / ((1.0 + slope * slope) * fan_in))
    store.add(f"{name}.W", rng.normal(0.0, std, size=(fan_in, fan_out)))
    if bias:
        store.add(f"{name}.b", np.zeros(fan_out))


def patch_inputs(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Per-point input channels: local position and offset from the query point."""
    return np.concatenate([points, points - centers[:, None, :]], axis=-1)


def stack_aligned(aligned) -> tuple[np.ndarray, np.ndarray]:
    """Stack AlignedPatch objects into ``(B, N, 3)`` points and ``(B, 3)`` centers."""
    sizes = {len(a.local_points) for a in aligned}
    if len(sizes) != 1:
        raise ShapeError(f"patches in a batch must share N, got sizes {sorted(sizes)}")
    return (np.stack([a.local_points for a in aligned]),
            np.stack([a.center for a in aligned]))


class WeightedNormalNet:
    """Parameters and forward maps of every component."""

    def __init__(self, hp: HyperParams, seed: int = 0, dtype=np.float64):
        self.hp = hp
        self.params = ParamStore(dtype)
        rng = np.random.default_rng(seed)
        s = hp.leaky_slope
        d_in = INPUT_CHANNELS
        for i, width in enumerate(hp.edge_widths):
            _init_linear(self.params, rng, f"point_encoder.edge{i}", 2 * d_in, width, s)
            d_in = width
        _init_linear(self.params, rng, "point_encoder.point", sum(hp.edge_widths), hp.feature_dim, s)
        _init_linear(self.params, rng, "point_encoder.pool", 2 * hp.feature_dim, hp.feature_dim, s, bias=False)
        self._mlp_init(rng, "weight_regressor", 2 * hp.feature_dim, (*hp.weight_widths, 1))
        self._mlp_init(rng, "point_head", hp.feature_dim, (hp.head_hidden, hp.proj_dim))
        self._mlp_init(rng, "normal_encoder", 3, (*hp.normal_widths, hp.feature_dim))
        self._mlp_init(rng, "normal_head", hp.feature_dim, (hp.head_hidden, hp.proj_dim))
        self._mlp_init(rng, "normal_regressor", hp.feature_dim, (*hp.regressor_widths, 3))

    def _mlp_init(self, rng, prefix, d_in, widths):
        for i, width in enumerate(widths):
            _init_linear(self.params, rng, f"{prefix}.l{i}", d_in, width, self.hp.leaky_slope)
            d_in = width

    def _mlp(self, prefix: str, x: Tensor, final_activation: bool = False) -> Tensor:
        names = self.params.names(prefix + ".l")
        depth = len(names) // 2
        for i in range(depth):
            x = ad.linear(x, self.params[f"{prefix}.l{i}.W"], self.params[f"{prefix}.l{i}.b"])
            if i < depth - 1 or final_activation:
                x = ad.leaky_relu(x, self.hp.leaky_slope)
        return x

    def group_names(self, prefixes) -> list[str]:
        return self.params.names(tuple(prefixes))

    # -------------------------------------------------------------- point branch

    def encode(self, points: np.ndarray, centers: np.ndarray) -> PatchFeatures:
        """Point-wise features for a batch of aligned patches."""
        points = np.asarray(points, dtype=self.params.dtype)
        centers = np.asarray(centers, dtype=self.params.dtype)
        if points.ndim != 3 or points.shape[-1] != 3 or centers.shape != (points.shape[0], 3):
            raise ShapeError(f"bad patch batch shapes {points.shape}, {centers.shape}")
        p = self.params
        x = Tensor(patch_inputs(points, centers))
        space = points
        outs = []
        for i in range(len(self.hp.edge_widths)):
            x = edgeconv_layer(x, p[f"point_encoder.edge{i}.W"], p[f"point_encoder.edge{i}.b"],
                               self.hp.k_graph, self.hp.leaky_slope, graph_space=space)
            outs.append(x)
            space = None
        h = ad.linear(ad.concat(outs, axis=-1), p["point_encoder.point.W"], p["point_encoder.point.b"])
        return self.pool(ad.leaky_relu(h, self.hp.leaky_slope))

    def encode_patch(self, aligned) -> PatchFeatures:
        pts, ctr = stack_aligned([aligned])
        return self.encode(pts, ctr)

    def pool(self, pointwise: Tensor) -> PatchFeatures:
        """Max- and mean-pool over points, concatenate, map back to feature_dim."""
        mx = ad.max_pool(pointwise, axis=1)
        mn = ad.mean_pool(pointwise, axis=1)
        g = ad.matmul(ad.concat([mx, mn], axis=-1), self.params["point_encoder.pool.W"])
        return PatchFeatures(pointwise, mx, mn, g)

    def regress_weights(self, features: PatchFeatures) -> Tensor:
        """Per-point weights in [0, 1], shape ``(B, N)``.

        Each point sees its own feature row next to the unweighted patch
        summary, so relevance can be judged relative to the whole patch.
        """
        f = features.pointwise
        context = ad.expand(features.global_feature, axis=1, reps=f.shape[1])
        out = ad.sigmoid(self._mlp("weight_regressor", ad.concat([f, context], axis=-1)))
        return ad.reshape(out, f.shape[:2])

    def apply_weights(self, features: PatchFeatures, w) -> PatchFeatures:
        w = ad.as_tensor(w)
        if w.shape != features.pointwise.shape[:2]:
            raise ShapeError(f"weights {w.shape} do not match features {features.pointwise.shape}")
        return self.pool(ad.scale_rows(features.pointwise, w))

    def project_patch(self, global_feature: Tensor) -> Tensor:
        return self._mlp("point_head", global_feature)

    # -------------------------------------------------------------- normal branch

    def encode_normal(self, normals) -> Tensor:
        n = np.asarray(normals, dtype=self.params.dtype)
        if n.ndim == 1:
            n = n[None, :]
        if n.shape[-1] != 3 or not np.all(np.abs(np.linalg.norm(n, axis=-1) - 1.0) <= 1e-6):
            raise InvalidInput("normal encoder expects unit 3-vectors")
        return self._mlp("normal_encoder", Tensor(n))

    def project_normal(self, normal_feature: Tensor) -> Tensor:
        return self._mlp("normal_head", normal_feature)

    # -------------------------------------------------------------- regression

    def regress_normal(self, global_feature: Tensor) -> Tensor:
        """Raw (unnormalized) local-frame normals, shape ``(B, 3)``."""
        return self._mlp("normal_regressor", global_feature)

    def weighted_features(self, points, centers, use_weights: bool = True):
        """Encoder, weight regressor and weighted pooling; returns (features, weights or None)."""
        feats = self.encode(points, centers)
        if not use_weights:
            return feats, None
        w = self.regress_weights(feats)
        return self.apply_weights(feats, w), w

    def predict_local(self, points, centers, use_weights: bool = True) -> np.ndarray:
        """Unit local-frame normals for a batch; no graph is recorded."""
        with ad.no_grad():
            feats, _ = self.weighted_features(points, centers, use_weights)
            raw = self.regress_normal(feats.global_feature).data
        norms = np.linalg.norm(raw, axis=-1, keepdims=True)
        if np.any(norms == 0):
            raise DegeneratePrediction("normal regressor produced a zero vector")
        return raw / norms
