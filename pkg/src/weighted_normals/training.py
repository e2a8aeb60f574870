"""Two-stage training: contrastive pre-training, then weighted normal regression."""

from __future__ import annotations

import configparser
import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import Diverged, InvalidInput, NumericError
from .geometry import PointCloud, align_patch, build_knn_index, extract_patch, fix_signs
from .losses import (LossBreakdown, batch_contrastive_loss, cos_loss, downstream_loss,
                     pretrain_loss, weight_loss, weight_targets)
from .network import FINETUNE_GROUP, NORMAL_BRANCH, POINT_BRANCH, HyperParams, WeightedNormalNet

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

ABLATIONS = {
    1: {"use_cont": False, "use_weight": False},
    2: {"use_cont": True, "use_weight": False},
    3: {"use_cont": False, "use_weight": True},
    4: {"use_cont": True, "use_weight": True},
}


LR_SCHEDULES = ("constant", "cosine")


def scheduled_lr(config, epoch: int) -> float:
    """Learning rate for a 1-based epoch; cosine anneals towards zero over the run."""
    if config.lr_schedule == "cosine":
        return config.learning_rate * 0.5 * (1.0 + np.cos(np.pi * (epoch - 1) / config.epochs))
    return config.learning_rate


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 0.001
    alpha: float = 1.0
    tau: float = 0.1
    seed: int = 0
    patch_size: int = 128
    k_graph: int = 16
    scale_preset: str = "desk"
    use_cont: bool = True
    use_weight: bool = True
    patches_per_epoch: int = 100
    contrastive_normalization: str = "2B"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise InvalidInput(f"unknown stage {self.stage!r}")
        if self.epochs < 1:
            raise InvalidInput("epochs must be >= 1")
        if self.batch_size < 1 or (self.use_cont and self.stage == "pretrain" and self.batch_size < 2):
            raise InvalidInput("contrastive pre-training needs batch_size >= 2")
        if self.scale_preset not in ("desk", "paper"):
            raise InvalidInput(f"unknown scale preset {self.scale_preset!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise InvalidInput(f"unknown lr_schedule {self.lr_schedule!r}; expected one of {LR_SCHEDULES}")

    @classmethod
    def preset(cls, stage: str, scale: str = "desk", **overrides):
        if scale == "paper":
            base = cls(stage=stage, epochs=50 if stage == "pretrain" else 100, batch_size=32,
                       patch_size=700, k_graph=20, scale_preset="paper", patches_per_epoch=100000)
        else:
            base = cls(stage=stage, epochs=20 if stage == "pretrain" else 40)
        return replace(base, **overrides)

    def to_dict(self):
        return asdict(self)


def hyperparams_for(config: TrainConfig, **overrides) -> HyperParams:
    maker = HyperParams.paper if config.scale_preset == "paper" else HyperParams.desk
    return maker(patch_size=config.patch_size, k_graph=config.k_graph, tau=config.tau,
                 alpha=config.alpha, **overrides)


# ---------------------------------------------------------------- config files

_BOOL = {"true": True, "false": False, "yes": True, "no": False, "1": True, "0": False}


def _coerce(value: str, current):
    if isinstance(current, bool):
        if value.lower() not in _BOOL:
            raise InvalidInput(f"not a boolean: {value!r}")
        return _BOOL[value.lower()]
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    return value


def apply_overrides(obj, pairs: dict):
    """Return a copy of a dataclass with string-valued overrides coerced to field types."""
    known = {f.name for f in fields(obj)}
    updates = {}
    for key, value in pairs.items():
        key = key.replace("-", "_")
        if key not in known:
            raise InvalidInput(f"unknown setting {key!r} for {type(obj).__name__}")
        updates[key] = _coerce(str(value), getattr(obj, key))
    return replace(obj, **updates)


def read_config(path) -> dict[str, dict[str, str]]:
    """Parse an INI-style ``key = value`` file with ``[train]`` / ``[model]`` sections."""
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    return {section: dict(parser[section]) for section in parser.sections()}


# ---------------------------------------------------------------- patch sampling


@dataclass
class PatchBatch:
    points: np.ndarray  # (B, N, 3) aligned local coordinates
    centers: np.ndarray  # (B, 3) query point in the local frame
    normals: np.ndarray  # (B, 3) center ground-truth normal in the local frame
    targets: np.ndarray  # (B, N) squared-cosine weight targets

    def __len__(self):
        return len(self.points)


class PatchDataset:
    """Training clouds plus their k-NN indices; draws aligned patch samples."""

    def __init__(self, clouds, patch_size: int):
        self.clouds = list(clouds)
        if not self.clouds:
            raise InvalidInput("dataset has no clouds")
        for c in self.clouds:
            if c.normals is None:
                raise InvalidInput("training clouds need ground-truth normals")
            if len(c) < patch_size:
                raise InvalidInput(f"cloud of {len(c)} points is smaller than patch size {patch_size}")
        self.patch_size = patch_size
        self.indices = [build_knn_index(c) for c in self.clouds]
        self.offsets = np.cumsum([0] + [len(c) for c in self.clouds])

    @property
    def total_points(self) -> int:
        return int(self.offsets[-1])

    def epoch_centers(self, seed: int, epoch: int, budget: int) -> np.ndarray:
        """Global center ids for one epoch, sampled without replacement and shuffled."""
        rng = np.random.default_rng([seed, epoch])
        n = min(budget, self.total_points)
        return rng.choice(self.total_points, size=n, replace=False)

    def sample(self, global_id: int):
        ci = int(np.searchsorted(self.offsets, global_id, side="right") - 1)
        cloud, center = self.clouds[ci], int(global_id - self.offsets[ci])
        patch = extract_patch(cloud, self.indices[ci], center, self.patch_size)
        aligned = align_patch(patch)
        n_center = cloud.normals[center]
        return (aligned.local_points, aligned.center, aligned.rotation @ n_center,
                weight_targets(n_center, cloud.normals[patch.point_indices]))

    def batch(self, ids) -> PatchBatch:
        parts = [self.sample(i) for i in ids]
        return PatchBatch(*(np.stack(p) for p in zip(*parts)))


def batches(ids, size: int, min_size: int = 1):
    for start in range(0, len(ids), size):
        chunk = ids[start:start + size]
        if len(chunk) >= min_size:
            yield chunk


# ---------------------------------------------------------------- checkpoints


@dataclass
class ModelCheckpoint:
    model: WeightedNormalNet
    configs: dict = field(default_factory=dict)  # stage -> TrainConfig dict
    history: list = field(default_factory=list)
    use_weight: bool = True
    optimizers: dict = field(default_factory=dict)  # name -> Adam
    timestamp: float | None = None

    @property
    def hp(self) -> HyperParams:
        return self.model.hp

    def _payload(self, deterministic: bool):
        arrays = dict(self.model.params.arrays())
        opt_meta = {}
        for name, opt in sorted(self.optimizers.items()):
            arrays.update(opt.state_arrays(f"adam.{name}"))
            opt_meta[name] = {"t": opt.t, "names": opt.names, "lr": opt.lr, "beta1": opt.beta1,
                              "beta2": opt.beta2, "eps": opt.eps}
        meta = {"version": CHECKPOINT_VERSION, "hyperparams": self.hp.to_dict(), "configs": self.configs,
                "history": self.history, "use_weight": self.use_weight, "optimizers": opt_meta,
                "leaky_slope": self.hp.leaky_slope}
        if not deterministic and self.timestamp is not None:
            meta["timestamp"] = self.timestamp
        return arrays, meta

    def save(self, path, deterministic: bool = False):
        arrays, meta = self._payload(deterministic)
        ad.save_tensors(path, arrays, meta)

    def digest(self) -> str:
        """SHA-256 of parameters and metadata, timestamp excluded."""
        arrays, meta = self._payload(deterministic=True)
        h = hashlib.sha256(json.dumps(meta, sort_keys=True).encode())
        for name, arr in arrays.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        arrays, meta = ad.load_tensors(path)
        if meta.get("version") != CHECKPOINT_VERSION:
            raise InvalidInput(f"unsupported checkpoint version {meta.get('version')}")
        hp = HyperParams.from_dict(meta["hyperparams"])
        model = WeightedNormalNet(hp)
        model.params.load_arrays({k: v for k, v in arrays.items() if not k.startswith("adam.")})
        optimizers = {}
        for name, om in meta["optimizers"].items():
            opt = ad.Adam(model.params, om["names"], om["lr"], om["beta1"], om["beta2"], om["eps"])
            opt.load_state_arrays(f"adam.{name}", arrays, om["t"])
            optimizers[name] = opt
        return cls(model, meta["configs"], meta["history"], meta["use_weight"], optimizers,
                   meta.get("timestamp"))

    def clone(self) -> "ModelCheckpoint":
        return copy.deepcopy(self)


# ---------------------------------------------------------------- training loops


def _history_row(stage, epoch, br: LossBreakdown, wall, deterministic):
    row = {"stage": stage, "epoch": epoch, "split": "train"}
    row.update(br.as_row())
    row["wall_time"] = 0.0 if deterministic else round(wall, 3)
    return row


def _mean_breakdown(parts: list[LossBreakdown]) -> LossBreakdown:
    return LossBreakdown(*(float(np.mean([getattr(p, k) for p in parts]))
                           for k in ("l_cos", "l_weight", "l_cont", "total")))


def canonical_normals(n: np.ndarray) -> np.ndarray:
    """Resolve the sign ambiguity of unoriented normals before encoding them."""
    return fix_signs(n)


def pretrain_step(model: WeightedNormalNet, batch: PatchBatch, config: TrainConfig):
    """Forward pass of the pre-training objective; returns (loss tensor, breakdown)."""
    feats, w = model.weighted_features(batch.points, batch.centers, use_weights=config.use_weight)
    z_patch = model.project_patch(feats.global_feature)
    z_normal = model.project_normal(model.encode_normal(canonical_normals(batch.normals)))
    l_cont = batch_contrastive_loss(z_patch, z_normal, config.tau, config.contrastive_normalization)
    l_w = weight_loss(w, batch.targets) if config.use_weight else None
    total = pretrain_loss(l_cont, l_w, config.alpha if config.use_weight else 0.0)
    br = LossBreakdown(0.0, l_w.item() if l_w is not None else 0.0, l_cont.item(), total.item())
    return total, br


def finetune_step(model: WeightedNormalNet, batch: PatchBatch, config: TrainConfig):
    feats, w = model.weighted_features(batch.points, batch.centers, use_weights=config.use_weight)
    raw = model.regress_normal(feats.global_feature)
    l_cos = cos_loss(raw, batch.normals)
    l_w = weight_loss(w, batch.targets) if config.use_weight else None
    total = downstream_loss(l_cos, l_w, config.alpha if config.use_weight else 0.0)
    br = LossBreakdown(l_cos.item(), l_w.item() if l_w is not None else 0.0, 0.0, total.item())
    return total, br


def _run(ckpt: ModelCheckpoint, dataset: PatchDataset, config: TrainConfig, step_fn, optimizers,
         deterministic: bool, log_path=None, min_batch: int = 1):
    model = ckpt.model
    params = model.params
    good = {n: p.data.copy() for n, p in params.items()}
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        ids = dataset.epoch_centers(config.seed, epoch if config.stage == "pretrain" else 10_000 + epoch,
                                    config.patches_per_epoch)
        for opt in optimizers:
            opt.lr = scheduled_lr(config, epoch)
        parts = []
        for chunk in batches(ids, config.batch_size, min_batch):
            batch = dataset.batch(chunk)
            params.zero_grad()
            try:
                loss, br = step_fn(model, batch, config)
                if not np.isfinite(br.total):
                    raise NumericError("non-finite loss")
                loss.backward()
            except NumericError as exc:
                params.load_arrays(good)
                raise Diverged(f"{config.stage} diverged at epoch {epoch}: {exc}", ckpt) from exc
            for opt in optimizers:
                opt.step()
            parts.append(br)
        good = {n: p.data.copy() for n, p in params.items()}
        row = _history_row(config.stage, epoch, _mean_breakdown(parts), time.perf_counter() - t0, deterministic)
        ckpt.history.append(row)
        log.info("%s epoch %d: total=%.5f cos=%.5f weight=%.5f cont=%.5f", config.stage, epoch,
                 row["total"], row["l_cos"], row["l_weight"], row["l_cont"])
        if log_path is not None:
            append_log(log_path, row)
    return ckpt


LOG_COLUMNS = ("stage", "epoch", "split", "l_cos", "l_weight", "l_cont", "total", "wall_time")


def append_log(path, row: dict):
    path = Path(path)
    new = not path.exists()
    with open(path, "a") as fh:
        if new:
            fh.write("\t".join(LOG_COLUMNS) + "\n")
        fh.write("\t".join(str(row[c]) for c in LOG_COLUMNS) + "\n")


def pretrain(clouds, config: TrainConfig, hp: HyperParams | None = None, deterministic: bool = False,
             log_path=None) -> ModelCheckpoint:
    """Contrastive pre-training with separate Adam optimizers per branch."""
    if config.stage != "pretrain":
        config = replace(config, stage="pretrain")
    if not config.use_cont:
        raise InvalidInput("pre-training requires the contrastive loss (use_cont=True)")
    if config.batch_size < 2:
        raise InvalidInput("contrastive pre-training needs batch_size >= 2")
    hp = hp or hyperparams_for(config)
    dataset = clouds if isinstance(clouds, PatchDataset) else PatchDataset(clouds, hp.patch_size)
    model = WeightedNormalNet(hp, seed=config.seed)
    point_names = model.group_names(POINT_BRANCH)
    if not config.use_weight:
        point_names = [n for n in point_names if not n.startswith("weight_regressor.")]
    kw = dict(lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    opts = {"point": ad.Adam(model.params, point_names, **kw),
            "normal": ad.Adam(model.params, model.group_names(NORMAL_BRANCH), **kw)}
    ckpt = ModelCheckpoint(model, {"pretrain": config.to_dict()}, [], config.use_weight, opts,
                           None if deterministic else time.time())
    return _run(ckpt, dataset, config, pretrain_step, list(opts.values()), deterministic, log_path, min_batch=2)


def finetune(clouds, checkpoint: ModelCheckpoint | None, config: TrainConfig, hp: HyperParams | None = None,
             deterministic: bool = False, log_path=None) -> ModelCheckpoint:
    """Weighted normal regression on top of a pre-trained (or fresh) encoder."""
    if config.stage != "finetune":
        config = replace(config, stage="finetune")
    if checkpoint is None:
        hp = hp or hyperparams_for(config)
        ckpt = ModelCheckpoint(WeightedNormalNet(hp, seed=config.seed), {}, [], config.use_weight, {},
                               None if deterministic else time.time())
    else:
        ckpt = checkpoint.clone()
        ckpt.optimizers = {}
        ckpt.use_weight = config.use_weight
        if not deterministic:
            ckpt.timestamp = time.time()
    ckpt.configs["finetune"] = config.to_dict()
    dataset = clouds if isinstance(clouds, PatchDataset) else PatchDataset(clouds, ckpt.hp.patch_size)
    names = ckpt.model.group_names(FINETUNE_GROUP)
    if not config.use_weight:
        names = [n for n in names if not n.startswith("weight_regressor.")]
    opt = ad.Adam(ckpt.model.params, names, lr=config.learning_rate, beta1=config.beta1,
                  beta2=config.beta2, eps=config.adam_eps)
    ckpt.optimizers = {"finetune": opt}
    return _run(ckpt, dataset, config, finetune_step, [opt], deterministic, log_path)


def train(clouds, pre_config: TrainConfig | None, fine_config: TrainConfig, hp=None,
          deterministic: bool = False, log_path=None) -> ModelCheckpoint:
    """Full pipeline; pre-training is skipped when ``use_cont`` is off."""
    ckpt = None
    pretraining = fine_config.use_cont and pre_config is not None
    hp = hp or hyperparams_for(pre_config if pretraining else fine_config)
    dataset = clouds if isinstance(clouds, PatchDataset) else PatchDataset(clouds, hp.patch_size)
    if pretraining:
        ckpt = pretrain(dataset, pre_config, hp, deterministic, log_path)
    return finetune(dataset, ckpt, fine_config, hp, deterministic, log_path)


# epoch streams use ids 1.. (pretrain) and 10_001.. (finetune)
PROBE_STREAM = 20_000


def probe_ids(dataset: PatchDataset, seed: int, count: int = 200) -> np.ndarray:
    """A fixed set of training centers, disjoint from the epoch sampling streams."""
    return dataset.epoch_centers(seed, PROBE_STREAM, count)


def probe_loss(model: WeightedNormalNet, dataset: PatchDataset, ids, config: TrainConfig,
               batch_size: int = 25) -> LossBreakdown:
    """Mean L_down breakdown of ``model`` over fixed training patches; no graph recorded."""
    parts, sizes = [], []
    with ad.no_grad():
        for chunk in batches(np.asarray(ids), batch_size):
            parts.append(finetune_step(model, dataset.batch(chunk), config)[1])
            sizes.append(len(chunk))
    wts = np.asarray(sizes, dtype=float) / sum(sizes)
    return LossBreakdown(*(float(np.dot(wts, [getattr(p, k) for p in parts]))
                           for k in ("l_cos", "l_weight", "l_cont", "total")))


def first_last_total(history, stage: str) -> tuple[float, float]:
    rows = [r for r in history if r["stage"] == stage]
    return rows[0]["total"], rows[-1]["total"]


# ---------------------------------------------------------------- inference


def predict_normals(cloud: PointCloud, checkpoint: ModelCheckpoint, indices=None, batch_size: int = 64,
                    workers: int = 1) -> np.ndarray:
    """Unit world-frame normals for ``indices`` (default: every point)."""
    from .geometry import extract_patches, unalign_normal

    model = checkpoint.model
    n = model.hp.patch_size
    if len(cloud) < n:
        log.warning("cloud has %d points, fewer than patch size %d; clamping", len(cloud), n)
        n = len(cloud)
    if n <= model.hp.k_graph:
        log.warning("patch size %d does not exceed k_graph %d; EdgeConv graphs use all points",
                    n, model.hp.k_graph)
    index = build_knn_index(cloud)
    idx = np.arange(len(cloud)) if indices is None else np.asarray(indices, dtype=np.int64)
    out = np.empty((len(idx), 3))
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        aligned = [align_patch(p) for p in extract_patches(cloud, index, chunk, n, workers=workers)]
        pts = np.stack([a.local_points for a in aligned])
        ctr = np.stack([a.center for a in aligned])
        local = model.predict_local(pts, ctr, use_weights=checkpoint.use_weight)
        for row, (a, v) in enumerate(zip(aligned, local)):
            out[start + row] = unalign_normal(v, a)
    return out


def predict_weights(checkpoint: ModelCheckpoint, batch: PatchBatch) -> np.ndarray:
    with ad.no_grad():
        feats = checkpoint.model.encode(batch.points, batch.centers)
        return checkpoint.model.regress_weights(feats).data
