"""SGD-with-momentum training with rotating proposal sets and injected ground-truth regions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .core import Param
from .data import Dataset
from .losses import assign_region_labels, class_weights, pixel_loss_partitioned, region_loss
from .models import Model, ModelConfig, PreparedRegions, prepare_regions
from .regions import LossPartition, build_loss_partition, ground_truth_regions, oversegment, proposal_sets
from .roi_pooling import PoolPlan

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, model: Model, history: list):
        super().__init__(msg)
        self.model = model
        self.history = history


@dataclass(frozen=True)
class RegionConfig:
    """Which regions a model sees.

    ``mode='multiscale'`` uses the overlapping grid proposals plus the
    oversegmentation; ``'oversegmentation'`` uses the oversegmentation alone;
    ``'grid'`` uses grid proposals only.
    """

    mode: str = "multiscale"
    scales: tuple[int, ...] = (8, 16, 32)
    stride_fraction: float = 1.0
    merge_threshold: float = 0.08
    min_region_size: int = 16
    pos_overlap: float = 0.5
    neg_overlap: float = 0.0

    def __post_init__(self):
        if self.mode not in ("multiscale", "oversegmentation", "grid"):
            raise ValueError(f"unknown region mode {self.mode!r}")
        object.__setattr__(self, "scales", tuple(self.scales))


@dataclass(frozen=True)
class TrainConfig:
    lr_phase1: float = 1e-3
    epochs_phase1: int = 20
    lr_phase2: float = 1e-4
    epochs_phase2: int = 10
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    images_per_batch: int = 1
    rotation: tuple[str, ...] = ("A", "B", "C")
    shuffle: bool = True
    eval_every: int = 1

    def __post_init__(self):
        if self.lr_phase1 < 0 or self.lr_phase2 < 0:
            raise ValueError("learning rates must be non-negative")
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.images_per_batch != 1:
            raise ValueError("only one image per batch is supported")
        object.__setattr__(self, "rotation", tuple(self.rotation))
        if not self.rotation or any(r not in "ABC" for r in self.rotation):
            raise ValueError("rotation must list proposal sets among A, B, C")

    def lr_at(self, epoch: int) -> float:
        return self.lr_phase1 if epoch < self.epochs_phase1 else self.lr_phase2

    @property
    def epochs(self) -> int:
        return self.epochs_phase1 + self.epochs_phase2


def sgd_step(params: dict[str, Param], lr: float, momentum: float, weight_decay: float = 0.0) -> None:
    """``buf <- momentum*buf - lr*grad; value <- value + buf``; then zero the grads.

    Raises :class:`NonFiniteGradient` before touching anything if a gradient is not finite.
    """
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    for p in params.values():
        g = p.grad + weight_decay * p.value if weight_decay else p.grad
        p.momentum_buf *= momentum
        p.momentum_buf -= lr * g
        p.value += p.momentum_buf
        p.zero_grad()


# ---------------------------------------------------------------------------
# region sets per image
# ---------------------------------------------------------------------------

def _concat_plans(plans: list[PoolPlan | None]) -> PoolPlan | None:
    plans = [p for p in plans if p is not None and len(p)]
    if not plans:
        return None
    k = max(p.idx.shape[2] for p in plans)
    sentinel = plans[0].n_cells
    parts = []
    for p in plans:
        if p.idx.shape[2] < k:
            pad = np.full(p.idx.shape[:2] + (k - p.idx.shape[2],), sentinel, dtype=p.idx.dtype)
            parts.append(np.concatenate([p.idx, pad], axis=2))
        else:
            parts.append(p.idx)
    return PoolPlan(np.concatenate(parts, axis=0), plans[0].out_size, plans[0].fm_size)


def combine(parts: list[PreparedRegions]) -> PreparedRegions:
    parts = [p for p in parts if len(p)]
    regions = parts[0].regions.union(*[p.regions for p in parts[1:]])
    return PreparedRegions(
        regions,
        _concat_plans([p.region_plan for p in parts]),
        _concat_plans([p.box_plan for p in parts]),
    )


class RegionProvider:
    """Builds and caches the prepared region sets a model needs for each image.

    Grid proposals depend only on the image size, so they are prepared once
    and shared; oversegmentations and ground-truth regions are cached per image.
    """

    def __init__(self, dataset: Dataset, model_cfg: ModelConfig, region_cfg: RegionConfig):
        self.ds = dataset
        self.mcfg = model_cfg
        self.rcfg = region_cfg
        n = dataset.spec.size
        self.grid = {}
        if region_cfg.mode != "oversegmentation":
            for tag, rs in zip("ABC", proposal_sets(n, n, region_cfg.scales, region_cfg.stride_fraction)):
                self.grid[tag] = prepare_regions(rs, model_cfg)
        self._overseg = {}
        self._gt = {}
        self._labels = {}
        self._partitions = {}

    def overseg(self, i) -> PreparedRegions | None:
        if self.rcfg.mode == "grid":
            return None
        if i not in self._overseg:
            rs = oversegment(self.ds.images[i], self.rcfg.merge_threshold, self.rcfg.min_region_size)
            self._overseg[i] = prepare_regions(rs, self.mcfg)
        return self._overseg[i]

    def gt(self, i) -> PreparedRegions:
        if i not in self._gt:
            self._gt[i] = prepare_regions(ground_truth_regions(self.ds.labels[i]), self.mcfg)
        return self._gt[i]

    def train_regions(self, i, set_tag: str) -> PreparedRegions:
        parts = [self.grid[set_tag]] if self.grid else []
        ov = self.overseg(i)
        if ov is not None:
            parts.append(ov)
        parts.append(self.gt(i))
        return combine(parts)

    def test_regions(self, i) -> PreparedRegions:
        parts = [self.grid[t] for t in "ABC"] if self.grid else []
        ov = self.overseg(i)
        if ov is not None:
            parts.append(ov)
        return combine(parts)

    def partition(self, i, set_tag, prepared) -> LossPartition:
        """Loss partition of a training region set; it depends only on regions and labels, so it is built once."""
        key = (i, set_tag)
        if key not in self._partitions:
            self._partitions[key] = build_loss_partition(prepared.regions, self.ds.labels[i])
        return self._partitions[key]

    def region_labels(self, i, set_tag, prepared) -> np.ndarray:
        key = (i, set_tag)
        if key not in self._labels:
            self._labels[key] = assign_region_labels(
                prepared.regions, self.ds.labels[i], self.rcfg.pos_overlap, self.rcfg.neg_overlap
            )
        return self._labels[key]


def assemble_batch(dataset: Dataset, batch_counter: int, image_idx: int, provider: RegionProvider,
                   rotation=("A", "B", "C")):
    """Image, labels and training regions for one step; the proposal set rotates per batch."""
    tag = rotation[batch_counter % len(rotation)]
    return dataset.images[image_idx], dataset.labels[image_idx], provider.train_regions(image_idx, tag), tag


# ---------------------------------------------------------------------------
# steps, evaluation, loop
# ---------------------------------------------------------------------------

def loss_and_grad(model: Model, image, gt, prepared: PreparedRegions, region_labels=None,
                  partition: LossPartition | None = None) -> float:
    """Forward and backward for one image; accumulates parameter grads and returns the loss."""
    scores, cache = model.region_scores(image, prepared)
    if model.cfg.kind == "baseline":
        res = region_loss(scores, region_labels)
        model.backward(cache, res.grad, wrt="scores")
        return res.value
    part = partition if partition is not None else build_loss_partition(prepared.regions, gt)
    w = class_weights(gt, model.cfg.num_classes, model.cfg.loss)
    res = pixel_loss_partitioned(model.pixel_inputs(scores, cache), part, w)
    model.backward(cache, res.grad, wrt="inputs")
    return res.value


def evaluate(model: Model, dataset: Dataset, indices, provider: RegionProvider, band: float | None = None):
    """Accumulate a confusion matrix over ``indices``; optionally also over the boundary band."""
    c = model.cfg.num_classes
    cm = np.zeros((c, c), dtype=np.int64)
    cm_band = np.zeros((c, c), dtype=np.int64)
    fallback = 0
    for i in indices:
        pred, n = model.predict(dataset.images[i], provider.test_regions(i), return_fallback=True)
        fallback += n
        gt = dataset.labels[i]
        cm += metrics.confusion_matrix(pred, gt, c)
        if band is not None:
            mask = metrics.boundary_band(gt, band) if (gt != gt.flat[0]).any() else np.zeros(gt.shape, bool)
            cm_band += metrics.confusion_matrix(pred, gt, c, mask)
    return cm, (cm_band if band is not None else None), fallback


def format_log_record(rec: dict) -> str:
    parts = []
    for k, v in rec.items():
        parts.append(f"{k}={repr(float(v)) if isinstance(v, float) else v}")
    return " ".join(parts)


@dataclass
class TrainResult:
    model: Model
    history: list = field(default_factory=list)

    def log_text(self) -> str:
        return "".join(format_log_record(r) + "\n" for r in self.history)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: Dataset,
          region_cfg: RegionConfig | None = None, provider: RegionProvider | None = None,
          model: Model | None = None, on_epoch=None) -> TrainResult:
    """Run phase 1 then phase 2 over the training split, one image per step."""
    if not dataset.train:
        raise ValueError("dataset has no training images")
    region_cfg = region_cfg or RegionConfig()
    provider = provider or RegionProvider(dataset, model_cfg, region_cfg)
    model = model or Model(model_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    history = []
    last_good = model.copy()
    counter = 0
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.lr_at(epoch)
        order = rng.permutation(dataset.train) if train_cfg.shuffle else np.array(dataset.train)
        total = 0.0
        for i in order.tolist():
            image, gt, prepared, tag = assemble_batch(dataset, counter, i, provider, train_cfg.rotation)
            labels = part = None
            if model_cfg.kind == "baseline":
                labels = provider.region_labels(i, tag, prepared)
                if (labels < 0).all():
                    counter += 1
                    continue
            else:
                part = provider.partition(i, tag, prepared)
            value = loss_and_grad(model, image, gt, prepared, labels, part)
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss became {value} in epoch {epoch + 1}", last_good, history)
            try:
                sgd_step(model.params, lr, train_cfg.momentum, train_cfg.weight_decay)
            except NonFiniteGradient as exc:
                raise TrainingDiverged(str(exc), last_good, history) from exc
            total += value
            counter += 1
        rec = {"epoch": epoch + 1, "phase": 1 if epoch < train_cfg.epochs_phase1 else 2,
               "lr": float(lr), "loss": total / len(order)}
        if dataset.test and train_cfg.eval_every and (epoch + 1) % train_cfg.eval_every == 0:
            cm, _, _ = evaluate(model, dataset, dataset.test, provider)
            rec.update({k: float(v) for k, v in metrics.summarize(cm).items()})
        history.append(rec)
        log.info(format_log_record(rec))
        if on_epoch is not None:
            on_epoch(rec)
        last_good = model.copy()
    return TrainResult(model, history)
