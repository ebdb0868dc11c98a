"""Pixel-level and region-level cross-entropy losses with per-image class weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DTYPE, log_softmax
from .region_to_pixel import PixelScoreMap
from .regions import UNLABELED, VOID, LossPartition, RegionSet, region_label_and_overlap

IGNORE = UNLABELED


class UncoveredPixelError(ValueError):
    """A labeled training pixel has no covering region."""


class StalePartitionError(ValueError):
    """The loss partition was built for a different region set."""


@dataclass
class ClassWeights:
    w: np.ndarray
    mode: str

    def total(self, gt) -> float:
        """``sum_c w[c] * P_c``; equals 1 for both modes."""
        return float(self.w @ class_counts(gt, self.w.size))


@dataclass
class LossResult:
    value: float
    grad: np.ndarray


def class_counts(gt, num_classes: int) -> np.ndarray:
    labels = np.asarray(gt).ravel()
    labels = labels[labels != VOID]
    return np.bincount(labels, minlength=num_classes)[:num_classes].astype(DTYPE)


def balanced_weights(gt, num_classes: int) -> ClassWeights:
    """Inverse-frequency weights renormalized so that ``sum_c w[c] * P_c == 1``.

    With ``Z`` classes present, ``w[c] = 1 / (Z * P_c)``; absent classes get 0.
    """
    counts = class_counts(gt, num_classes)
    present = counts > 0
    if not present.any():
        raise ValueError("label map has no labeled pixels")
    w = np.zeros(num_classes, dtype=DTYPE)
    w[present] = 1.0 / (present.sum() * counts[present])
    return ClassWeights(w, "balanced")


def unbalanced_weights(gt, num_classes: int) -> ClassWeights:
    counts = class_counts(gt, num_classes)
    total = counts.sum()
    if total == 0:
        raise ValueError("label map has no labeled pixels")
    return ClassWeights(np.full(num_classes, 1.0 / total), "unbalanced")


def class_weights(gt, num_classes: int, mode: str = "balanced") -> ClassWeights:
    if mode == "balanced":
        return balanced_weights(gt, num_classes)
    if mode == "unbalanced":
        return unbalanced_weights(gt, num_classes)
    raise ValueError(f"unknown loss mode {mode!r}")


def _weighted_ce(scores, labels, weight):
    logp = log_softmax(scores)
    n = labels.size
    value = -float(weight @ logp[np.arange(n), labels])
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad *= weight[:, None]
    return value, grad


def pixel_loss(pix: PixelScoreMap, gt, weights: ClassWeights) -> LossResult:
    """Weighted pixel log-loss; the gradient is with respect to the maxed pixel scores."""
    labels = np.asarray(gt).ravel()
    valid = labels != VOID
    if (valid & ~pix.covered).any():
        raise UncoveredPixelError(f"{int((valid & ~pix.covered).sum())} labeled pixels are not covered by any region")
    y = labels[valid].astype(np.int64)
    value, g = _weighted_ce(pix.scores[valid], y, weights.w[y])
    grad = np.zeros_like(pix.scores)
    grad[valid] = g
    return LossResult(value, grad)


def cell_scores(scores: np.ndarray, partition: LossPartition):
    """Maxed class scores and winning region ids for each partition cell."""
    if scores.shape[0] != partition.n_regions:
        raise StalePartitionError(f"partition built for {partition.n_regions} regions, got {scores.shape[0]}")
    if len(partition) and not partition.cover.any(axis=1).all():
        raise UncoveredPixelError("a partition cell is not covered by any region")
    n_reg, n_cls = scores.shape
    if len(partition) == 0:
        return np.zeros((0, n_cls)), np.zeros((0, n_cls), dtype=np.int64)
    # rank regions per class by descending score, ties by lowest id; the best ranked covering region wins
    order = np.argsort(-scores, axis=0, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(n_reg)[:, None], axis=0)
    best = np.minimum.reduceat(rank[partition.cover_regions], partition.cover_start, axis=0)
    winner = np.take_along_axis(order, best, axis=0)
    return scores[winner, np.arange(n_cls)], winner


def pixel_loss_partitioned(scores: np.ndarray, partition: LossPartition, weights: ClassWeights) -> LossResult:
    """Same value as :func:`pixel_loss` after region-to-pixel, evaluated once per cell.

    Returns the gradient with respect to the region scores ``(R, C)``.
    """
    scores = np.asarray(scores, dtype=DTYPE)
    n_reg, n_cls = scores.shape
    cs, winner = cell_scores(scores, partition)
    y = partition.cell_class
    value, g = _weighted_ce(cs, y, partition.cell_count * weights.w[y])
    flat = (winner * n_cls + np.arange(n_cls)).ravel()
    grad = np.bincount(flat, weights=g.ravel(), minlength=n_reg * n_cls).reshape(n_reg, n_cls)
    return LossResult(value, grad)


def region_loss(scores: np.ndarray, region_labels) -> LossResult:
    """Mean region log-loss over labeled regions; IGNORE rows get zero gradient."""
    scores = np.asarray(scores, dtype=DTYPE)
    labels = np.asarray(region_labels, dtype=np.int64)
    keep = labels != IGNORE
    n = int(keep.sum())
    if n == 0:
        raise ValueError("region_loss needs at least one labeled region")
    value, g = _weighted_ce(scores[keep], labels[keep], np.full(n, 1.0 / n))
    grad = np.zeros_like(scores)
    grad[keep] = g
    return LossResult(value, grad)


def assign_region_labels(regions: RegionSet, gt, pos_overlap: float = 0.5, neg_overlap: float = 0.0,
                         background: int | None = None) -> np.ndarray:
    """Label regions for the region-classification baseline.

    A region takes its majority class when that class covers at least
    ``pos_overlap`` of it. When ``background`` is given, a region whose
    majority covers less than ``neg_overlap`` becomes a background example.
    Everything else is IGNORE.
    """
    if not 0 <= neg_overlap <= pos_overlap <= 1:
        raise ValueError("need 0 <= neg_overlap <= pos_overlap <= 1")
    out = np.full(len(regions), IGNORE, dtype=np.int64)
    for i, r in enumerate(regions):
        c, ov = region_label_and_overlap(r, gt)
        if c == UNLABELED:
            continue
        if ov >= pos_overlap:
            out[i] = c
        elif background is not None and ov < neg_overlap:
            out[i] = background
    return out
