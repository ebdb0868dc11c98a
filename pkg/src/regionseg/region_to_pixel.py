"""Region-to-pixel layer: per-class max over covering regions, and its subgradient.

``r2p_forward`` gives every pixel, for every class, the score of the highest
scoring region containing it and remembers which region won. The backward pass
sends each pixel-level gradient to that winner and sums per region, so regions
that win nothing receive exactly zero gradient. Ties go to the lowest region id.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import DTYPE, softmax
from .regions import RegionSet

log = logging.getLogger(__name__)

NONE = -1
# stands in for -inf at (pixel, class) pairs no region covers; never fed to a loss
UNCOVERED_SCORE = -1e300


@dataclass
class PixelScoreMap:
    scores: np.ndarray  # (P, C)
    winner: np.ndarray  # (P, C) region id or NONE
    width: int
    height: int

    @property
    def covered(self) -> np.ndarray:
        return self.winner[:, 0] != NONE


def _membership(regions) -> np.ndarray:
    return regions.membership if isinstance(regions, RegionSet) else np.asarray(regions, dtype=bool)


def r2p_forward(scores: np.ndarray, regions: RegionSet) -> PixelScoreMap:
    scores = np.asarray(scores, dtype=DTYPE)
    member = _membership(regions)
    n_regions, n_pix = member.shape
    if scores.shape[0] != n_regions:
        raise ValueError(f"{scores.shape[0]} score rows for {n_regions} regions")
    n_cls = scores.shape[1]
    winner = np.empty((n_pix, n_cls), dtype=np.int64)
    best = np.empty((n_pix, n_cls), dtype=DTYPE)
    covered = member.any(axis=0)
    member_t = np.ascontiguousarray(member.T)
    for c in range(n_cls):
        # regions by descending score, ties by lowest id; the first covering one wins
        order = np.argsort(-scores[:, c], kind="stable")
        w = order[member_t[:, order].argmax(axis=1)]
        winner[:, c] = w
        best[:, c] = scores[w, c]
    winner[~covered] = NONE
    best[~covered] = UNCOVERED_SCORE
    width = getattr(regions, "width", n_pix)
    height = getattr(regions, "height", 1)
    return PixelScoreMap(best, winner, width, height)


def r2p_backward(pix_grad: np.ndarray, winner: np.ndarray, n_regions: int) -> np.ndarray:
    """Region gradient: for each class, sum pixel gradients over the pixels each region wins."""
    pix_grad = np.asarray(pix_grad, dtype=DTYPE)
    n_cls = winner.shape[1]
    hit = winner != NONE
    flat = (winner * n_cls + np.arange(n_cls))[hit]
    g = np.bincount(flat, weights=pix_grad[hit], minlength=n_regions * n_cls)
    return g.reshape(n_regions, n_cls)


def nearest_fill(labels_flat: np.ndarray, known: np.ndarray, width: int) -> int:
    """Copy labels from the nearest known pixel (Euclidean, lowest index on ties) in place."""
    missing = np.flatnonzero(~known)
    if missing.size == 0:
        return 0
    have = np.flatnonzero(known)
    if have.size == 0:
        labels_flat[missing] = 0
        return int(missing.size)
    my, mx = np.divmod(missing, width)
    hy, hx = np.divmod(have, width)
    d2 = (my[:, None] - hy[None, :]) ** 2 + (mx[:, None] - hx[None, :]) ** 2
    labels_flat[missing] = labels_flat[have[d2.argmin(axis=1)]]
    return int(missing.size)


def _finish(labels_flat, covered, width, height, return_fallback):
    n = nearest_fill(labels_flat, covered, width)
    if n:
        log.info("%d uncovered pixels labeled from their nearest covered neighbor", n)
    labels = labels_flat.reshape(height, width)
    return (labels, n) if return_fallback else labels


def predict_endtoend(pix: PixelScoreMap, return_fallback: bool = False):
    """Label each pixel by argmax over classes of the softmax of its maxed scores."""
    covered = pix.covered
    by_max = pix.scores.argmax(axis=1)
    by_prob = softmax(pix.scores[covered]).argmax(axis=1)
    if not np.array_equal(by_max[covered], by_prob):
        raise AssertionError("softmax changed the argmax; scores are not finite")
    labels = np.where(covered, by_max, 0).astype(np.int64)
    return _finish(labels, covered, pix.width, pix.height, return_fallback)


def predict_baseline(scores: np.ndarray, regions: RegionSet, return_fallback: bool = False):
    """Softmax per region first, then max over covering regions, then argmax over classes."""
    pix = r2p_forward(softmax(scores), regions)
    covered = pix.covered
    labels = np.where(covered, pix.scores.argmax(axis=1), 0).astype(np.int64)
    return _finish(labels, covered, pix.width, pix.height, return_fallback)
