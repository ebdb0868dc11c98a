"""Confusion-matrix segmentation metrics and the boundary-band protocol."""

from __future__ import annotations

import warnings

import numpy as np
from scipy import ndimage

from .regions import VOID


def confusion_matrix(pred, gt, num_classes: int, mask=None) -> np.ndarray:
    """Rows are ground truth, columns predictions; VOID pixels are skipped."""
    gt = np.asarray(gt).ravel()
    pred = np.asarray(pred).ravel()
    keep = gt != VOID
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool).ravel()
    idx = gt[keep] * num_classes + pred[keep]
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def global_accuracy(cm) -> float:
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm) / total)


def per_class_accuracy(cm) -> np.ndarray:
    cm = np.asarray(cm, dtype=float)
    rows = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, np.diag(cm) / rows, np.nan)


def class_average_accuracy(cm) -> float:
    acc = per_class_accuracy(cm)
    if np.all(np.isnan(acc)):
        raise ValueError("no class has ground-truth pixels")
    return float(np.nanmean(acc))


def per_class_iou(cm, include_absent: bool = False) -> np.ndarray:
    """IoU per class. Classes absent from both gt and prediction are NaN unless ``include_absent``."""
    cm = np.asarray(cm, dtype=float)
    inter = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, np.nan)
    if include_absent:
        iou = np.nan_to_num(iou, nan=0.0)
    return iou


def mean_iou(cm, include_absent: bool = False) -> float:
    iou = per_class_iou(cm, include_absent)
    if np.all(np.isnan(iou)):
        raise ValueError("no class appears in gt or prediction")
    return float(np.nanmean(iou))


def boundary_pixels(gt) -> np.ndarray:
    """Non-VOID pixels with a 4-neighbor carrying a different non-VOID label."""
    gt = np.asarray(gt)
    out = np.zeros(gt.shape, dtype=bool)
    for a, b in (((slice(None), slice(1, None)), (slice(None), slice(None, -1))),
                 ((slice(1, None), slice(None)), (slice(None, -1), slice(None)))):
        diff = (gt[a] != gt[b]) & (gt[a] != VOID) & (gt[b] != VOID)
        out[a] |= diff
        out[b] |= diff
    return out


def edge_distance(gt) -> np.ndarray:
    """Euclidean distance from each pixel center to the nearest label-change edge.

    Label-change edges are the unit segments between 4-adjacent pixels with
    different non-VOID labels. On a doubled lattice (pixel centers at odd
    coordinates) the closest point of any such segment is a lattice point, so
    an exact distance transform there gives exact distances. Returns +inf
    everywhere if the map has no edges.
    """
    gt = np.asarray(gt)
    h, w = gt.shape
    grid = np.ones((2 * h + 1, 2 * w + 1), dtype=bool)  # True = not on an edge
    # vertical segments between (y, x) and (y, x + 1)
    ys, xs = np.nonzero((gt[:, 1:] != gt[:, :-1]) & (gt[:, 1:] != VOID) & (gt[:, :-1] != VOID))
    for dy in (0, 1, 2):
        grid[2 * ys + dy, 2 * xs + 2] = False
    # horizontal segments between (y, x) and (y + 1, x)
    ys, xs = np.nonzero((gt[1:, :] != gt[:-1, :]) & (gt[1:, :] != VOID) & (gt[:-1, :] != VOID))
    for dx in (0, 1, 2):
        grid[2 * ys + 2, 2 * xs + dx] = False
    if grid.all():
        return np.full((h, w), np.inf)
    dist = ndimage.distance_transform_edt(grid)
    return dist[1::2, 1::2] / 2.0


def boundary_band(gt, band: float = 4) -> np.ndarray:
    """Non-VOID pixels within ``band`` of a label-change edge.

    Boundary pixels sit at distance 1/2 from their edge and are always in the
    band, so ``band=0`` selects exactly the boundary pixels.
    """
    if band < 0:
        raise ValueError("band must be non-negative")
    gt = np.asarray(gt)
    d = edge_distance(gt)
    mask = (d <= max(band, 0.5)) & (gt != VOID)
    if not mask.any():
        warnings.warn("label map has no boundaries; boundary band is empty", RuntimeWarning, stacklevel=2)
    return mask


def boundary_class_accuracy(pred, gt, num_classes: int, band: float = 4):
    """Class-average accuracy on the band pixels, or None if the band is empty."""
    mask = boundary_band(gt, band)
    if not mask.any():
        return None
    return class_average_accuracy(confusion_matrix(pred, gt, num_classes, mask))


def summarize(cm) -> dict[str, float]:
    return {
        "global_acc": global_accuracy(cm),
        "class_acc": class_average_accuracy(cm),
        "miou": mean_iou(cm),
    }


def format_report(values: dict[str, float | None], title: str = "metrics") -> str:
    """Human-readable table followed by ``metric name=value`` records."""
    width = max(len(k) for k in values)
    lines = [f"{title}", "-" * (width + 12)]
    for k, v in values.items():
        lines.append(f"{k:<{width}}  {'n/a' if v is None else f'{100 * v:6.2f}%'}")
    lines.append("")
    for k, v in values.items():
        lines.append(f"metric {k}={'nan' if v is None else repr(float(v))}")
    return "\n".join(lines) + "\n"
