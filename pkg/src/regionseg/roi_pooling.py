"""Free-form and bounding-box ROI max pooling on the last convolutional map.

A region is first rasterized to feature-map resolution. Its feature-map box
is split into ``out_h x out_w`` bins with the floor/ceil proportional rule of
Fast R-CNN, and each bin takes the channel-wise max over the cells that lie
both in the bin and in the region mask. Bins without any in-mask cell emit 0
and route no gradient.

For training, :class:`PoolPlan` precomputes the in-bin, in-mask cell lists
of many regions so pooling a whole region set is one gather plus a max.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import DTYPE, ShapeError
from .regions import RegionMask

NONE = -1


@dataclass(frozen=True, eq=False)
class ConvRegionMask:
    """Region membership at feature-map resolution.

    ``cells`` are sorted linear indices ``y * fm_w + x``; ``bbox_fm`` is the
    inclusive ``(x0, y0, x1, y1)`` box that the pooling bins subdivide.
    """

    cells: np.ndarray
    bbox_fm: tuple[int, int, int, int]
    fm_size: tuple[int, int]

    def to_mask(self) -> np.ndarray:
        m = np.zeros(self.fm_size[0] * self.fm_size[1], dtype=bool)
        m[self.cells] = True
        return m.reshape(self.fm_size)

    @classmethod
    def full_box(cls, bbox_fm, fm_size) -> "ConvRegionMask":
        x0, y0, x1, y1 = bbox_fm
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        return cls(np.sort((ys * fm_size[1] + xs).ravel()), tuple(bbox_fm), tuple(fm_size))


@dataclass
class RoiFeature:
    values: np.ndarray  # (out_h, out_w, D)
    argmax: np.ndarray  # (out_h, out_w, D) linear feature-map index, or NONE
    fm_shape: tuple[int, int, int]


def fm_stride(image_size: tuple[int, int], fm_size: tuple[int, int]) -> int:
    h, w = image_size
    fh, fw = fm_size
    if h % fh or w % fw or h // fh != w // fw:
        raise ShapeError(f"feature map {fm_size} is not a uniform downscale of image {image_size}")
    return h // fh


def rasterize_mask(region: RegionMask, image_size: tuple[int, int], fm_size: tuple[int, int]) -> ConvRegionMask:
    """Keep feature-map cells whose stride x stride footprint is at least half inside the region.

    If no cell qualifies, the single cell with the largest overlap is used
    (lowest index on ties), so the result is never empty.
    """
    s = fm_stride(image_size, fm_size)
    if (region.height, region.width) != tuple(image_size):
        raise ShapeError("region was built for a different image size")
    fh, fw = fm_size
    ys, xs = np.divmod(region.pixels, region.width)
    counts = np.bincount((ys // s) * fw + xs // s, minlength=fh * fw)
    if counts.sum() == 0:
        raise ValueError("region does not overlap the image")
    cells = np.flatnonzero(2 * counts >= s * s)
    if cells.size == 0:
        cells = np.array([int(counts.argmax())])
    x0, y0, x1, y1 = region.bbox
    return ConvRegionMask(cells.astype(np.int64), (x0 // s, y0 // s, x1 // s, y1 // s), (fh, fw))


def bin_edges(start: int, end: int, n_bins: int, limit: int) -> list[tuple[int, int]]:
    """Half-open ``[lo, hi)`` spans splitting the inclusive range ``start..end`` into bins."""
    size = end - start + 1
    spans = []
    for i in range(n_bins):
        lo = start + (i * size) // n_bins
        hi = start + -(-(i + 1) * size // n_bins)
        spans.append((min(max(lo, 0), limit), min(max(hi, 0), limit)))
    return spans


@dataclass(frozen=True, eq=False)
class PoolPlan:
    """Per-region, per-bin candidate cells, padded with the sentinel ``n_cells``."""

    idx: np.ndarray  # (R, out_h * out_w, K)
    out_size: tuple[int, int]
    fm_size: tuple[int, int]

    @property
    def n_cells(self) -> int:
        return self.fm_size[0] * self.fm_size[1]

    def __len__(self):
        return self.idx.shape[0]


def build_plan(masks: Sequence[ConvRegionMask], out_size: tuple[int, int], fm_size: tuple[int, int]) -> PoolPlan:
    oh, ow = out_size
    fh, fw = fm_size
    lin = np.arange(fh * fw).reshape(fh, fw)
    per_region = []
    k_max = 1
    for m in masks:
        if tuple(m.fm_size) != (fh, fw):
            raise ShapeError("mask feature-map size mismatch")
        if m.cells.size == 0:
            raise ValueError("empty feature-map mask")
        inside = m.to_mask()
        x0, y0, x1, y1 = m.bbox_fm
        rows = bin_edges(y0, y1, oh, fh)
        cols = bin_edges(x0, x1, ow, fw)
        bins = []
        for hs, he in rows:
            for ws, we in cols:
                cand = lin[hs:he, ws:we][inside[hs:he, ws:we]]
                bins.append(cand)
                k_max = max(k_max, cand.size)
        per_region.append(bins)
    idx = np.full((len(per_region), oh * ow, k_max), fh * fw, dtype=np.int64)
    for r, bins in enumerate(per_region):
        for b, cand in enumerate(bins):
            idx[r, b, :cand.size] = cand
    return PoolPlan(idx, (oh, ow), (fh, fw))


def pool_forward(convmap: np.ndarray, plan: PoolPlan):
    """Pool every region of ``plan``.

    Returns ``(values, argmax)`` of shape ``(R, out_h, out_w, D)``; argmax
    holds the winning linear feature-map index or ``NONE``.
    """
    convmap = np.asarray(convmap, dtype=DTYPE)
    fh, fw, d = convmap.shape
    if (fh, fw) != plan.fm_size:
        raise ShapeError(f"convmap {convmap.shape[:2]} does not match plan {plan.fm_size}")
    padded = np.concatenate([convmap.reshape(fh * fw, d), np.full((1, d), -np.inf)], axis=0)
    r, n_bins, k = plan.idx.shape
    # running max over the short candidate axis; strict '>' keeps the lowest index on ties
    out = padded[plan.idx[:, :, 0]]
    arg = np.repeat(plan.idx[:, :, 0, None], d, axis=2)
    for j in range(1, k):
        cand = padded[plan.idx[:, :, j]]
        better = cand > out
        out = np.where(better, cand, out)
        arg = np.where(better, plan.idx[:, :, j, None], arg)
    empty = arg == plan.n_cells
    out[empty] = 0.0
    arg[empty] = NONE
    oh, ow = plan.out_size
    return out.reshape(r, oh, ow, d), arg.reshape(r, oh, ow, d)


def pool_backward(grad_out: np.ndarray, argmax: np.ndarray, convmap_shape) -> np.ndarray:
    """Sum each bin's gradient into the feature-map cell that won it."""
    fh, fw, d = convmap_shape
    if grad_out.shape != argmax.shape or grad_out.shape[-1] != d:
        raise ShapeError(f"gradient {grad_out.shape} does not match forward argmax {argmax.shape}")
    chan = np.broadcast_to(np.arange(d), argmax.shape)
    hit = argmax != NONE
    flat = argmax[hit] * d + chan[hit]
    g = np.bincount(flat, weights=grad_out[hit], minlength=fh * fw * d)
    return g.reshape(fh, fw, d)


def freeform_roi_pool_forward(convmap: np.ndarray, mask: ConvRegionMask, out_size=(6, 6)) -> RoiFeature:
    plan = build_plan([mask], tuple(out_size), tuple(np.shape(convmap)[:2]))
    values, arg = pool_forward(convmap, plan)
    return RoiFeature(values[0], arg[0], tuple(np.shape(convmap)))


def freeform_roi_pool_backward(roi: RoiFeature, grad_out: np.ndarray, convmap_shape=None) -> np.ndarray:
    shape = tuple(convmap_shape) if convmap_shape is not None else roi.fm_shape
    if shape != roi.fm_shape:
        raise ShapeError(f"convmap shape {shape} differs from forward shape {roi.fm_shape}")
    return pool_backward(np.asarray(grad_out, dtype=DTYPE)[None], roi.argmax[None], shape)


def bbox_roi_pool_forward(convmap: np.ndarray, bbox_fm, out_size=(6, 6)) -> RoiFeature:
    """Classic box pooling: free-form pooling with every cell of the box in the mask."""
    fm_size = tuple(np.shape(convmap)[:2])
    return freeform_roi_pool_forward(convmap, ConvRegionMask.full_box(bbox_fm, fm_size), out_size)


bbox_roi_pool_backward = freeform_roi_pool_backward
