"""Free-form regions, proposal generators and the single-class loss partition.

Label maps are integer arrays of shape (H, W) holding class ids, with ``VOID``
marking unlabeled pixels. Pixels are addressed by row-major linear index
``y * width + x``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

VOID = 255
UNLABELED = -1

SOURCES = ("proposals-A", "proposals-B", "proposals-C", "oversegmentation", "ground-truth", "mixed")


@dataclass(frozen=True, eq=False)
class RegionMask:
    """Sorted linear pixel indices plus the inclusive tight box ``(x0, y0, x1, y1)``."""

    pixels: np.ndarray
    bbox: tuple[int, int, int, int]
    width: int
    height: int

    @classmethod
    def from_pixels(cls, pixels: Iterable[int], width: int, height: int) -> "RegionMask":
        pix = np.unique(np.asarray(list(pixels) if not isinstance(pixels, np.ndarray) else pixels, dtype=np.int64))
        if pix.size == 0:
            raise ValueError("region must contain at least one pixel")
        if pix[0] < 0 or pix[-1] >= width * height:
            raise ValueError("region pixel index outside image")
        ys, xs = np.divmod(pix, width)
        bbox = (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
        pix.setflags(write=False)
        return cls(pix, bbox, width, height)

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "RegionMask":
        mask = np.asarray(mask, dtype=bool)
        return cls.from_pixels(np.flatnonzero(mask), mask.shape[1], mask.shape[0])

    @classmethod
    def from_box(cls, x0: int, y0: int, x1: int, y1: int, width: int, height: int) -> "RegionMask":
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        return cls.from_pixels((ys * width + xs).ravel(), width, height)

    @property
    def size(self) -> int:
        return int(self.pixels.size)

    def to_mask(self) -> np.ndarray:
        m = np.zeros(self.width * self.height, dtype=bool)
        m[self.pixels] = True
        return m.reshape(self.height, self.width)

    def __eq__(self, other):
        if not isinstance(other, RegionMask):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and np.array_equal(self.pixels, other.pixels)

    def __hash__(self):
        return hash((self.width, self.height, self.pixels.tobytes()))


@dataclass(frozen=True, eq=False)
class RegionSet:
    regions: tuple[RegionMask, ...]
    source: str
    width: int
    height: int
    class_hints: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown region source {self.source!r}")
        for r in self.regions:
            if (r.width, r.height) != (self.width, self.height):
                raise ValueError("region size does not match region set")

    def __len__(self):
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)

    def __getitem__(self, i):
        return self.regions[i]

    @cached_property
    def membership(self) -> np.ndarray:
        """Boolean (R, P) matrix: ``membership[r, p]`` iff pixel p is in region r."""
        m = np.zeros((len(self.regions), self.width * self.height), dtype=bool)
        for i, r in enumerate(self.regions):
            m[i, r.pixels] = True
        m.setflags(write=False)
        return m

    def union(self, *others: "RegionSet", source: str = "mixed") -> "RegionSet":
        regions = list(self.regions)
        for o in others:
            if (o.width, o.height) != (self.width, self.height):
                raise ValueError("cannot union region sets of different image sizes")
            regions.extend(o.regions)
        return RegionSet(tuple(regions), source, self.width, self.height)

    def coverage(self) -> np.ndarray:
        return self.membership.any(axis=0).reshape(self.height, self.width)


# ---------------------------------------------------------------------------
# proposal generators
# ---------------------------------------------------------------------------

def _window_starts(length: int, scale: int, stride: int, offset: int) -> list[int]:
    pos = offset - stride if offset > 0 else 0
    starts = []
    while True:
        starts.append(pos)
        if pos + scale >= length:
            return starts
        pos += stride


def grid_proposals(
    width: int,
    height: int,
    scales: Sequence[int],
    overlap_stride_fraction: float = 1.0,
    offset_fraction: float = 0.0,
    source: str = "proposals-A",
) -> RegionSet:
    """Square windows at each scale, stepped by ``scale * overlap_stride_fraction``.

    ``offset_fraction`` shifts the window lattice by a fraction of the stride;
    windows hanging over the border are cropped. Exact duplicate windows are
    emitted once.
    """
    scales = list(scales)
    if not scales:
        raise ValueError("grid_proposals needs at least one scale")
    if not 0 < overlap_stride_fraction <= 1:
        raise ValueError("overlap_stride_fraction must be in (0, 1]")
    seen, regions = set(), []
    for s in scales:
        if s < 1 or s > min(width, height):
            raise ValueError(f"scale {s} does not fit a {width}x{height} image")
        stride = max(1, int(round(s * overlap_stride_fraction)))
        off = int(round(offset_fraction * stride)) % stride
        for y in _window_starts(height, s, stride, off):
            for x in _window_starts(width, s, stride, off):
                box = (max(x, 0), max(y, 0), min(x + s, width) - 1, min(y + s, height) - 1)
                if box in seen:
                    continue
                seen.add(box)
                regions.append(RegionMask.from_box(*box, width, height))
    return RegionSet(tuple(regions), source, width, height)


def proposal_sets(width: int, height: int, scales: Sequence[int] = (8, 16, 32),
                  overlap_stride_fraction: float = 1.0) -> list[RegionSet]:
    """Three lattice-shifted grid variants used for per-step proposal rotation."""
    return [
        grid_proposals(width, height, scales, overlap_stride_fraction, off, source=tag)
        for off, tag in ((0.0, "proposals-A"), (1 / 3, "proposals-B"), (2 / 3, "proposals-C"))
    ]


class _UnionFind:
    def __init__(self, n, colors):
        self.parent = list(range(n))
        self.size = [1] * n
        self.csum = [c for c in colors]

    def find(self, a):
        parent = self.parent
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    def union(self, a, b):
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.csum[a] = self.csum[a] + self.csum[b]
        return a


def _neighbor_edges(h, w):
    idx = np.arange(h * w).reshape(h, w)
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    return a, b


def oversegment(image: np.ndarray, merge_threshold: float = 0.08, min_size: int = 16) -> RegionSet:
    """Greedy agglomeration of 4-connected pixels by mean-color distance.

    Edges are visited in order of increasing color difference; two components
    merge when their mean colors are closer than ``merge_threshold``.
    Components smaller than ``min_size`` are then absorbed along the same
    edge order. The result is a disjoint cover of the image.
    """
    if merge_threshold <= 0:
        raise ValueError("merge_threshold must be positive")
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    flat = img.reshape(h * w, -1)
    a, b = _neighbor_edges(h, w)
    weight = np.linalg.norm(flat[a] - flat[b], axis=1)
    order = np.argsort(weight, kind="stable")
    a, b = a[order].tolist(), b[order].tolist()

    uf = _UnionFind(h * w, list(flat))
    thr2 = merge_threshold ** 2
    for u, v in zip(a, b):
        ru, rv = uf.find(u), uf.find(v)
        if ru == rv:
            continue
        d = uf.csum[ru] / uf.size[ru] - uf.csum[rv] / uf.size[rv]
        if float(d @ d) < thr2:
            uf.union(ru, rv)
    if min_size > 1:
        for u, v in zip(a, b):
            ru, rv = uf.find(u), uf.find(v)
            if ru != rv and (uf.size[ru] < min_size or uf.size[rv] < min_size):
                uf.union(ru, rv)

    roots = np.fromiter((uf.find(i) for i in range(h * w)), dtype=np.int64, count=h * w)
    return _labels_to_regionset(roots, w, h, "oversegmentation")


def _labels_to_regionset(labels_flat, width, height, source, hints=None) -> RegionSet:
    # group pixels by label, ordering regions by their first pixel in scan order
    order = np.argsort(labels_flat, kind="stable")
    sorted_labels = labels_flat[order]
    cuts = np.flatnonzero(np.diff(sorted_labels)) + 1
    groups = np.split(order, cuts)
    groups.sort(key=lambda g: g[0])
    regions = tuple(RegionMask.from_pixels(g, width, height) for g in groups)
    return RegionSet(regions, source, width, height, hints)


def ground_truth_regions(gt: np.ndarray) -> RegionSet:
    """One region per 4-connected component of each non-VOID class."""
    gt = np.asarray(gt)
    h, w = gt.shape
    classes = [int(c) for c in np.unique(gt) if c != VOID]
    if not classes:
        warnings.warn("label map has no labeled pixels; no ground-truth regions", RuntimeWarning, stacklevel=2)
        return RegionSet((), "ground-truth", w, h, ())
    found = []
    for c in classes:
        comp, n = ndimage.label(gt == c)  # default structure is 4-connected
        flat = comp.ravel()
        for k in range(1, n + 1):
            pix = np.flatnonzero(flat == k)
            found.append((pix[0], c, pix))
    found.sort(key=lambda t: t[0])
    regions = tuple(RegionMask.from_pixels(p, w, h) for _, _, p in found)
    return RegionSet(regions, "ground-truth", w, h, tuple(c for _, c, _ in found))


# ---------------------------------------------------------------------------
# region labels and loss partition
# ---------------------------------------------------------------------------

def region_label_and_overlap(region: RegionMask, gt: np.ndarray) -> tuple[int, float]:
    """Majority non-VOID class inside ``region`` and its fraction of the region area.

    Ties go to the lower class id. An all-VOID region returns ``(UNLABELED, 0.0)``.
    """
    vals = np.asarray(gt).ravel()[region.pixels]
    vals = vals[vals != VOID]
    if vals.size == 0:
        return UNLABELED, 0.0
    counts = np.bincount(vals)
    c = int(counts.argmax())
    return c, float(counts[c]) / region.size


@dataclass(frozen=True, eq=False)
class LossPartition:
    """Disjoint single-class pixel cells sharing one covering-region pattern.

    ``cover[k]`` is the boolean row of proposals containing every pixel of cell k.
    """

    pixels: np.ndarray  # labeled pixel ids grouped by cell, scan order inside a cell
    cell_class: np.ndarray
    cell_count: np.ndarray
    cover: np.ndarray
    n_regions: int
    n_pixels: int = field(default=0)
    # sparse ``cover``: covering region ids of all cells back to back, and where each cell starts
    cover_regions: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    cover_start: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __len__(self):
        return self.cell_count.size

    @property
    def cells(self) -> list[np.ndarray]:
        return np.split(self.pixels, np.cumsum(self.cell_count)[:-1]) if len(self) else []


def _pack_columns(member: np.ndarray) -> np.ndarray:
    """Bit-pack each column of a boolean ``(R, N)`` matrix; same bytes as ``np.packbits(member, axis=0).T``."""
    r, n = member.shape
    rows = np.zeros((-(-r // 8) * 8, n), dtype=np.uint8)
    rows[:r] = member
    rows = rows.reshape(-1, 8, n)
    # shifting whole rows is much faster than packbits along the strided axis
    out = rows[:, 0] << 7
    for b in range(1, 8):
        out |= rows[:, b] << (7 - b)
    return out.T


def build_loss_partition(proposals: RegionSet, gt: np.ndarray) -> LossPartition:
    """Group labeled pixels by (ground-truth class, set of covering regions).

    Within one cell every pixel sees the same candidate regions, so for each
    class the winning region is shared, which makes the pixel loss factor
    over cells.
    """
    if len(proposals) == 0:
        raise ValueError("build_loss_partition needs at least one proposal")
    gt = np.asarray(gt)
    if gt.shape != (proposals.height, proposals.width):
        raise ValueError("label map size does not match the region set")
    labels = gt.ravel().astype(np.int64)
    valid = np.flatnonzero(labels != VOID)
    member = proposals.membership
    # skip the column gather when nothing is VOID
    packed = _pack_columns(member if valid.size == labels.size else member[:, valid])
    # class ids are < VOID, so one byte holds them
    keys = np.ascontiguousarray(np.concatenate([labels[valid, None].astype(np.uint8), packed], axis=1))
    # one opaque bytes value per row makes unique a 1-D sort instead of a lexsort over columns
    rows = keys.view(np.dtype((np.void, keys.shape[1]))).ravel()
    _, first, inverse = np.unique(rows, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    # renumber cells by their first pixel in scan order
    rank = np.empty_like(first)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    cell_of = rank[inverse]
    order = np.argsort(cell_of, kind="stable")
    counts = np.bincount(cell_of, minlength=first.size).astype(np.int64)
    reps = valid[np.sort(first)]
    cover = member[:, reps].T.copy()
    start = np.zeros(first.size, dtype=np.int64)
    np.cumsum(cover.sum(axis=1)[:-1], out=start[1:])
    return LossPartition(
        pixels=valid[order],
        cell_class=labels[reps],
        cell_count=counts,
        cover=cover,
        n_regions=len(proposals),
        n_pixels=int(valid.size),
        cover_regions=np.nonzero(cover)[1],
        cover_start=start,
    )


# ---------------------------------------------------------------------------
# text serialization
# ---------------------------------------------------------------------------

def _runs(pixels: np.ndarray) -> list[tuple[int, int]]:
    breaks = np.flatnonzero(np.diff(pixels) != 1) + 1
    return [(int(g[0]), int(g.size)) for g in np.split(pixels, breaks)]


def format_regionset(rs: RegionSet) -> str:
    """Render a region set in the line-oriented text format (see README)."""
    lines = [f"# regionset source={rs.source} width={rs.width} height={rs.height} count={len(rs)}"]
    for i, r in enumerate(rs.regions):
        head = [] if rs.class_hints is None else [str(rs.class_hints[i])]
        head += [str(v) for v in r.bbox]
        runs = " ".join(f"{s} {n}" for s, n in _runs(r.pixels))
        lines.append(f"{' '.join(head)} : {runs}")
    return "\n".join(lines) + "\n"


def parse_regionset(text: str) -> RegionSet:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("# regionset"):
        raise ValueError("missing '# regionset' header line")
    meta = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
    width, height = int(meta["width"]), int(meta["height"])
    regions, hints = [], []
    for lineno, ln in enumerate(lines[1:], start=2):
        if ":" not in ln:
            raise ValueError(f"line {lineno}: expected ':' separator")
        head, runs = ln.split(":", 1)
        head_vals = [int(v) for v in head.split()]
        if len(head_vals) not in (4, 5):
            raise ValueError(f"line {lineno}: expected 4 box values with optional class hint")
        if len(head_vals) == 5:
            hints.append(head_vals[0])
        rv = [int(v) for v in runs.split()]
        if len(rv) % 2:
            raise ValueError(f"line {lineno}: odd number of run values")
        pix = np.concatenate([np.arange(s, s + n) for s, n in zip(rv[::2], rv[1::2])]) if rv else []
        r = RegionMask.from_pixels(pix, width, height)
        if r.bbox != tuple(head_vals[-4:]):
            raise ValueError(f"line {lineno}: box {tuple(head_vals[-4:])} does not match pixels {r.bbox}")
        regions.append(r)
    if hints and len(hints) != len(regions):
        raise ValueError("class hints must be given for all regions or none")
    return RegionSet(tuple(regions), meta.get("source", "mixed"), width, height, tuple(hints) if hints else None)
