"""Slow, independent reference implementations used only by the tests.

None of these share code paths with the package: loops over pixels and
regions, exact rational arithmetic for bin edges, BFS flood fill, explicit
point-to-segment distances.
"""

from __future__ import annotations

import math
from collections import deque
from fractions import Fraction

import numpy as np

VOID = 255


def numeric_grad(f, x, eps=1e-5):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


# --- region-to-pixel --------------------------------------------------------

def r2p_brute(scores, member):
    """Per pixel, per class: max over covering regions, lowest region id on ties."""
    n_reg, n_pix = member.shape
    n_cls = scores.shape[1]
    best = np.full((n_pix, n_cls), np.nan)
    win = np.full((n_pix, n_cls), -1)
    for p in range(n_pix):
        for c in range(n_cls):
            for r in range(n_reg):
                if member[r, p] and (win[p, c] < 0 or scores[r, c] > best[p, c]):
                    best[p, c] = scores[r, c]
                    win[p, c] = r
    return best, win


def r2p_backward_brute(pix_grad, win, n_reg):
    out = np.zeros((n_reg, pix_grad.shape[1]))
    for p in range(pix_grad.shape[0]):
        for c in range(pix_grad.shape[1]):
            if win[p, c] >= 0:
                out[win[p, c], c] += pix_grad[p, c]
    return out


# --- ROI pooling ------------------------------------------------------------

def bins_exact(start, end, n):
    """Fast R-CNN bin spans ``[floor(i*size/n), ceil((i+1)*size/n))`` with rationals."""
    size = end - start + 1
    out = []
    for i in range(n):
        lo = start + math.floor(Fraction(i * size, n))
        hi = start + math.ceil(Fraction((i + 1) * size, n))
        out.append((lo, hi))
    return out


def roi_pool_brute(fm, mask, bbox, out_size):
    """Returns values, argmax (linear index or -1) by enumerating every bin cell."""
    fh, fw, d = fm.shape
    oh, ow = out_size
    x0, y0, x1, y1 = bbox
    vals = np.zeros((oh, ow, d))
    arg = np.full((oh, ow, d), -1)
    for i, (ys, ye) in enumerate(bins_exact(y0, y1, oh)):
        for j, (xs, xe) in enumerate(bins_exact(x0, x1, ow)):
            for ch in range(d):
                best = None
                for y in range(max(ys, 0), min(ye, fh)):
                    for x in range(max(xs, 0), min(xe, fw)):
                        if not mask[y, x]:
                            continue
                        v = fm[y, x, ch]
                        if best is None or v > best:
                            best, arg[i, j, ch] = v, y * fw + x
                if best is not None:
                    vals[i, j, ch] = best
    return vals, arg


def rasterize_brute(mask_img, stride):
    h, w = mask_img.shape
    fh, fw = h // stride, w // stride
    counts = np.zeros((fh, fw), dtype=int)
    for y in range(h):
        for x in range(w):
            if mask_img[y, x]:
                counts[y // stride, x // stride] += 1
    keep = 2 * counts >= stride * stride
    if not keep.any():
        best = max(range(fh * fw), key=lambda k: (counts.flat[k], -k))
        keep.flat[best] = True
    return keep


# --- regions ----------------------------------------------------------------

def flood_fill_components(gt):
    """4-connected components per non-VOID class by BFS; returns a list of (class, pixel set)."""
    h, w = gt.shape
    seen = np.zeros((h, w), dtype=bool)
    comps = []
    for y in range(h):
        for x in range(w):
            if seen[y, x] or gt[y, x] == VOID:
                continue
            c = gt[y, x]
            q = deque([(y, x)])
            seen[y, x] = True
            pix = set()
            while q:
                cy, cx = q.popleft()
                pix.add(cy * w + cx)
                for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                    if 0 <= ny < h and 0 <= nx < w and not seen[ny, nx] and gt[ny, nx] == c:
                        seen[ny, nx] = True
                        q.append((ny, nx))
            comps.append((int(c), frozenset(pix)))
    return comps


# --- losses -----------------------------------------------------------------

def pixel_loss_naive(region_scores, member, gt, w):
    """Per-pixel loop: max over covering regions, weighted log-softmax, routed grads."""
    n_reg, n_pix = member.shape
    n_cls = region_scores.shape[1]
    labels = gt.ravel()
    value = 0.0
    grad = np.zeros_like(region_scores)
    for p in range(n_pix):
        y = labels[p]
        if y == VOID:
            continue
        s = np.empty(n_cls)
        win = np.empty(n_cls, dtype=int)
        for c in range(n_cls):
            cand = [r for r in range(n_reg) if member[r, p]]
            r_best = cand[0]
            for r in cand[1:]:
                if region_scores[r, c] > region_scores[r_best, c]:
                    r_best = r
            s[c] = region_scores[r_best, c]
            win[c] = r_best
        m = s.max()
        lse = m + math.log(sum(math.exp(v - m) for v in s))
        value -= w[y] * (s[y] - lse)
        prob = np.exp(s - lse)
        for c in range(n_cls):
            grad[win[c], c] += w[y] * (prob[c] - (1.0 if c == y else 0.0))
    return value, grad


# --- metrics ----------------------------------------------------------------

def _seg_dist(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    t = ((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)
    t = min(1.0, max(0.0, t))
    qx, qy = ax + t * dx, ay + t * dy
    return math.hypot(px - qx, py - qy)


def edge_distance_brute(gt):
    """Distance from each pixel center to every label-change crack segment, minimized by brute force.

    Pixel (y, x) spans ``[x, x+1] x [y, y+1]``; its center is ``(x+0.5, y+0.5)``.
    """
    h, w = gt.shape
    segs = []
    for y in range(h):
        for x in range(w - 1):
            a, b = gt[y, x], gt[y, x + 1]
            if a != b and a != VOID and b != VOID:
                segs.append((x + 1, y, x + 1, y + 1))
    for y in range(h - 1):
        for x in range(w):
            a, b = gt[y, x], gt[y + 1, x]
            if a != b and a != VOID and b != VOID:
                segs.append((x, y + 1, x + 1, y + 1))
    out = np.full((h, w), np.inf)
    for y in range(h):
        for x in range(w):
            for s in segs:
                out[y, x] = min(out[y, x], _seg_dist(x + 0.5, y + 0.5, *s))
    return out


def confusion_brute(pred, gt, n_cls, mask=None):
    cm = np.zeros((n_cls, n_cls), dtype=int)
    for idx, (p, g) in enumerate(zip(np.ravel(pred), np.ravel(gt))):
        if g == VOID or (mask is not None and not np.ravel(mask)[idx]):
            continue
        cm[g, p] += 1
    return cm


# --- prediction rules -------------------------------------------------------

def eq1_label(scores, member, p):
    """Baseline rule: per-region softmax, max over covering regions, argmax over classes."""
    best_c, best_v = 0, -1.0
    for r in range(member.shape[0]):
        if not member[r, p]:
            continue
        e = np.exp(scores[r] - scores[r].max())
        prob = e / e.sum()
        for c in range(scores.shape[1]):
            if prob[c] > best_v or (prob[c] == best_v and c < best_c):
                best_v, best_c = prob[c], c
    return best_c


def eq3_label(scores, member, p):
    """End-to-end rule: max over covering regions per class, softmax, argmax."""
    n_cls = scores.shape[1]
    s = np.array([max(scores[r, c] for r in range(member.shape[0]) if member[r, p]) for c in range(n_cls)])
    e = np.exp(s - s.max())
    prob = e / e.sum()
    return int(np.argmax(prob))
