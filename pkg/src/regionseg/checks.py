"""Finite-difference checks for every layer and for whole networks.

Each layer check wraps the layer in a random linear functional
``L(x) = sum(G * f(x))`` so that the analytic gradient is the layer's own
backward applied to ``G``. Piecewise layers (relu, max pooling, ROI pooling,
region-to-pixel) pass their argmax decisions as the route, so coordinates
sitting on a kink are skipped rather than failed.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import core
from .core import GradcheckResult, gradcheck
from .losses import class_weights, pixel_loss, pixel_loss_partitioned, region_loss
from .models import Model, ModelConfig
from .region_to_pixel import PixelScoreMap, r2p_backward, r2p_forward
from .regions import RegionMask, RegionSet, build_loss_partition
from .roi_pooling import (bbox_roi_pool_forward, freeform_roi_pool_backward,
                          freeform_roi_pool_forward, rasterize_mask)

LAYER_TOL = 1e-6
MODEL_TOL = 1e-4


def _linear_probe(rng, shape):
    return rng.normal(size=shape)


def check_conv(rng) -> GradcheckResult:
    x = rng.normal(size=(6, 5, 3))
    k = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    g = _linear_probe(rng, (6, 5, 4))

    def f_x(v):
        out, cache = core.conv2d_forward(v, k, b, 1, 1)
        return float((g * out).sum()), core.conv2d_backward(g, cache)[0]

    def f_k(v):
        out, cache = core.conv2d_forward(x, v, b, 1, 1)
        return float((g * out).sum()), core.conv2d_backward(g, cache)[1]

    def f_b(v):
        out, cache = core.conv2d_forward(x, k, v, 1, 1)
        return float((g * out).sum()), core.conv2d_backward(g, cache)[2]

    parts = [gradcheck(f_x, x), gradcheck(f_k, k), gradcheck(f_b, b)]
    return _merge(parts)


def check_relu(rng) -> GradcheckResult:
    x = rng.normal(size=(5, 4, 3))
    g = _linear_probe(rng, x.shape)

    def f(v):
        out, mask = core.relu_forward(v)
        return float((g * out).sum()), core.relu_backward(g, mask)

    return gradcheck(f, x, route=lambda v: v > 0)


def check_maxpool(rng) -> GradcheckResult:
    x = rng.normal(size=(6, 4, 3))
    g = _linear_probe(rng, (3, 2, 3))

    def f(v):
        out, cache = core.maxpool2_forward(v)
        return float((g * out).sum()), core.maxpool2_backward(g, cache)

    return gradcheck(f, x, route=lambda v: core.maxpool2_forward(v)[1][0])


def check_linear(rng) -> GradcheckResult:
    x = rng.normal(size=(4, 7))
    w = rng.normal(size=(7, 5))
    b = rng.normal(size=5)
    g = _linear_probe(rng, (4, 5))

    def f_x(v):
        out, cache = core.linear_forward(v, w, b)
        return float((g * out).sum()), core.linear_backward(g, cache)[0]

    def f_w(v):
        out, cache = core.linear_forward(x, v, b)
        return float((g * out).sum()), core.linear_backward(g, cache)[1]

    def f_b(v):
        out, cache = core.linear_forward(x, w, v)
        return float((g * out).sum()), core.linear_backward(g, cache)[2]

    return _merge([gradcheck(f_x, x), gradcheck(f_w, w), gradcheck(f_b, b)])


def check_log_softmax(rng) -> GradcheckResult:
    x = rng.normal(size=(4, 6))
    g = _linear_probe(rng, x.shape)

    def f(v):
        out = core.log_softmax(v)
        return float((g * out).sum()), core.log_softmax_backward(g, out)

    return gradcheck(f, x)


def _random_region(rng, w, h) -> RegionMask:
    while True:
        m = rng.random((h, w)) < rng.uniform(0.2, 0.7)
        x0, y0 = rng.integers(0, w - 2), rng.integers(0, h - 2)
        x1, y1 = rng.integers(x0 + 1, w), rng.integers(y0 + 1, h)
        box = np.zeros((h, w), dtype=bool)
        box[y0:y1 + 1, x0:x1 + 1] = True
        m &= box
        if m.any():
            return RegionMask.from_mask(m)


def check_roi_pool(rng) -> GradcheckResult:
    fm = rng.normal(size=(6, 6, 3))
    region = _random_region(rng, 12, 12)
    mask = rasterize_mask(region, (12, 12), (6, 6))
    g = _linear_probe(rng, (3, 3, 3))

    def f_free(v):
        roi = freeform_roi_pool_forward(v, mask, (3, 3))
        return float((g * roi.values).sum()), freeform_roi_pool_backward(roi, g)

    def f_box(v):
        roi = bbox_roi_pool_forward(v, mask.bbox_fm, (3, 3))
        return float((g * roi.values).sum()), freeform_roi_pool_backward(roi, g)

    a = gradcheck(f_free, fm, route=lambda v: freeform_roi_pool_forward(v, mask, (3, 3)).argmax)
    b = gradcheck(f_box, fm, route=lambda v: bbox_roi_pool_forward(v, mask.bbox_fm, (3, 3)).argmax)
    return _merge([a, b])


def _random_regionset(rng, w, h, n) -> RegionSet:
    regs = [_random_region(rng, w, h) for _ in range(n - 1)]
    regs.append(RegionMask.from_box(0, 0, w - 1, h - 1, w, h))
    return RegionSet(tuple(regs), "mixed", w, h)


def check_region_to_pixel(rng) -> GradcheckResult:
    rs = _random_regionset(rng, 5, 4, 6)
    s = rng.normal(size=(6, 3))
    g = _linear_probe(rng, (20, 3))

    def f(v):
        pix = r2p_forward(v, rs)
        return float((g * pix.scores).sum()), r2p_backward(g, pix.winner, len(rs))

    return gradcheck(f, s, route=lambda v: r2p_forward(v, rs).winner)


def _random_gt(rng, w, h, c):
    gt = rng.integers(0, c, size=(h, w))
    gt[rng.random((h, w)) < 0.1] = 255
    return gt


def check_pixel_loss(rng) -> GradcheckResult:
    rs = _random_regionset(rng, 6, 5, 7)
    gt = _random_gt(rng, 6, 5, 4)
    s = rng.normal(size=(7, 4))
    part = build_loss_partition(rs, gt)
    checks = []
    for mode in ("balanced", "unbalanced"):
        w = class_weights(gt, 4, mode)

        def f(v, w=w):
            r = pixel_loss_partitioned(v, part, w)
            return r.value, r.grad

        p = r2p_forward(s, rs)

        def f_naive(v, w=w, p=p):
            r = pixel_loss(PixelScoreMap(v, p.winner, p.width, p.height), gt, w)
            return r.value, r.grad

        route = lambda v: r2p_forward(v, rs).winner  # noqa: E731
        checks.append(gradcheck(f, s, route=route))
        checks.append(gradcheck(f_naive, p.scores))
    return _merge(checks)


def check_region_loss(rng) -> GradcheckResult:
    s = rng.normal(size=(6, 4))
    labels = np.array([0, 3, -1, 2, 2, -1])

    def f(v):
        r = region_loss(v, labels)
        return r.value, r.grad

    return gradcheck(f, s)


LAYER_CHECKS = {
    "conv2d": check_conv,
    "relu": check_relu,
    "maxpool2": check_maxpool,
    "linear": check_linear,
    "log_softmax": check_log_softmax,
    "roi_pooling": check_roi_pool,
    "region_to_pixel": check_region_to_pixel,
    "pixel_loss": check_pixel_loss,
    "region_loss": check_region_loss,
}


def layer_checks(seed: int = 0) -> dict[str, GradcheckResult]:
    rng = np.random.default_rng(seed)
    return {name: fn(rng) for name, fn in LAYER_CHECKS.items()}


def _merge(parts) -> GradcheckResult:
    return GradcheckResult(
        max(p.max_rel_error for p in parts),
        sum(p.checked for p in parts),
        [s for p in parts for s in p.skipped],
    )


# ---------------------------------------------------------------------------
# whole network
# ---------------------------------------------------------------------------

def gradcheck_image(seed: int, size: int = 16, n_regions: int = 10, num_classes: int = 4):
    """Random image, label map and overlapping region set for a whole-model check."""
    rng = np.random.default_rng(seed)
    image = rng.random((size, size, 3))
    gt = rng.integers(0, num_classes, size=(size // 4, size // 4)).repeat(4, 0).repeat(4, 1)
    regions = _random_regionset(rng, size, size, n_regions)
    return image, gt, regions


def _route(model: Model, cache):
    c1, m1, cq, c2, m2 = cache.backbone
    heads = [hc[1] for hc in cache.heads]
    return (m1, cq[0], m2, cache.region_arg, cache.box_arg, *heads,
            cache.pixels.winner if cache.pixels is not None else None)


def model_check(cfg: ModelConfig, seed: int = 0, per_param: int = 8, size: int = 16,
                n_regions: int = 10) -> dict[str, GradcheckResult]:
    """Check sampled weights of every parameter tensor against the end-to-end pixel loss.

    The loss is evaluated the straightforward way (region-to-pixel, then a
    per-pixel log-loss), so the partitioned fast path is not involved.
    """
    image, gt, regions = gradcheck_image(seed, size, n_regions, cfg.num_classes)
    model = Model(cfg)
    prepared = model.prepare(regions)
    w = class_weights(gt, cfg.num_classes, cfg.loss)
    rng = np.random.default_rng(seed + 1)
    # small random biases keep the relus away from exact zeros
    for name, p in model.params.items():
        if name.endswith(".b"):
            p.value[:] = rng.normal(scale=0.1, size=p.value.shape)

    def run():
        pix, cache = model.forward_endtoend(image, prepared)
        return pix, cache

    out = {}
    for name in sorted(model.params):
        p = model.params[name]
        base = p.value.copy()

        def f(v, p=p):
            p.value = v.reshape(base.shape)
            model.zero_grad()
            pix, cache = run()
            res = pixel_loss(pix, gt, w)
            model.backward(cache, res.grad, wrt="pixels")
            return res.value, p.grad.copy()

        def route(v, p=p):
            p.value = v.reshape(base.shape)
            _, cache = run()
            return _route(model, cache)

        idx = rng.choice(base.size, size=min(per_param, base.size), replace=False)
        out[name] = gradcheck(f, base, indices=idx, route=route)
        p.value = base
    return out


def full_report(seed: int = 0, fusions=("tied", "separate"), losses=("balanced", "unbalanced"),
                per_param: int = 8, base: ModelConfig | None = None):
    """Rows ``(scope, name, result, tolerance)`` for every layer and model variant."""
    base = base or ModelConfig(num_classes=4)
    rows = [("layer", n, r, LAYER_TOL) for n, r in layer_checks(seed).items()]
    for fusion in fusions:
        for loss in losses:
            cfg = replace(base, fusion=fusion, loss=loss)
            res = model_check(cfg, seed, per_param)
            rows.append(("model", f"{fusion}/{loss}", _merge(list(res.values())), MODEL_TOL))
    return rows


def format_report(rows) -> str:
    lines = [f"{'scope':<7}{'check':<22}{'max_rel_error':>15}{'checked':>9}{'skipped':>9}  status"]
    for scope, name, res, tol in rows:
        status = "ok" if res.max_rel_error < tol and res.checked > 0 else "FAIL"
        lines.append(f"{scope:<7}{name:<22}{res.max_rel_error:15.3e}{res.checked:9d}{len(res.skipped):9d}  {status}")
    return "\n".join(lines) + "\n"


def all_pass(rows) -> bool:
    return all(res.max_rel_error < tol and res.checked > 0 for _, _, res, tol in rows)
