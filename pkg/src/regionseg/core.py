"""Dense numeric core: layer forward/backward pairs and a finite-difference checker.

Arrays are plain float64 numpy arrays laid out as H x W x D for feature maps.
Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes
the upstream gradient and that cache. Forward functions never mutate inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@dataclass
class Param:
    """A trainable array with its gradient and momentum buffer."""

    value: np.ndarray
    grad: np.ndarray = field(init=False)
    momentum_buf: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.momentum_buf = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d_forward(x, kernels, bias=None, stride: int = 1, pad: int = 0):
    """Cross-correlate an H x W x Din map with k x k x Din x Dout kernels."""
    x = np.asarray(x, dtype=DTYPE)
    kernels = np.asarray(kernels, dtype=DTYPE)
    if x.ndim != 3 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects HxWxD input and kxkxDinxDout kernels, got {x.shape} and {kernels.shape}")
    k, k2, d_in, d_out = kernels.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {k}x{k2}")
    if x.shape[2] != d_in:
        raise ShapeError(f"input depth {x.shape[2]} does not match kernel depth {d_in}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")

    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
    if xp.shape[0] < k or xp.shape[1] < k:
        raise ShapeError("kernel larger than padded input")
    win = sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride]
    h_out, w_out = win.shape[:2]
    # (H', W', Din, k, k) -> (H'W', k*k*Din) ordered to match kernels.reshape
    cols = win.transpose(0, 1, 3, 4, 2).reshape(h_out * w_out, k * k * d_in)
    out = cols @ kernels.reshape(k * k * d_in, d_out)
    if bias is not None:
        out = out + bias
    out = out.reshape(h_out, w_out, d_out)
    cache = (cols, kernels, xp.shape, x.shape, stride, pad, bias is not None)
    return out, cache


def conv2d_backward(dout, cache):
    """Return ``(dx, dkernels, dbias)``; ``dbias`` is None when no bias was used."""
    cols, kernels, xp_shape, x_shape, stride, pad, has_bias = cache
    k, _, d_in, d_out = kernels.shape
    h_out, w_out = dout.shape[:2]
    dflat = dout.reshape(h_out * w_out, d_out)

    dkernels = (cols.T @ dflat).reshape(kernels.shape)
    dbias = dflat.sum(axis=0) if has_bias else None

    dcols = (dflat @ kernels.reshape(k * k * d_in, d_out).T).reshape(h_out, w_out, k, k, d_in)
    dxp = np.zeros(xp_shape, dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            dxp[i:i + stride * h_out:stride, j:j + stride * w_out:stride, :] += dcols[:, :, i, j, :]
    if pad:
        dxp = dxp[pad:pad + x_shape[0], pad:pad + x_shape[1], :]
    return dxp, dkernels, dbias


# ---------------------------------------------------------------------------
# pointwise and pooling
# ---------------------------------------------------------------------------

def relu_forward(x):
    x = np.asarray(x, dtype=DTYPE)
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(dout, mask):
    return np.where(mask, dout, 0.0)


def maxpool2_forward(x):
    """2x2 non-overlapping max pooling; ties go to the first cell in row-major order."""
    x = np.asarray(x, dtype=DTYPE)
    h, w, d = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial size, got {h}x{w}")
    blocks = x.reshape(h // 2, 2, w // 2, 2, d).transpose(0, 2, 4, 1, 3).reshape(h // 2, w // 2, d, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def maxpool2_backward(dout, cache):
    arg, shape = cache
    h, w, d = shape
    onehot = np.zeros(arg.shape + (4,), dtype=DTYPE)
    np.put_along_axis(onehot, arg[..., None], dout[..., None], axis=-1)
    return onehot.reshape(h // 2, w // 2, d, 2, 2).transpose(0, 3, 1, 4, 2).reshape(h, w, d)


def linear_forward(x, weights, bias):
    """Affine map on the last axis: ``x @ weights + bias`` (x may be batched)."""
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ShapeError(f"linear: input {x.shape}, weights {weights.shape}, bias {bias.shape}")
    return x @ weights + bias, (x, weights)


def linear_backward(dout, cache):
    x, weights = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dout @ weights.T, x2.T @ d2, d2.sum(axis=0)


# ---------------------------------------------------------------------------
# softmax family (last axis)
# ---------------------------------------------------------------------------

def softmax(scores):
    s = np.asarray(scores, dtype=DTYPE)
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(scores):
    s = np.asarray(scores, dtype=DTYPE)
    z = s - s.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax_backward(dout, logp):
    """Gradient through ``log_softmax`` given its output ``logp``."""
    return dout - np.exp(logp) * dout.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

@dataclass
class GradcheckResult:
    max_rel_error: float
    checked: int
    skipped: list = field(default_factory=list)

    def __float__(self):
        return self.max_rel_error


def rel_error(analytic, numeric):
    a, n = abs(analytic), abs(numeric)
    return abs(analytic - numeric) / max(a, n, 1e-8)


def gradcheck(
    fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    eps: float = 1e-5,
    indices=None,
    route: Callable[[np.ndarray], object] | None = None,
) -> GradcheckResult:
    """Compare ``fn``'s analytic gradient against central differences.

    ``fn(x)`` returns ``(value, grad)``. ``indices`` restricts the check to a
    subset of flat coordinates. When ``route`` is given it must return the
    discrete argmax decisions taken at ``x``; coordinates whose +-eps
    perturbation changes them sit on a kink and are skipped, not failed.
    """
    x = np.array(x, dtype=DTYPE)
    _, grad = fn(x.copy())
    grad = np.asarray(grad, dtype=DTYPE).ravel()
    base_route = _route_key(route(x)) if route is not None else None
    flat = x.ravel()
    if indices is None:
        indices = range(flat.size)

    worst, checked, skipped = 0.0, 0, []
    for i in indices:
        i = int(i)
        xp, xm = flat.copy(), flat.copy()
        xp[i] += eps
        xm[i] -= eps
        xp, xm = xp.reshape(x.shape), xm.reshape(x.shape)
        if route is not None and (
            _route_key(route(xp)) != base_route or _route_key(route(xm)) != base_route
        ):
            skipped.append(i)
            continue
        numeric = (fn(xp)[0] - fn(xm)[0]) / (2 * eps)
        worst = max(worst, rel_error(grad[i], numeric))
        checked += 1
    return GradcheckResult(worst, checked, skipped)


def _route_key(r):
    if isinstance(r, (list, tuple)):
        return tuple(_route_key(v) for v in r)
    if isinstance(r, np.ndarray):
        return r.tobytes()
    return r
