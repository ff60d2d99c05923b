"""Softmax-weighted downsampling.

Each non-overlapping window contributes the softmax of its values as weights
and outputs the weighted sum: w_i = exp(a_i) / sum_j exp(a_j),
out = sum_i w_i * a_i. Exponentials are stabilized by subtracting the window
max, which leaves the weights unchanged.

The backward pass uses the exact derivative d(out)/d(a_i) = w_i * (1 + a_i -
out) rather than any approximation, so the operator is verifiable by finite
differences. Note the derivative can be negative: SoftPool is not elementwise
monotone.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import Tensor4, ensure_finite, _check_nchw


@dataclass(frozen=True)
class SoftPoolConfig:
    """Window geometry. Only non-overlapping windows (kernel == stride) are
    supported; the network uses 2x2 / stride 2 everywhere."""
    kernel: tuple[int, int] = (2, 2)
    stride: tuple[int, int] = (2, 2)

    def __post_init__(self):
        if self.kernel != self.stride:
            raise ValueError("overlapping softpool windows are not supported "
                             "(kernel must equal stride)")
        if min(self.kernel) < 1:
            raise ValueError("kernel dims must be positive")


def _windows(x: Tensor4, cfg: SoftPoolConfig):
    """View x as (n, c, oh, kh, ow, kw); window axes are (3, 5)."""
    n, c, h, w = x.shape
    kh, kw = cfg.kernel
    if h % kh or w % kw:
        raise ValueError(f"spatial dims {h}x{w} not divisible by window {kh}x{kw}")
    return x.reshape(n, c, h // kh, kh, w // kw, kw), h // kh, w // kw


def _quadrants(x: Tensor4):
    return (x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2],
            x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2])


def _soft_parts_2x2(x: Tensor4):
    """(values, exp weights numerators, denominator, pooled output) for the
    2x2 window, computed with elementwise quadrant arithmetic."""
    vals = _quadrants(x)
    m = np.maximum(np.maximum(vals[0], vals[1]), np.maximum(vals[2], vals[3]))
    es = [np.exp(v - m) for v in vals]
    den = es[0] + es[1] + es[2] + es[3]
    out = (es[0] * vals[0] + es[1] * vals[1]
           + es[2] * vals[2] + es[3] * vals[3]) / den
    return vals, es, den, out


def softpool_forward(x: Tensor4, cfg: SoftPoolConfig = SoftPoolConfig()) -> Tensor4:
    _check_nchw(x)
    ensure_finite("softpool_forward input", x)
    if cfg.kernel == (2, 2):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError(f"spatial dims {x.shape[2]}x{x.shape[3]} not "
                             f"divisible by window 2x2")
        out = _soft_parts_2x2(x)[3]
    else:
        win, oh, ow = _windows(x, cfg)
        e = np.exp(win - win.max(axis=(3, 5), keepdims=True))
        wgt = e / e.sum(axis=(3, 5), keepdims=True)
        out = (wgt * win).sum(axis=(3, 5))
    ensure_finite("softpool_forward", out)
    return out


def softpool_backward(grad_out: Tensor4, x: Tensor4,
                      cfg: SoftPoolConfig = SoftPoolConfig()) -> Tensor4:
    n, c, h, w = x.shape
    kh, kw = cfg.kernel
    if h % kh or w % kw:
        raise ValueError(f"spatial dims {h}x{w} not divisible by window {kh}x{kw}")
    if grad_out.shape != (n, c, h // kh, w // kw):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match "
                         f"pooled output {(n, c, h // kh, w // kw)}")
    if cfg.kernel == (2, 2):
        vals, es, den, out = _soft_parts_2x2(x)
        grad_x = np.empty_like(x)
        scale = grad_out / den
        for gq, v, e in zip(_quadrants(grad_x), vals, es):
            gq[...] = scale * e * (1.0 + v - out)
    else:
        win, _, _ = _windows(x, cfg)
        e = np.exp(win - win.max(axis=(3, 5), keepdims=True))
        wgt = e / e.sum(axis=(3, 5), keepdims=True)
        out = (wgt * win).sum(axis=(3, 5), keepdims=True)
        gwin = grad_out[:, :, :, None, :, None] * wgt * (1.0 + win - out)
        grad_x = gwin.reshape(x.shape)
    ensure_finite("softpool_backward", grad_x)
    return grad_x
