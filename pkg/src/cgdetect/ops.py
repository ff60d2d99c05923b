"""Layer primitives on NCHW arrays: forward passes and exact backward passes.

Every function here is pure: it allocates fresh outputs and never mutates its
inputs. Production paths run float32; the gradient-check harness runs the same
code at float64. Each op verifies its output is finite and raises
:class:`NumericError` otherwise.
"""
from __future__ import annotations

import numpy as np

# The universal array value: (batch, channel, height, width), width fastest.
Tensor4 = np.ndarray

DEFAULT_DTYPE = np.float32

# im2col buffers are capped at this size; bigger batches are processed in
# chunks so peak memory stays bounded regardless of batch size.
_COLS_BYTE_LIMIT = 256 * 1024 * 1024


class NumericError(ArithmeticError):
    """An op produced (or was fed) NaN/Inf where finite values are required."""


def ensure_finite(name: str, *arrays: np.ndarray) -> None:
    # cheap one-pass probe: any NaN/Inf poisons the sum; a finite sum of a
    # float32 array can only hide an overflow of the sum itself, which the
    # full scan below then rules out
    for a in arrays:
        if not np.isfinite(a.sum()) and not np.isfinite(a).all():
            raise NumericError(f"{name}: non-finite values encountered")


def _check_nchw(x: np.ndarray, name: str = "x") -> None:
    if x.ndim != 4:
        raise ValueError(f"{name}: expected 4-D NCHW array, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution (cross-correlation), via im2col + matmul
# ---------------------------------------------------------------------------

def _conv_out_hw(h: int, w: int, kh: int, kw: int, stride: int, pad: int):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"non-positive conv output size for input {h}x{w}, "
                         f"kernel {kh}x{kw}, stride {stride}, pad {pad}")
    return oh, ow


def _check_conv_args(x, w, b, stride, pad):
    _check_nchw(x)
    if w.ndim != 4:
        raise ValueError(f"kernel must be 4-D (out_c, in_c, kh, kw), got {w.shape}")
    oc, ic, kh, kw = w.shape
    if kh != kw or kh not in (3, 5):
        raise ValueError(f"kernel must be square 3x3 or 5x5, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if not 0 <= pad < kh:
        raise ValueError(f"pad must lie in [0, {kh}), got {pad}")
    if ic != x.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {ic}")
    if b.shape != (oc,):
        raise ValueError(f"bias must have shape ({oc},), got {b.shape}")


def _use_mega(c, kh, kw, stride):
    # the mega-GEMM path only pays off when the tap matrices are wide enough
    # for GEMM to be compute-bound
    return stride == 1 and c * kh * kw >= 64


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Unfold x into a (n, c*kh*kw, oh*ow) column tensor.

    Channels-first column layout keeps the gather cache-friendly (the
    innermost copy runs along contiguous image rows) and lets the matmul
    produce NCHW output directly.
    """
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, pad)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return cols, oh, ow


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int):
    """Scatter-add columns back onto the input grid (adjoint of _im2col)."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, pad)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    # within one (i, j) tap the strided windows never overlap, so += is safe
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                cols6[:, :, i, j]
    if pad:
        return xp[:, :, pad:pad + h, pad:pad + w]
    return xp


def _batch_chunks(n: int, per_image_col_elems: int, itemsize: int):
    step = max(1, _COLS_BYTE_LIMIT // max(per_image_col_elems * itemsize, 1))
    for lo in range(0, n, step):
        yield lo, min(n, lo + step)


# Stride-1 convolutions run on a "mega image": the batch is stacked into one
# tall channels-outermost padded canvas, so each kernel tap (i, j) becomes a
# single GEMM of the (oc, c) tap matrix against one contiguous slab of the
# flattened canvas. Windows straddling two images only produce junk rows that
# the final extraction discards. This avoids the giant gather that im2col
# needs for wide-channel inputs; stride 2 keeps the classic im2col path.

def _mega_canvas(x: np.ndarray, kh: int, kw: int, pad: int):
    """(c, n*hp*wp + kw-1) canvas with per-image zero borders and a tail guard."""
    n, c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    flat = np.zeros((c, n * hp * wp + (kw - 1)), dtype=x.dtype)
    view = flat[:, :n * hp * wp].reshape(c, n, hp, wp)
    view[:, :, pad:pad + h, pad:pad + w] = x.transpose(1, 0, 2, 3)
    return flat, hp, wp


def _conv_s1_forward(x, w, b, pad):
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    oh, ow = _conv_out_hw(h, wd, kh, kw, 1, pad)
    flat, hp, wp = _mega_canvas(x, kh, kw, pad)
    span = n * hp * wp - (kh - 1) * wp - (kw - 1)
    acc = np.zeros((oc, span), dtype=x.dtype)
    tmp = np.empty_like(acc)
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            np.matmul(np.ascontiguousarray(w[:, :, i, j]),
                      flat[:, off:off + span], out=tmp)
            acc += tmp
    full = np.empty((oc, n * hp * wp), dtype=x.dtype)
    full[:, :span] = acc
    out = full.reshape(oc, n, hp, wp)[:, :, :oh, :ow].transpose(1, 0, 2, 3) \
        + b.reshape(1, oc, 1, 1)
    return out


def _conv_s1_grad_w(grad_out, x, w_shape, pad):
    n, c, h, wd = x.shape
    oc, _, kh, kw = w_shape
    oh, ow = grad_out.shape[2:]
    flat, hp, wp = _mega_canvas(x, kh, kw, pad)
    span = n * hp * wp - (kh - 1) * wp - (kw - 1)
    gfull = np.zeros((oc, n * hp * wp), dtype=x.dtype)
    gfull.reshape(oc, n, hp, wp)[:, :, :oh, :ow] = grad_out.transpose(1, 0, 2, 3)
    gflat = gfull[:, :span]
    grad_w = np.empty(w_shape, dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            grad_w[:, :, i, j] = gflat @ flat[:, off:off + span].T
    return grad_w


def conv2d_forward(x: Tensor4, w: np.ndarray, b: np.ndarray,
                   stride: int = 1, pad: int = 0) -> Tensor4:
    """Cross-correlate x with kernel w and add per-channel bias b."""
    _check_conv_args(x, w, b, stride, pad)
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    oh, ow = _conv_out_hw(h, wd, kh, kw, stride, pad)
    out = np.empty((n, oc, oh, ow), dtype=x.dtype)
    mega = _use_mega(c, kh, kw, stride)
    per_image = (h + 2 * pad) * (wd + 2 * pad) * c if mega \
        else oh * ow * c * kh * kw
    for lo, hi in _batch_chunks(n, per_image, x.itemsize):
        if mega:
            out[lo:hi] = _conv_s1_forward(x[lo:hi], w, b, pad)
        else:
            cols, _, _ = _im2col(x[lo:hi], kh, kw, stride, pad)
            y = w.reshape(1, oc, -1) @ cols + b.reshape(1, oc, 1)
            out[lo:hi] = y.reshape(hi - lo, oc, oh, ow)
    ensure_finite("conv2d_forward", out)
    return out


def conv2d_backward(grad_out: Tensor4, x: Tensor4, w: np.ndarray,
                    stride: int = 1, pad: int = 0,
                    need_input_grad: bool = True):
    """Exact gradients of conv2d_forward.

    Returns (grad_x, grad_w, grad_b); grad_x is None when need_input_grad is
    False (used at the first layer of each stream, whose input is data).
    """
    _check_nchw(grad_out, "grad_out")
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    oh, ow = _conv_out_hw(h, wd, kh, kw, stride, pad)
    if grad_out.shape != (n, oc, oh, ow):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match "
                         f"forward output {(n, oc, oh, ow)}")
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_w = np.zeros_like(w)
    grad_x = np.empty_like(x) if need_input_grad else None
    if _use_mega(c, kh, kw, stride):
        per_image = (h + 2 * pad) * (wd + 2 * pad) * c
        # input grad is itself a stride-1 convolution of the padded grad_out
        # with the channel-transposed, spatially flipped kernel
        wt = None
        if need_input_grad:
            wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        for lo, hi in _batch_chunks(n, per_image, x.itemsize):
            grad_w += _conv_s1_grad_w(grad_out[lo:hi], x[lo:hi], w.shape, pad)
            if need_input_grad:
                grad_x[lo:hi] = _conv_s1_forward(
                    grad_out[lo:hi], wt, np.zeros(c, dtype=x.dtype), kh - 1 - pad)
    else:
        wmat = w.reshape(oc, c * kh * kw)
        for lo, hi in _batch_chunks(n, oh * ow * c * kh * kw, x.itemsize):
            cols, _, _ = _im2col(x[lo:hi], kh, kw, stride, pad)
            g = grad_out[lo:hi].reshape(hi - lo, oc, oh * ow)
            grad_w += (g @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            if need_input_grad:
                grad_x[lo:hi] = _col2im(wmat.T[None] @ g, x[lo:hi].shape,
                                        kh, kw, stride, pad)
    if need_input_grad:
        ensure_finite("conv2d_backward", grad_x, grad_w, grad_b)
    else:
        ensure_finite("conv2d_backward", grad_w, grad_b)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batchnorm2d_forward(x: Tensor4, gamma: np.ndarray, beta: np.ndarray, *,
                        mode: str, running_mean: np.ndarray | None = None,
                        running_var: np.ndarray | None = None,
                        momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel normalization.

    Train mode normalizes with batch statistics and, when running buffers are
    supplied, updates them in place by exponential moving average (unbiased
    variance goes into the running buffer, biased into the normalizer). Eval
    mode normalizes with the running statistics. Returns (y, cache); cache is
    None in eval mode.
    """
    _check_nchw(x)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ValueError("train-mode batchnorm needs at least 2 values per channel")
        bmean = x.mean(axis=(0, 2, 3))
        bvar = x.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(bvar + eps)
        xhat = (x - bmean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        y = gamma.reshape(1, c, 1, 1) * xhat + beta.reshape(1, c, 1, 1)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * bmean
            running_var *= 1.0 - momentum
            running_var += momentum * (bvar * (m / (m - 1)))
        ensure_finite("batchnorm2d_forward", y)
        return y, (xhat, inv_std, gamma)
    if mode == "eval":
        if running_mean is None or running_var is None:
            raise ValueError("eval-mode batchnorm requires running statistics")
        inv_std = 1.0 / np.sqrt(running_var + eps)
        y = (gamma * inv_std).reshape(1, c, 1, 1) * (x - running_mean.reshape(1, c, 1, 1)) \
            + beta.reshape(1, c, 1, 1)
        ensure_finite("batchnorm2d_forward", y)
        return y, None
    raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def batchnorm2d_backward(grad_out: Tensor4, cache):
    """Gradients through batch statistics (mean/var are not constants)."""
    if cache is None:
        raise ValueError("batchnorm backward requires the train-mode cache")
    xhat, inv_std, gamma = cache
    n, c, h, w = grad_out.shape
    m = n * h * w
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    g = grad_out * gamma.reshape(1, c, 1, 1)
    g_sum = g.sum(axis=(0, 2, 3), keepdims=True)
    gx_sum = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
    grad_x = (inv_std.reshape(1, c, 1, 1) / m) * (m * g - g_sum - xhat * gx_sum)
    ensure_finite("batchnorm2d_backward", grad_x, grad_gamma, grad_beta)
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# pointwise / pooling / head ops
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # gradient at exactly 0 is defined as 0
    return grad_out * (x > 0)


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = x @ w.T + b for x of shape (n, f), w of shape (out, f)."""
    if x.ndim != 2 or w.ndim != 2:
        raise ValueError("linear expects 2-D input and weight")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"feature mismatch: input {x.shape[1]}, weight {w.shape[1]}")
    y = x @ w.T + b
    ensure_finite("linear_forward", y)
    return y


def linear_backward(grad_out: np.ndarray, x: np.ndarray, w: np.ndarray):
    grad_x = grad_out @ w
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    ensure_finite("linear_backward", grad_x, grad_w, grad_b)
    return grad_x, grad_w, grad_b


def global_avg_pool_forward(x: Tensor4) -> Tensor4:
    _check_nchw(x)
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(grad_out: Tensor4, in_shape) -> Tensor4:
    n, c, h, w = in_shape
    return np.broadcast_to(grad_out / (h * w), in_shape).astype(grad_out.dtype, copy=True)


def _pool_windows(x: Tensor4):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"2x2 pooling needs even spatial dims, got {h}x{w}")
    oh, ow = h // 2, w // 2
    win = x.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    return win, oh, ow


def maxpool2x2_forward(x: Tensor4):
    """Non-overlapping 2x2 max pooling. Returns (y, argmax indices)."""
    win, oh, ow = _pool_windows(x)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool2x2_backward(grad_out: Tensor4, idx: np.ndarray, in_shape) -> Tensor4:
    n, c, h, w = in_shape
    oh, ow = h // 2, w // 2
    flat = np.zeros((n, c, oh, ow, 4), dtype=grad_out.dtype)
    np.put_along_axis(flat, idx[..., None], grad_out[..., None], axis=-1)
    return flat.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(in_shape)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood with log-sum-exp stabilization.

    Returns (loss, grad_logits) with grad = (softmax - onehot) / n.
    """
    if logits.ndim != 2:
        raise ValueError("logits must be 2-D (n, classes)")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = float(-logp[np.arange(n), labels].mean())
    p = np.exp(logp)
    p[np.arange(n), labels] -= 1.0
    grad = p / n
    ensure_finite("softmax_cross_entropy", grad)
    if not np.isfinite(loss):
        raise NumericError("softmax_cross_entropy: non-finite loss")
    return loss, grad
