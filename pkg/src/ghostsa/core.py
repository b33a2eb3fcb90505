"""Dense NCHW tensor ops with explicit backward passes.

Every feature map is a 4-d ``float32`` numpy array laid out N, C, H, W.
Forward functions allocate fresh outputs; the only in-place mutation is the
running-statistics update in :func:`batch_norm`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DimensionError, ValidationError

DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_AXES = ("batch", "channels", "height", "width")


def check_tensor4(x, name="input"):
    """Return ``x`` as a C-contiguous float32 NCHW array or raise."""
    x = np.ascontiguousarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise DimensionError(f"{name} must be rank 4 (N, C, H, W), got rank {x.ndim}", axis="rank")
    for axis, size in zip(_AXES, x.shape):
        if size < 1:
            raise DimensionError(f"{name} has empty {axis} axis", axis=axis)
    return x


@dataclass(frozen=True)
class ConvGeometry:
    """Shape contract of a square-kernel 2-d convolution.

    Output size follows the usual floor rule
    ``h_o = (h_i + 2*padding - kernel) // stride + 1``.
    """

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.kernel < 1:
            raise ValidationError(f"kernel must be >= 1, got {self.kernel}")
        if self.stride < 1:
            raise ValidationError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValidationError(f"padding must be >= 0, got {self.padding}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValidationError("channel counts must be >= 1")
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValidationError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    def output_hw(self, h, w):
        span_h = h + 2 * self.padding - self.kernel
        span_w = w + 2 * self.padding - self.kernel
        if span_h < 0:
            raise DimensionError(
                f"kernel {self.kernel} exceeds padded height {h + 2 * self.padding}", axis="height"
            )
        if span_w < 0:
            raise DimensionError(
                f"kernel {self.kernel} exceeds padded width {w + 2 * self.padding}", axis="width"
            )
        return span_h // self.stride + 1, span_w // self.stride + 1

    def output_shape(self, input_shape):
        n, c, h, w = input_shape
        if c != self.in_channels:
            raise DimensionError(
                f"expected {self.in_channels} input channels, got {c}", axis="channels"
            )
        return (n, self.out_channels) + self.output_hw(h, w)


def check_conv_operands(x, weight, bias, geom):
    """Validate a (input, filter bank, bias) triple against ``geom``."""
    if x.shape[1] != geom.in_channels:
        raise DimensionError(
            f"input has {x.shape[1]} channels, geometry expects {geom.in_channels}",
            axis="channels",
        )
    if tuple(weight.shape) != geom.weight_shape:
        raise DimensionError(
            f"weight shape {tuple(weight.shape)} does not match geometry {geom.weight_shape}",
            axis="weight",
        )
    if bias is not None and np.shape(bias) != (geom.out_channels,):
        raise DimensionError(
            f"bias must have shape ({geom.out_channels},), got {np.shape(bias)}", axis="bias"
        )


def pad_input(x, padding):
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def extract_patches(x, kernel, stride, padding):
    """Strided view of shape (N, C, H_o, W_o, k, k) over the zero-padded input."""
    xp = pad_input(x, padding)
    view = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def _is_pointwise(geom):
    return geom.kernel == 1 and geom.stride == 1 and geom.padding == 0


def im2col(x, geom):
    """Patch matrix per group: shape (groups, N*H_o*W_o, C_g*k*k)."""
    n, c, h, w = x.shape
    g = geom.groups
    k = geom.kernel
    if _is_pointwise(geom):
        return x.reshape(n, g, c // g, h * w).transpose(1, 0, 3, 2).reshape(g, n * h * w, c // g)
    patches = extract_patches(x, k, geom.stride, geom.padding)
    ho, wo = patches.shape[2:4]
    patches = patches.reshape(n, g, c // g, ho, wo, k, k)
    return patches.transpose(1, 0, 3, 4, 2, 5, 6).reshape(g, n * ho * wo, (c // g) * k * k)


def col2im(cols, input_shape, geom):
    """Scatter-add a patch-matrix gradient back onto the input grid."""
    n, c, h, w = input_shape
    g, k, s, p = geom.groups, geom.kernel, geom.stride, geom.padding
    if _is_pointwise(geom):
        out = cols.reshape(g, n, h * w, c // g).transpose(1, 0, 3, 2).reshape(n, c, h, w)
        return np.ascontiguousarray(out)
    ho, wo = geom.output_hw(h, w)
    d = cols.reshape(g, n, ho, wo, c // g, k, k).transpose(1, 0, 4, 5, 6, 2, 3)
    d = d.reshape(n, c, k, k, ho, wo)
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + s * ho : s, j : j + s * wo : s] += d[:, :, i, j]
    if p:
        out = out[:, :, p : p + h, p : p + w]
    return np.ascontiguousarray(out)


def iter_taps(x, geom):
    """Yield ``(c, i, j, xs)`` for every filter tap in fixed (c, i, j) order.

    ``xs`` has shape (N, groups, H_o, W_o): the input samples that tap ``(c, i, j)``
    of every group's filters sees.
    """
    n, c, h, w = x.shape
    g, k, s = geom.groups, geom.kernel, geom.stride
    ho, wo = geom.output_hw(h, w)
    xp = pad_input(x, geom.padding).reshape(n, g, c // g, h + 2 * geom.padding, w + 2 * geom.padding)
    for ci in range(c // g):
        for i in range(k):
            for j in range(k):
                yield ci, i, j, xp[:, :, ci, i : i + s * ho : s, j : j + s * wo : s]


def gemm_conv(cols, weight, geom, n, ho, wo):
    g = geom.groups
    og = geom.out_channels // g
    wmat = weight.reshape(g, og, -1).transpose(0, 2, 1)
    out = np.matmul(cols, wmat)
    return out.reshape(g, n, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(n, g * og, ho, wo)


def _grad_to_cols(grad_out, geom):
    n, _, ho, wo = grad_out.shape
    g = geom.groups
    og = geom.out_channels // g
    return grad_out.reshape(n, g, og, ho, wo).transpose(1, 0, 3, 4, 2).reshape(g, n * ho * wo, og)


def conv2d(x, weight, bias, geom, method="im2col"):
    """Cross-correlation ``O = I * f + b`` with zero padding.

    ``method="im2col"`` lowers to one matrix product per group.  ``method="direct"``
    accumulates one filter tap at a time in (channel, row, col) order; it is the
    reference loop the shift kernel mirrors bit for bit.
    """
    x = check_tensor4(x)
    weight = np.asarray(weight, dtype=DTYPE)
    check_conv_operands(x, weight, bias, geom)
    n = x.shape[0]
    ho, wo = geom.output_hw(x.shape[2], x.shape[3])
    if method == "im2col":
        out = gemm_conv(im2col(x, geom), weight, geom, n, ho, wo)
    elif method == "direct":
        g = geom.groups
        og = geom.out_channels // g
        wg = weight.reshape(g, og, *weight.shape[1:])
        acc = np.zeros((n, g, og, ho, wo), dtype=DTYPE)
        tmp = np.empty_like(acc)  # reused so the loop allocates nothing
        for ci, i, j, xs in iter_taps(x, geom):
            np.multiply(xs[:, :, None], wg[None, :, :, ci, i, j, None, None], out=tmp)
            acc += tmp
        out = acc.reshape(n, g * og, ho, wo)
    else:
        raise ValidationError(f"unknown conv2d method {method!r}")
    if bias is not None:
        out = out + np.asarray(bias, dtype=DTYPE)[None, :, None, None]
    return np.ascontiguousarray(out, dtype=DTYPE)


def conv2d_backward(x, weight, grad_out, geom, cols=None, method="im2col"):
    """Gradients of :func:`conv2d` w.r.t. input, weight and bias.

    ``cols`` may pass a cached :func:`im2col` of ``x`` to skip re-extraction.
    ``method="direct"`` walks the filter taps instead, which is cheaper for
    depthwise banks where each group sees a single channel.
    """
    x = check_tensor4(x)
    grad_out = check_tensor4(grad_out, "grad_out")
    expected = geom.output_shape(x.shape)
    if grad_out.shape != expected:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != forward output shape {expected}", axis="grad"
        )
    weight = np.asarray(weight, dtype=DTYPE)
    g = geom.groups
    og = geom.out_channels // g
    grad_b = grad_out.sum(axis=(0, 2, 3))
    if method == "direct":
        n, c, h, w = x.shape
        s, p = geom.stride, geom.padding
        ho, wo = expected[2:]
        wg = weight.reshape(g, og, *weight.shape[1:])
        dy = grad_out.reshape(n, g, og, ho, wo)
        grad_w = np.zeros_like(wg)
        grad_xp = np.zeros((n, g, c // g, h + 2 * p, w + 2 * p), dtype=DTYPE)
        for ci, i, j, xs in iter_taps(x, geom):
            grad_w[:, :, ci, i, j] = np.einsum("ngohw,nghw->go", dy, xs)
            grad_xp[:, :, ci, i : i + s * ho : s, j : j + s * wo : s] += np.einsum(
                "ngohw,go->nghw", dy, wg[:, :, ci, i, j]
            )
        grad_x = grad_xp.reshape(n, c, h + 2 * p, w + 2 * p)
        if p:
            grad_x = grad_x[:, :, p : p + h, p : p + w]
        return np.ascontiguousarray(grad_x), grad_w.reshape(geom.weight_shape), grad_b
    if method != "im2col":
        raise ValidationError(f"unknown conv2d method {method!r}")
    if cols is None:
        cols = im2col(x, geom)
    gcols = _grad_to_cols(grad_out, geom)
    wmat = weight.reshape(g, og, -1)
    grad_w = np.matmul(gcols.transpose(0, 2, 1), cols).reshape(geom.weight_shape)
    grad_x = col2im(np.matmul(gcols, wmat), x.shape, geom)
    return grad_x, grad_w, grad_b


def _pool_offsets(x, window, stride):
    """Yield the strided view seen by each window offset, in row-major order."""
    h, w = x.shape[2:]
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    for i in range(window):
        for j in range(window):
            yield i, j, x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]


def maxpool2d(x, window, stride):
    x = check_tensor4(x)
    if window < 1 or stride < 1:
        raise ValidationError("window and stride must be >= 1")
    _, _, h, w = x.shape
    if window > h or window > w:
        raise DimensionError(
            f"pool window {window} larger than input {h}x{w}", axis="height" if window > h else "width"
        )
    y = None
    for _, _, view in _pool_offsets(x, window, stride):
        y = view.copy() if y is None else np.maximum(y, view, out=y)
    return y


def maxpool2d_backward(x, grad_out, window, stride):
    """Routes each output gradient to the first maximum of its window."""
    x = check_tensor4(x)
    y = maxpool2d(x, window, stride)
    grad_x = np.zeros_like(x)
    taken = np.zeros(y.shape, dtype=bool)
    h, w = y.shape[2:]
    for i, j, view in _pool_offsets(x, window, stride):
        hit = (view == y) & ~taken
        taken |= hit
        grad_x[:, :, i : i + stride * h : stride, j : j + stride * w : stride] += grad_out * hit
    return grad_x


def _channel_sum(a):
    """Per-channel sum of an NCHW array (reduces the contiguous axis first)."""
    n, c = a.shape[:2]
    return a.reshape(n, c, -1).sum(axis=2).sum(axis=0)


def batch_norm(x, scale, shift, running_mean, running_var, training,
               momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization.

    In training mode the batch statistics normalize ``x`` and the running
    buffers are updated in place as ``r = momentum * r + (1 - momentum) * batch``
    (variance buffer uses the unbiased estimate).  Returns ``(y, cache)``.
    """
    x = check_tensor4(x)
    c = x.shape[1]
    for name, arr in (("scale", scale), ("shift", shift), ("running_mean", running_mean),
                      ("running_var", running_var)):
        if np.shape(arr) != (c,):
            raise DimensionError(f"{name} must have shape ({c},), got {np.shape(arr)}", axis="channels")
    if training:
        count = x.size // c
        mean = _channel_sum(x) / count
        var = _channel_sum(np.square(x - mean[None, :, None, None])) / count
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        unbiased = var * (count / max(count - 1, 1))
        running_var *= momentum
        running_var += (1.0 - momentum) * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(DTYPE)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = xhat * scale[None, :, None, None] + shift[None, :, None, None]
    cache = (xhat, inv_std, training)
    return y.astype(DTYPE, copy=False), cache


def batch_norm_backward(grad_out, scale, cache):
    """Returns ``(grad_x, grad_scale, grad_shift)``."""
    xhat, inv_std, training = cache
    grad_scale = _channel_sum(grad_out * xhat)
    grad_shift = _channel_sum(grad_out)
    if training:
        count = xhat.size // xhat.shape[1]
        k = (scale * inv_std)[None, :, None, None]
        mean_dy = (grad_shift / count)[None, :, None, None]
        mean_dot = (grad_scale / count)[None, :, None, None]
        grad_x = (grad_out - mean_dy - xhat * mean_dot) * k
    else:
        grad_x = grad_out * (scale * inv_std)[None, :, None, None]
    return grad_x.astype(DTYPE, copy=False), grad_scale, grad_shift


def relu(x):
    return np.maximum(x, 0).astype(DTYPE, copy=False)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def hard_swish(x):
    """``x * clamp(x + 3, 0, 6) / 6``."""
    return (x * np.clip(x + 3.0, 0.0, 6.0) / 6.0).astype(DTYPE, copy=False)


def hard_swish_backward(x, grad_out):
    slope = np.where(x <= -3.0, 0.0, np.where(x >= 3.0, 1.0, (2.0 * x + 3.0) / 6.0))
    return (grad_out * slope).astype(DTYPE, copy=False)


def global_avg_pool(x):
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(input_shape, grad_out):
    n, c, h, w = input_shape
    return np.broadcast_to(grad_out[:, :, None, None] / (h * w), input_shape).astype(DTYPE)


def linear(x, weight, bias):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear expects (N, {weight.shape[1]}) input, got {x.shape}", axis="features"
        )
    return x @ weight.T + bias


def linear_backward(x, weight, grad_out):
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-softmax of the true class and its gradient."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError("logits must be (N, classes)", axis="rank")
    n, classes = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},), got {labels.shape}", axis="batch")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValidationError(f"labels must lie in [0, {classes})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, labels]))
    grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)
