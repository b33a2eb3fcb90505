"""Adder convolution: negative l1 distance between patches and filters.

Each output is ``-sum |x_patch - w| + b``: subtract, absolute value and
accumulate, with no multiplications.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DTYPE, ConvGeometry, check_conv_operands, check_tensor4, iter_taps
from .exceptions import DimensionError, ValidationError

LR_SCALE_EPS = 1e-8


@dataclass
class AdderFilterBank:
    geometry: ConvGeometry
    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=DTYPE)
        if self.weight.shape != self.geometry.weight_shape:
            raise DimensionError(
                f"adder weights must have shape {self.geometry.weight_shape}, got {self.weight.shape}",
                axis="weight",
            )
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=DTYPE)


def _grouped(bank):
    geom = bank.geometry
    g = geom.groups
    return bank.weight.reshape(g, geom.out_channels // g, *geom.weight_shape[1:])


def adder_conv2d(x, bank):
    """Sliding-window negative l1 similarity plus bias, NCHW in and out."""
    x = check_tensor4(x)
    geom = bank.geometry
    check_conv_operands(x, bank.weight, bank.bias, geom)
    n = x.shape[0]
    ho, wo = geom.output_hw(x.shape[2], x.shape[3])
    wg = _grouped(bank)
    # differences are formed in float32, the running sum is kept in float64 and
    # rounded once, so long filters stay within half an ulp of the exact l1 sum
    acc = np.zeros((n, geom.groups, wg.shape[1], ho, wo), dtype=np.float64)
    tmp = np.empty(acc.shape, dtype=DTYPE)
    for ci, i, j, xs in iter_taps(x, geom):
        np.subtract(xs[:, :, None], wg[None, :, :, ci, i, j, None, None], out=tmp)
        np.abs(tmp, out=tmp)
        acc -= tmp
    out = acc.reshape(n, geom.out_channels, ho, wo)
    if bank.bias is not None:
        out = out + bank.bias[None, :, None, None]
    return np.ascontiguousarray(out, dtype=DTYPE)


def adder_conv2d_backward(x, bank, grad_out, clip_input_grad=True):
    """Returns ``(grad_input, grad_weight, grad_bias)``.

    Weight gradient: ``sign(x - w)`` (the exact derivative, 0 at the kink).
    Input gradient: ``clamp(w - x, -1, 1)`` when ``clip_input_grad`` (HardTanh
    clipping that bounds the magnitude passed to earlier layers), otherwise the
    exact ``sign(w - x)``.
    """
    x = check_tensor4(x)
    geom = bank.geometry
    grad_out = check_tensor4(grad_out, "grad_out")
    expected = geom.output_shape(x.shape)
    if grad_out.shape != expected:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != forward output shape {expected}", axis="grad"
        )
    n, c, h, w = x.shape
    g, k, s, p = geom.groups, geom.kernel, geom.stride, geom.padding
    ho, wo = expected[2:]
    wg = _grouped(bank)
    og = wg.shape[1]
    dy = grad_out.reshape(n, g, og, ho, wo)
    grad_w = np.zeros_like(wg)
    grad_xp = np.zeros((n, g, c // g, h + 2 * p, w + 2 * p), dtype=DTYPE)
    for ci, i, j, xs in iter_taps(x, geom):
        diff = xs[:, :, None] - wg[None, :, :, ci, i, j, None, None]
        grad_w[:, :, ci, i, j] = np.einsum("ngohw,ngohw->go", dy, np.sign(diff))
        if clip_input_grad:
            local = np.clip(-diff, -1.0, 1.0)
        else:
            local = -np.sign(diff)
        grad_xp[:, :, ci, i : i + s * ho : s, j : j + s * wo : s] += np.einsum(
            "ngohw,ngohw->nghw", dy, local
        )
    grad_x = grad_xp.reshape(n, c, h + 2 * p, w + 2 * p)
    if p:
        grad_x = grad_x[:, :, p : p + h, p : p + w]
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_x), grad_w.reshape(geom.weight_shape), grad_b


def adder_lr_scale(grad, eta, eps=LR_SCALE_EPS):
    """Per-layer normalized step ``eta * sqrt(numel) / (||grad||_2 + eps) * grad``."""
    grad = np.asarray(grad)
    if grad.size == 0:
        raise ValidationError("gradient must be non-empty")
    norm = float(np.linalg.norm(grad.ravel().astype(np.float64)))
    factor = eta * np.sqrt(grad.size) / (norm + eps)
    return (grad * factor).astype(grad.dtype, copy=False)

