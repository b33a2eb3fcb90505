"""Power-of-two ("bit-shift") weights and shift convolution.

A shift weight is ``s * 2**p`` with sign ``s`` in {-1, 0, +1} and an integer
exponent ``p``.  Multiplying a float by it only touches the exponent field and
the sign bit, so the product is exact for normal floats.  Training keeps a
continuous proxy per weight; the quantizer maps proxies to (s, p) pairs and the
backward pass treats it as identity (straight-through estimator).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DTYPE,
    ConvGeometry,
    check_conv_operands,
    check_tensor4,
    conv2d,
    conv2d_backward,
    iter_taps,
)
from .exceptions import DimensionError, ValidationError

P_MIN = -8
P_MAX = 8


def zero_threshold(p_min=P_MIN):
    """Magnitudes below ``2**(p_min - 1)`` quantize to zero."""
    return 2.0 ** (p_min - 1)


@dataclass(frozen=True)
class ShiftWeight:
    s: int
    p: int
    proxy: float = 0.0

    def __post_init__(self):
        if self.s not in (-1, 0, 1):
            raise ValidationError(f"sign must be -1, 0 or 1, got {self.s}")

    @property
    def value(self):
        return float(np.ldexp(np.float32(self.s), self.p))

    def __neg__(self):
        return ShiftWeight(-self.s, self.p, -self.proxy)


def quantize_shift_array(proxy, p_min=P_MIN, p_max=P_MAX):
    """Vectorised quantizer: returns ``(sign, exponent)`` as int8 arrays.

    ``p = round(log2|proxy|)`` clamped to ``[p_min, p_max]`` (ties round up), which
    is the nearest power of two in log space.  Zero weights get ``p = 0``.
    """
    if p_min > p_max:
        raise ValidationError(f"p_min {p_min} > p_max {p_max}")
    if not (-127 <= p_min and p_max <= 127):
        raise ValidationError("exponent range must fit in int8")
    proxy = np.asarray(proxy)
    if not np.all(np.isfinite(proxy)):
        raise ValidationError("proxy weights must be finite")
    mag = np.abs(proxy.astype(np.float64))
    live = mag >= zero_threshold(p_min)
    with np.errstate(divide="ignore"):
        exps = np.floor(np.log2(np.where(live, mag, 1.0)) + 0.5)
    exps = np.clip(exps, p_min, p_max)
    sign = np.where(live, np.sign(proxy), 0).astype(np.int8)
    exps = np.where(live, exps, 0).astype(np.int8)
    return sign, exps


def quantize_shift(proxy, p_min=P_MIN, p_max=P_MAX):
    """Quantize one real to a :class:`ShiftWeight`."""
    proxy = float(proxy)
    if not np.isfinite(proxy):
        raise ValidationError(f"proxy weight must be finite, got {proxy}")
    s, p = quantize_shift_array(np.array([proxy]), p_min, p_max)
    return ShiftWeight(int(s[0]), int(p[0]), proxy)


def densify(sign, exponent):
    """Dense float32 weights ``sign * 2**exponent`` (exact)."""
    return np.ldexp(np.asarray(sign, dtype=DTYPE), np.asarray(exponent, dtype=np.int32)).astype(DTYPE)


@dataclass
class ShiftFilterBank:
    """A shift filter bank: per-weight (sign, exponent) plus a dense bias."""

    geometry: ConvGeometry
    sign: np.ndarray
    exponent: np.ndarray
    bias: np.ndarray | None = None
    proxy: np.ndarray | None = None

    def __post_init__(self):
        shape = self.geometry.weight_shape
        self.sign = np.asarray(self.sign, dtype=np.int8)
        self.exponent = np.asarray(self.exponent, dtype=np.int8)
        if self.sign.shape != shape or self.exponent.shape != shape:
            raise DimensionError(
                f"shift weights must have shape {shape}, got {self.sign.shape}/{self.exponent.shape}",
                axis="weight",
            )
        if not np.isin(self.sign, (-1, 0, 1)).all():
            raise ValidationError("shift signs must be in {-1, 0, 1}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=DTYPE)

    @classmethod
    def from_proxy(cls, proxy, geometry, bias=None, p_min=P_MIN, p_max=P_MAX):
        proxy = np.asarray(proxy, dtype=DTYPE)
        sign, exponent = quantize_shift_array(proxy, p_min, p_max)
        return cls(geometry, sign, exponent, bias, proxy)

    def dense(self):
        return densify(self.sign, self.exponent)


def shift_conv2d(x, bank, method="dense"):
    """Convolve with power-of-two weights.

    ``method="dense"`` densifies the bank and reuses the GEMM path of
    :func:`~ghostsa.core.conv2d`.  ``method="exponent"`` never forms a product:
    each tap is applied with :func:`numpy.ldexp` on the input (exponent-field
    add) followed by a sign flip, accumulating in the same tap order as
    ``conv2d(..., method="direct")``, so the two agree bit for bit.
    """
    x = check_tensor4(x)
    geom = bank.geometry
    if method == "dense":
        return conv2d(x, bank.dense(), bank.bias, geom, method="im2col")
    if method != "exponent":
        raise ValidationError(f"unknown shift_conv2d method {method!r}")
    check_conv_operands(x, bank.sign, bank.bias, geom)
    n = x.shape[0]
    ho, wo = geom.output_hw(x.shape[2], x.shape[3])
    g = geom.groups
    og = geom.out_channels // g
    sign = bank.sign.astype(DTYPE).reshape(g, og, *geom.weight_shape[1:])
    exps = bank.exponent.astype(np.int32).reshape(g, og, *geom.weight_shape[1:])
    acc = np.zeros((n, g, og, ho, wo), dtype=DTYPE)
    tmp = np.empty_like(acc)
    for ci, i, j, xs in iter_taps(x, geom):
        np.ldexp(xs[:, :, None], exps[None, :, :, ci, i, j, None, None], out=tmp)
        tmp *= sign[None, :, :, ci, i, j, None, None]
        acc += tmp
    out = acc.reshape(n, g * og, ho, wo)
    if bank.bias is not None:
        out = out + bank.bias[None, :, None, None]
    return np.ascontiguousarray(out, dtype=DTYPE)


def shift_conv2d_backward(x, bank, grad_out, cols=None):
    """Returns ``(grad_input, grad_proxy, grad_bias)``.

    The input gradient uses the quantized weights; the proxy gradient is the
    dense weight gradient passed straight through the quantizer.
    """
    grad_x, grad_w, grad_b = conv2d_backward(x, bank.dense(), grad_out, bank.geometry, cols=cols)
    return grad_x, grad_w, grad_b
