"""Static cost accounting: FLOPs, parameters, storage and memory traffic.

Conventions: one multiply-accumulate or add-accumulate is one FLOP, a bit
shift is free.  Memory accesses for a filter bank are ``h_o * w_o * (weights +
c_o)``: every output position reads the filter bank and writes one value per
output channel.

``param_bits`` follows the log-based storage measure for shift filter banks
(``log2`` of the bank's weight count), while adder and dense banks count one
unit per weight.  It covers convolution filter banks only.  ``params`` is the
plain census of every trainable scalar, including biases, BN affine terms and
the classifier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .core import ConvGeometry
from .exceptions import ConfigError, ValidationError
from .ghost import GhostSAConfig, GhostSANet, GhostSAModule, _ResidualBlock, build_network
from .layers import (
    AdderConv2d,
    BatchNorm2d,
    DenseConv2d,
    Linear,
    ShiftConv2d,
)
from .netspec import NetworkSpec


def flops_standard_conv(geom, h_o, w_o):
    """``c_i * h_o * w_o * c_o * k * k`` (divided by ``groups`` for grouped convs)."""
    if h_o < 1 or w_o < 1:
        raise ValidationError(f"output size must be positive, got {h_o}x{w_o}")
    return geom.in_channels * h_o * w_o * geom.out_channels * geom.kernel ** 2 // geom.groups


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    out_shape: tuple
    flops: int = 0
    params: int = 0
    param_bits: float = 0.0
    mem_accesses: int = 0


@dataclass(frozen=True)
class CostReport:
    layers: tuple = field(default_factory=tuple)

    @property
    def flops(self):
        return sum(layer.flops for layer in self.layers)

    @property
    def params(self):
        return sum(layer.params for layer in self.layers)

    @property
    def param_bits(self):
        return math.fsum(layer.param_bits for layer in self.layers)

    @property
    def mem_accesses(self):
        return sum(layer.mem_accesses for layer in self.layers)

    def __add__(self, other):
        return CostReport(self.layers + other.layers)


@dataclass(frozen=True)
class RatioReport:
    """Speedup, compression and memory-access ratios of one GhostSA replacement.

    ``r_s``, ``r_c`` and ``r_m`` come from the count-based expressions;
    ``r_c_closed`` and ``r_m_closed`` are the gamma-substituted forms and
    ``k2gamma`` the common approximation ``k * k * gamma``.
    """

    r_s: float
    r_c: float
    r_m: float
    k2gamma: float
    r_c_closed: float
    r_m_closed: float


def _bank_cost(name, kind, geom, h_o, w_o, flops, bias):
    weights = math.prod(geom.weight_shape)
    if kind == "shift":
        bits = math.log2(weights)
    else:
        bits = float(weights)
    return LayerCost(
        name, kind, (geom.out_channels, h_o, w_o), flops,
        weights + (geom.out_channels if bias else 0), bits,
        h_o * w_o * (weights + geom.out_channels),
    )


def shift_conv_cost(name, geom, h_o, w_o, bias=True):
    return _bank_cost(name, "shift", geom, h_o, w_o, 0, bias)


def adder_conv_cost(name, geom, h_o, w_o, bias=True):
    # one subtract-absolute-accumulate per (output, tap)
    return _bank_cost(name, "adder", geom, h_o, w_o, flops_standard_conv(geom, h_o, w_o), bias)


def dense_conv_cost(name, geom, h_o, w_o, bias=True):
    return _bank_cost(name, "dense", geom, h_o, w_o, flops_standard_conv(geom, h_o, w_o), bias)


def cost_ghost_sa(config, h_o, w_o, prefix=""):
    """Cost of one GhostSA module producing an ``h_o x w_o`` output.

    The intrinsic and depthwise shift banks cost no FLOPs; the 1 x 1 adder
    costs one accumulate per executed (input, output) pair, i.e.
    ``h_o * w_o * m1 * ceil(m2 / m1) * m2``.  This equals the textbook
    ``h_o * w_o * m1 * m2`` (see :func:`literal_flops`) when ``m1 == m2``.
    """
    if not isinstance(config, GhostSAConfig):
        raise ValidationError("config must be a GhostSAConfig")
    if h_o < 1 or w_o < 1:
        raise ValidationError(f"output size must be positive, got {h_o}x{w_o}")
    c = config
    d, k = c.intrinsic_kernel, c.ghost_kernel
    intrinsic = ConvGeometry(c.in_channels, c.m1, d, c.stride, d // 2)
    depthwise = ConvGeometry(c.m1, c.depthwise_channels, k, 1, k // 2, groups=c.m1)
    pointwise = ConvGeometry(c.depthwise_channels, c.m2, 1)
    shape = lambda ch: (ch, h_o, w_o)  # noqa: E731
    return CostReport((
        shift_conv_cost(prefix + "intrinsic", intrinsic, h_o, w_o),
        LayerCost(prefix + "intrinsic_bn", "bn", shape(c.m1), params=2 * c.m1),
        shift_conv_cost(prefix + "depthwise", depthwise, h_o, w_o),
        LayerCost(prefix + "depthwise_bn", "bn", shape(c.depthwise_channels),
                  params=2 * c.depthwise_channels),
        adder_conv_cost(prefix + "pointwise", pointwise, h_o, w_o),
        LayerCost(prefix + "pointwise_bn", "bn", shape(c.m2), params=2 * c.m2),
    ))


def literal_flops(config, h_o, w_o):
    """The textbook module count ``h_o * w_o * m1 * m2``."""
    return h_o * w_o * config.m1 * config.m2


def ratios(config, baseline=None):
    """Ratios of a standard ``k x k`` convolution to its GhostSA replacement."""
    c = config
    k = c.ghost_kernel
    if baseline is None:
        baseline = ConvGeometry(c.in_channels, c.out_channels, k)
    if (baseline.in_channels, baseline.out_channels) != (c.in_channels, c.out_channels):
        raise ValidationError("baseline and GhostSA module must share c_i and c_o")
    ci, co, kb = baseline.in_channels, baseline.out_channels, baseline.kernel
    m1, m2, d, g = c.m1, c.m2, c.intrinsic_kernel, c.gamma
    std = ci * co * kb * kb
    r_s = std / (m1 * m2)
    r_c = std / (math.log2(ci * m1 * d * d) + math.log2(m1 * k * k) + m1 * m2)
    r_c_closed = std / (2 * math.log2(ci * (co / g) * k * k) + m1 * m2)
    r_m = (std + co) / (ci * m1 + m1 + m1 * k * k + m1 + m1 * m2 + m2)
    r_m_closed = (k * k * g * ci + co) / (ci + co + k * k + 1)
    return RatioReport(r_s, r_c, r_m, float(k * k * g), r_c_closed, r_m_closed)


def _walk(layer, name, in_shape, out):
    """Append leaf costs for ``layer`` fed with ``in_shape``; return its output shape."""
    if isinstance(layer, _ResidualBlock):
        shape = _walk(layer.children["body"], f"{name}.body", in_shape, out)
        _walk(layer.children["shortcut"], f"{name}.shortcut", in_shape, out)
        return shape
    if isinstance(layer, GhostSAModule):
        shape = layer.output_shape(in_shape)
        out.extend(cost_ghost_sa(layer.config, shape[2], shape[3], prefix=f"{name}.").layers)
        return shape
    if layer.children:
        shape = in_shape
        for cname, child in layer.children.items():
            shape = _walk(child, f"{name}.{cname}" if name else cname, shape, out)
        return shape
    shape = layer.output_shape(in_shape)
    n_params = sum(p.value.size for p in layer.params.values())
    if isinstance(layer, (ShiftConv2d, AdderConv2d, DenseConv2d)):
        fn = {ShiftConv2d: shift_conv_cost, AdderConv2d: adder_conv_cost,
              DenseConv2d: dense_conv_cost}[type(layer)]
        out.append(fn(name, layer.geometry, shape[2], shape[3], "bias" in layer.params))
    elif isinstance(layer, Linear):
        out.append(LayerCost(name, "linear", shape[1:], layer.in_features * layer.out_features,
                             n_params, 0.0, layer.in_features * layer.out_features + shape[1]))
    elif isinstance(layer, BatchNorm2d):
        out.append(LayerCost(name, "bn", shape[1:], params=n_params))
    else:
        out.append(LayerCost(name, type(layer).__name__.lower(), shape[1:], params=n_params))
    return shape


def analyze_network(spec_or_model, variant="ghostsa"):
    """Per-layer cost table of a spec (built on the fly) or an existing model.

    BN, activation and pooling layers appear with zero FLOPs.
    """
    if isinstance(spec_or_model, NetworkSpec):
        model = build_network(spec_or_model, variant)
    elif isinstance(spec_or_model, GhostSANet):
        model = spec_or_model
    else:
        raise ConfigError("expected a NetworkSpec or a GhostSANet")
    out = []
    _walk(model, "", (1, *model.input_shape), out)
    return CostReport(tuple(out))


def module_ratios(spec):
    """``(layer name, GhostSAConfig, RatioReport)`` for every GhostSA module."""
    rows = []
    model = build_network(spec)
    for name, layer in model.named_layers():
        if isinstance(layer, GhostSAModule):
            rows.append((name, layer.config, ratios(layer.config)))
    return rows
