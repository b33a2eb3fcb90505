"""GhostSA module, bottleneck and network builder.

A GhostSA module produces ``c_o`` output channels in two parts:

* ``m1`` intrinsic channels from a d x d shift convolution of the input;
* ``m2`` ghost channels from the intrinsic ones through a k x k depthwise shift
  convolution followed by a 1 x 1 adder convolution.

The output is the channel concatenation ``[intrinsic, ghost]``.  Every
convolution-like layer is shift- or adder-based; only the classifier head is a
dense multiply layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .exceptions import ConfigError, DimensionError
from .layers import (
    AdderConv2d,
    BatchNorm2d,
    DenseConv2d,
    GlobalAvgPool,
    HardSwish,
    Layer,
    Linear,
    MaxPool2d,
    ReLU,
    Sequential,
    ShiftConv2d,
)


def split_channels(out_channels, gamma):
    """Intrinsic/ghost split ``(m1, m2)`` with ``m1 = ceil(c_o / gamma)``."""
    if gamma < 2:
        raise ConfigError(f"gamma must be >= 2, got {gamma}")
    if out_channels < 2:
        raise ConfigError(f"out_channels must be >= 2 to hold both parts, got {out_channels}")
    m1 = -(-out_channels // gamma)
    return m1, out_channels - m1


@dataclass(frozen=True)
class GhostSAConfig:
    in_channels: int
    out_channels: int
    gamma: int = 2
    intrinsic_kernel: int = 1
    ghost_kernel: int = 3
    stride: int = 1

    def __post_init__(self):
        split_channels(self.out_channels, self.gamma)
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        for name in ("intrinsic_kernel", "ghost_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be a positive odd number, got {k}")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")

    @property
    def m1(self):
        return split_channels(self.out_channels, self.gamma)[0]

    @property
    def m2(self):
        return split_channels(self.out_channels, self.gamma)[1]

    @property
    def multiplier(self):
        """Depthwise channel multiplier ``ceil(m2 / m1)``."""
        return -(-self.m2 // self.m1)

    @property
    def depthwise_channels(self):
        return self.m1 * self.multiplier


@dataclass(frozen=True)
class BottleneckConfig:
    in_channels: int
    expansion_channels: int
    out_channels: int
    stride: int = 1
    gamma: int = 2
    intrinsic_kernel: int = 1
    ghost_kernel: int = 3

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ConfigError(f"bottleneck stride must be 1 or 2, got {self.stride}")

    def modules(self):
        first = GhostSAConfig(self.in_channels, self.expansion_channels, self.gamma,
                              self.intrinsic_kernel, self.ghost_kernel)
        second = GhostSAConfig(self.expansion_channels, self.out_channels, self.gamma,
                               self.intrinsic_kernel, self.ghost_kernel)
        return first, second


class GhostSAModule(Layer):
    def __init__(self, config, rng=None, clip_input_grad=True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        cfg = config
        self.children["intrinsic"] = ShiftConv2d(
            cfg.in_channels, cfg.m1, cfg.intrinsic_kernel, stride=cfg.stride, rng=rng
        )
        self.children["intrinsic_bn"] = BatchNorm2d(cfg.m1)
        self.children["depthwise"] = ShiftConv2d(
            cfg.m1, cfg.depthwise_channels, cfg.ghost_kernel, groups=cfg.m1, rng=rng
        )
        self.children["depthwise_bn"] = BatchNorm2d(cfg.depthwise_channels)
        self.children["pointwise"] = AdderConv2d(
            cfg.depthwise_channels, cfg.m2, 1, rng=rng, clip_input_grad=clip_input_grad
        )
        self.children["pointwise_bn"] = BatchNorm2d(cfg.m2)

    def forward(self, x, training=False):
        x = core.check_tensor4(x)
        if x.shape[1] != self.config.in_channels:
            raise DimensionError(
                f"GhostSA module expects {self.config.in_channels} channels, got {x.shape[1]}",
                axis="channels",
            )
        ch = self.children
        intrinsic = ch["intrinsic_bn"].forward(ch["intrinsic"].forward(x, training), training)
        ghost = ch["depthwise_bn"].forward(ch["depthwise"].forward(intrinsic, training), training)
        ghost = ch["pointwise_bn"].forward(ch["pointwise"].forward(ghost, training), training)
        return np.concatenate([intrinsic, ghost], axis=1)

    def backward(self, grad):
        ch = self.children
        m1 = self.config.m1
        g_int = grad[:, :m1]
        g_ghost = ch["pointwise"].backward(ch["pointwise_bn"].backward(grad[:, m1:]))
        g_int = g_int + ch["depthwise"].backward(ch["depthwise_bn"].backward(g_ghost))
        return ch["intrinsic"].backward(ch["intrinsic_bn"].backward(g_int))

    def output_shape(self, input_shape):
        n, _, h, w = self.children["intrinsic"].output_shape(input_shape)
        return (n, self.config.out_channels, h, w)

    def __repr__(self):
        c = self.config
        return f"GhostSAModule({c.in_channels}->{c.out_channels}, gamma={c.gamma}, m1={c.m1}, m2={c.m2})"


class _ResidualBlock(Layer):
    """``body(x) + shortcut(x)`` with explicit children ``body`` and ``shortcut``."""

    def forward(self, x, training=False):
        return self.children["body"].forward(x, training) + self.children["shortcut"].forward(
            x, training
        )

    def backward(self, grad):
        return self.children["body"].backward(grad) + self.children["shortcut"].backward(grad)

    def output_shape(self, input_shape):
        return self.children["body"].output_shape(input_shape)


class Identity(Layer):
    def forward(self, x, training=False):
        return x

    def backward(self, grad):
        return grad


class GhostSABottleneck(_ResidualBlock):
    """Two stacked GhostSA modules with a residual shortcut.

    stride 1: module1 -> ReLU -> module2, identity shortcut.
    stride 2: module1 -> ReLU -> max-pool(2, 2) -> module2, max-pooled shortcut.
    The shortcut gains a 1 x 1 shift conv + BN whenever channel counts differ.
    """

    def __init__(self, config, rng=None, clip_input_grad=True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        first, second = config.modules()
        body = [("module1", GhostSAModule(first, rng, clip_input_grad)), ("relu", ReLU())]
        if config.stride == 2:
            body.append(("pool", MaxPool2d(2, 2)))
        body.append(("module2", GhostSAModule(second, rng, clip_input_grad)))
        self.children["body"] = Sequential(*body)
        shortcut = []
        if config.stride == 2:
            shortcut.append(("pool", MaxPool2d(2, 2)))
        if config.in_channels != config.out_channels:
            shortcut.append(("conv", ShiftConv2d(config.in_channels, config.out_channels, 1, rng=rng)))
            shortcut.append(("bn", BatchNorm2d(config.out_channels)))
        self.children["shortcut"] = Sequential(*shortcut) if shortcut else Identity()


class BasicBlock(_ResidualBlock):
    """Standard-convolution twin of a bottleneck (a ResNet basic block)."""

    def __init__(self, config, kernel=3, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        c = config
        self.children["body"] = Sequential(
            ("conv1", DenseConv2d(c.in_channels, c.expansion_channels, kernel, c.stride, rng=rng)),
            ("bn1", BatchNorm2d(c.expansion_channels)),
            ("relu", ReLU()),
            ("conv2", DenseConv2d(c.expansion_channels, c.out_channels, kernel, rng=rng)),
            ("bn2", BatchNorm2d(c.out_channels)),
        )
        if c.stride != 1 or c.in_channels != c.out_channels:
            self.children["shortcut"] = Sequential(
                ("conv", DenseConv2d(c.in_channels, c.out_channels, 1, c.stride, rng=rng)),
                ("bn", BatchNorm2d(c.out_channels)),
            )
        else:
            self.children["shortcut"] = Identity()


class GhostSANet(Sequential):
    """Stem, bottleneck stages, head conv, global pooling and a linear classifier.

    ``variant="ghostsa"`` builds the multiplication-free network;
    ``variant="standard"`` builds its dense-convolution twin for comparison.
    """

    def __init__(self, spec, variant="ghostsa", seed=0, clip_input_grad=True):
        spec = spec.validate()
        if variant not in ("ghostsa", "standard"):
            raise ConfigError(f"unknown variant {variant!r}")
        rng = np.random.default_rng(seed)
        conv = ShiftConv2d if variant == "ghostsa" else DenseConv2d
        stem = spec.stem_width
        layers = [
            ("stem", conv(spec.in_channels, stem, spec.stem_kernel, spec.stem_stride, rng=rng)),
            ("stem_bn", BatchNorm2d(stem)),
            ("stem_relu", ReLU()),
        ]
        for i, st in enumerate(spec.scaled_stages()):
            cfg = BottleneckConfig(st.in_channels, st.exp_channels, st.out_channels, st.stride,
                                   st.gamma, spec.intrinsic_kernel, spec.ghost_kernel)
            if variant == "ghostsa":
                block = GhostSABottleneck(cfg, rng, clip_input_grad)
            else:
                block = BasicBlock(cfg, spec.ghost_kernel, rng)
            layers.append((f"stage{i}", block))
        last = spec.scaled_stages()[-1].out_channels
        head = spec.head_width
        layers += [
            ("head", conv(last, head, 1, rng=rng)),
            ("head_bn", BatchNorm2d(head)),
            ("head_act", HardSwish()),
            ("pool", GlobalAvgPool()),
            ("fc", Linear(head, spec.classes, rng=rng)),
        ]
        super().__init__(*layers)
        self.spec = spec
        self.variant = variant
        self.seed = seed

    @property
    def input_shape(self):
        s = self.spec
        return (s.in_channels, s.input_size, s.input_size)

    def predict_logits(self, x, batch_size=256):
        """Eval-mode logits, computed in batches."""
        x = np.asarray(x, dtype=core.DTYPE)
        out = [self.forward(x[i : i + batch_size], training=False)
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)

    def __repr__(self):
        return f"GhostSANet(variant={self.variant!r}, stages={len(self.spec.stages)})"


def build_network(spec, variant="ghostsa", seed=0, clip_input_grad=True):
    return GhostSANet(spec, variant, seed, clip_input_grad)


def loss_and_gradients(model, x, labels, training=True):
    """Forward, cross-entropy loss and a full backward pass.

    Gradients are written into each parameter's ``grad`` (zeroed first).
    Returns ``(loss, logits)``.
    """
    model.zero_grad()
    logits = model.forward(x, training)
    loss, grad = core.softmax_cross_entropy(logits, labels)
    model.backward(grad)
    return loss, logits


@dataclass(frozen=True)
class Audit:
    """Census of filter-bank kinds in a built model."""

    shift_convs: int
    adder_convs: int
    dense_convs: int
    dense_linear: int
    parameters: int

    @property
    def multiplication_free(self):
        return self.dense_convs == 0


def structural_audit(model):
    counts = {ShiftConv2d: 0, AdderConv2d: 0, DenseConv2d: 0, Linear: 0}
    for _, layer in model.named_layers():
        for cls in counts:
            if isinstance(layer, cls):
                counts[cls] += 1
    total = sum(p.value.size for _, p in model.named_parameters())
    return Audit(counts[ShiftConv2d], counts[AdderConv2d], counts[DenseConv2d], counts[Linear], total)


def count_parameters(model):
    return sum(p.value.size for _, p in model.named_parameters())

