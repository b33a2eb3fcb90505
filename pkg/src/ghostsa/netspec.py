"""Declarative network descriptions and their ``key = value`` config format.

Example config::

    # toy MNIST network
    in_channels = 1
    input_size = 28
    classes = 10
    stem_channels = 16
    gamma_default = 2

    [stage]
    in = 16
    exp = 32
    out = 24
    stride = 2
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .exceptions import ConfigError


def scale_channels(channels, alpha):
    """Apply the width multiplier.

    ``alpha == 1`` is the identity; otherwise ``round(alpha * c)`` is rounded up
    to a multiple of 4 (minimum 4) so that gamma in {2, 4} splits stay integral.
    """
    if alpha <= 0:
        raise ConfigError(f"alpha must be > 0, got {alpha}")
    if alpha == 1:
        return channels
    return max(4, 4 * math.ceil(round(alpha * channels) / 4))


@dataclass(frozen=True)
class StageSpec:
    """One GhostSA bottleneck: ``in -> exp -> out`` channels."""

    in_channels: int
    exp_channels: int
    out_channels: int
    stride: int = 1
    gamma: int | None = None


@dataclass(frozen=True)
class NetworkSpec:
    stages: tuple = ()
    classes: int = 10
    alpha: float = 1.0
    stem_channels: int = 16
    gamma_default: int = 2
    in_channels: int = 3
    input_size: int = 32
    stem_kernel: int = 3
    stem_stride: int = 1
    head_channels: int | None = None
    intrinsic_kernel: int = 1
    ghost_kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))

    def validate(self):
        """Raise :class:`ConfigError` naming the offending stage, else return self."""
        if not self.stages:
            raise ConfigError("network needs at least one stage")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        for name in ("classes", "stem_channels", "in_channels", "input_size", "stem_kernel",
                     "stem_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.head_channels is not None and self.head_channels < 1:
            raise ConfigError("head_channels must be >= 1")
        if self.gamma_default < 2:
            raise ConfigError(f"gamma_default must be >= 2, got {self.gamma_default}")
        for name in ("intrinsic_kernel", "ghost_kernel", "stem_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be a positive odd number, got {k}")
        previous = self.stem_channels
        for i, st in enumerate(self.stages):
            where = f"stage {i}"
            if st.in_channels != previous:
                raise ConfigError(
                    f"{where}: in={st.in_channels} does not chain from previous out={previous}"
                )
            if st.stride not in (1, 2):
                raise ConfigError(f"{where}: stride must be 1 or 2, got {st.stride}")
            if st.gamma is not None and st.gamma < 2:
                raise ConfigError(f"{where}: gamma must be >= 2, got {st.gamma}")
            if st.exp_channels < 2 or st.out_channels < 2:
                raise ConfigError(f"{where}: exp and out channels must be >= 2")
            previous = st.out_channels
        return self

    def stage_gamma(self, index):
        g = self.stages[index].gamma
        return self.gamma_default if g is None else g

    def with_gamma(self, gamma):
        """Same backbone with every stage forced to ``gamma``."""
        stages = tuple(replace(s, gamma=None) for s in self.stages)
        return replace(self, stages=stages, gamma_default=gamma)

    @property
    def stem_width(self):
        return scale_channels(self.stem_channels, self.alpha)

    @property
    def head_width(self):
        base = self.stages[-1].out_channels if self.head_channels is None else self.head_channels
        return scale_channels(base, self.alpha)

    def scaled_stages(self):
        """Stages after the width multiplier, with gamma resolved."""
        a = self.alpha
        return tuple(
            StageSpec(
                scale_channels(s.in_channels, a),
                scale_channels(s.exp_channels, a),
                scale_channels(s.out_channels, a),
                s.stride,
                self.stage_gamma(i),
            )
            for i, s in enumerate(self.stages)
        )


_TOP_KEYS = {
    "alpha": float,
    "classes": int,
    "stem_channels": int,
    "gamma_default": int,
    "in_channels": int,
    "input_size": int,
    "stem_kernel": int,
    "stem_stride": int,
    "head_channels": int,
    "intrinsic_kernel": int,
    "ghost_kernel": int,
}
_STAGE_KEYS = {"in": "in_channels", "exp": "exp_channels", "out": "out_channels",
               "stride": "stride", "gamma": "gamma"}
_REQUIRED_STAGE = ("in", "exp", "out")


def _convert(raw, kind, lineno, column, key):
    try:
        if kind is int:
            return int(raw, 10)
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}", lineno, column) from None


def parse_network_config_text(text):
    """Parse config text into a validated :class:`NetworkSpec`."""
    top = {}
    stages = []  # (header line, {key: (value, line)})
    current = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].rstrip()
        stripped = line.strip()
        if not stripped:
            continue
        indent = len(line) - len(line.lstrip())
        if stripped.startswith("["):
            if stripped != "[stage]":
                raise ConfigError(f"unknown section {stripped!r}", lineno, indent + 1)
            current = {}
            stages.append((lineno, current))
            continue
        if "=" not in stripped:
            raise ConfigError("expected 'key = value'", lineno, indent + 1)
        key_part, value_part = line.split("=", 1)
        key = key_part.strip()
        value = value_part.strip()
        value_col = len(key_part) + 1 + (len(value_part) - len(value_part.lstrip())) + 1
        if not value:
            raise ConfigError(f"missing value for {key!r}", lineno, value_col)
        if current is None:
            if key not in _TOP_KEYS:
                raise ConfigError(f"unknown top-level key {key!r}", lineno, indent + 1)
            if key in top:
                raise ConfigError(f"duplicate key {key!r} (first set on line {top[key][1]})",
                                  lineno, indent + 1)
            top[key] = (_convert(value, _TOP_KEYS[key], lineno, value_col, key), lineno)
        else:
            if key not in _STAGE_KEYS:
                raise ConfigError(f"unknown stage key {key!r}", lineno, indent + 1)
            if key in current:
                raise ConfigError(
                    f"duplicate key {key!r} in stage (first set on line {current[key][1]})",
                    lineno, indent + 1,
                )
            current[key] = (_convert(value, int, lineno, value_col, key), lineno)

    stage_specs = []
    for header, entries in stages:
        missing = [k for k in _REQUIRED_STAGE if k not in entries]
        if missing:
            raise ConfigError(f"stage missing required key(s): {', '.join(missing)}", header)
        stage_specs.append(StageSpec(**{_STAGE_KEYS[k]: v for k, (v, _) in entries.items()}))
    spec = NetworkSpec(stages=tuple(stage_specs), **{k: v for k, (v, _) in top.items()})
    if not stage_specs:
        raise ConfigError("at least one stage is required")
    try:
        return spec.validate()
    except ConfigError as exc:
        msg = str(exc)
        if msg.startswith("stage "):
            index = int(msg.split()[1].rstrip(":"))
            raise ConfigError(msg, stages[index][0]) from None
        raise


def parse_network_config(path):
    path = Path(path)
    return parse_network_config_text(path.read_text(encoding="utf-8"))


def emit_network_config(spec):
    """Serialize a spec to config text that parses back to an equal spec."""
    defaults = NetworkSpec()
    lines = []
    for f in fields(NetworkSpec):
        if f.name == "stages":
            continue
        value = getattr(spec, f.name)
        if value is None:
            continue
        if f.name not in ("alpha", "classes", "stem_channels", "gamma_default") \
                and value == getattr(defaults, f.name):
            continue
        lines.append(f"{f.name} = {value!r}" if isinstance(value, float) else f"{f.name} = {value}")
    for st in spec.stages:
        lines.append("")
        lines.append("[stage]")
        lines.append(f"in = {st.in_channels}")
        lines.append(f"exp = {st.exp_channels}")
        lines.append(f"out = {st.out_channels}")
        lines.append(f"stride = {st.stride}")
        if st.gamma is not None:
            lines.append(f"gamma = {st.gamma}")
    return "\n".join(lines) + "\n"


def _stage(i, e, o, s=1):
    return StageSpec(i, e, o, s)


def resnet20_spec(gamma=2, alpha=1.0):
    """ResNet-20 backbone for CIFAR-10 expressed as GhostSA bottlenecks.

    Each basic block's two 3x3 convolutions become the two modules of a
    bottleneck, so the standard-convolution twin is exactly ResNet-20.
    """
    stages = (
        [_stage(16, 16, 16)] * 3
        + [_stage(16, 32, 32, 2)] + [_stage(32, 32, 32)] * 2
        + [_stage(32, 64, 64, 2)] + [_stage(64, 64, 64)] * 2
    )
    return NetworkSpec(
        stages=tuple(stages), classes=10, alpha=alpha, stem_channels=16, gamma_default=gamma,
        in_channels=3, input_size=32, head_channels=64,
    ).validate()


def toy_mnist_spec(gamma=2, alpha=1.0):
    """Small GhostSANet for 28x28 grayscale digits."""
    stages = (
        _stage(16, 32, 24, 2),
        _stage(24, 48, 24),
        _stage(24, 64, 48, 2),
    )
    return NetworkSpec(
        stages=stages, classes=10, alpha=alpha, stem_channels=16, gamma_default=gamma,
        in_channels=1, input_size=28, stem_stride=2, head_channels=96,
    ).validate()


def toy_cifar_spec(gamma=2, alpha=1.0):
    """Same toy family sized for 32x32 colour images."""
    return replace(toy_mnist_spec(gamma, alpha), in_channels=3, input_size=32).validate()

