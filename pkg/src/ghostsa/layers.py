"""Stateful layer objects wrapping the functional ops.

Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``Parameter.grad`` during ``backward``.
There is no autograd: containers call their children's ``backward`` in reverse.
"""

from __future__ import annotations

import numpy as np

from . import core
from .adder import AdderFilterBank, adder_conv2d, adder_conv2d_backward
from .core import DTYPE, ConvGeometry
from .shift import P_MAX, P_MIN, ShiftFilterBank, densify, quantize_shift_array


class Parameter:
    """A trainable array plus its gradient.

    ``kind`` is one of ``"shift"`` (continuous proxy of a power-of-two weight),
    ``"adder"``, ``"dense"``, ``"bn"`` or ``"bias"``; the optimizer uses it to
    pick weight decay and adder step scaling.
    """

    __slots__ = ("value", "grad", "kind")

    def __init__(self, value, kind):
        self.value = np.ascontiguousarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.kind = kind

    @property
    def decay(self):
        return self.kind in ("shift", "adder", "dense")

    def __repr__(self):
        return f"Parameter(kind={self.kind!r}, shape={self.value.shape})"


def kaiming_uniform(rng, shape, fan_in, gain=np.sqrt(2.0)):
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Layer:
    def __init__(self):
        self.params = {}
        self.buffers = {}
        self.children = {}

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def __call__(self, x, training=False):
        return self.forward(x, training)

    def named_parameters(self, prefix=""):
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix=""):
        for name, b in self.buffers.items():
            yield prefix + name, b
        for cname, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def named_layers(self, prefix=""):
        yield prefix.rstrip("."), self
        for cname, child in self.children.items():
            yield from child.named_layers(f"{prefix}{cname}.")

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad[...] = 0

    def __repr__(self):
        return f"{type(self).__name__}()"


class _ConvBase(Layer):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=None, groups=1):
        super().__init__()
        if padding is None:
            padding = kernel // 2
        self.geometry = ConvGeometry(in_channels, out_channels, kernel, stride, padding, groups)
        self._x = None
        self._cols = None

    @property
    def fan_in(self):
        g = self.geometry
        return (g.in_channels // g.groups) * g.kernel * g.kernel

    def output_shape(self, input_shape):
        return self.geometry.output_shape(input_shape)

    @property
    def method(self):
        # per-tap loops beat tiny batched GEMMs when each group has one channel
        g = self.geometry
        return "direct" if g.groups > 1 and g.groups == g.in_channels else "im2col"

    def _conv_forward(self, x, weight, bias):
        x = core.check_tensor4(x)
        core.check_conv_operands(x, weight, bias, self.geometry)
        self._x = x
        if self.method == "direct":
            return core.conv2d(x, weight, bias, self.geometry, method="direct")
        ho, wo = self.geometry.output_hw(x.shape[2], x.shape[3])
        self._cols = core.im2col(x, self.geometry)
        out = core.gemm_conv(self._cols, weight, self.geometry, x.shape[0], ho, wo)
        if bias is not None:
            out += bias[None, :, None, None]
        return out

    def _conv_backward(self, grad, weight, weight_name):
        gx, gw, gb = core.conv2d_backward(self._x, weight, grad, self.geometry,
                                          cols=self._cols, method=self.method)
        self.params[weight_name].grad += gw
        if "bias" in self.params:
            self.params["bias"].grad += gb
        self._cols = None
        return gx

    def __repr__(self):
        g = self.geometry
        return (f"{type(self).__name__}({g.in_channels}, {g.out_channels}, k={g.kernel}, "
                f"s={g.stride}, p={g.padding}, groups={g.groups})")


class ShiftConv2d(_ConvBase):
    """Convolution whose weights are quantized to ``s * 2**p`` on every forward."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=None, groups=1,
                 bias=True, rng=None, p_min=P_MIN, p_max=P_MAX):
        super().__init__(in_channels, out_channels, kernel, stride, padding, groups)
        self.p_min = p_min
        self.p_max = p_max
        rng = rng if rng is not None else np.random.default_rng(0)
        proxy = kaiming_uniform(rng, self.geometry.weight_shape, self.fan_in)
        limit = 2.0 ** p_max
        self.params["proxy"] = Parameter(np.clip(proxy, -limit, limit), "shift")
        if bias:
            self.params["bias"] = Parameter(np.zeros(out_channels), "bias")
        # set by tests to evaluate the layer at a fixed dense weight
        self.weight_override = None
        self._dense = None

    def bank(self):
        sign, exponent = quantize_shift_array(self.params["proxy"].value, self.p_min, self.p_max)
        bias = self.params["bias"].value if "bias" in self.params else None
        return ShiftFilterBank(self.geometry, sign, exponent, bias, self.params["proxy"].value)

    def effective_weight(self):
        if self.weight_override is not None:
            return np.asarray(self.weight_override, dtype=DTYPE)
        sign, exponent = quantize_shift_array(self.params["proxy"].value, self.p_min, self.p_max)
        return densify(sign, exponent)

    def forward(self, x, training=False):
        bias = self.params["bias"].value if "bias" in self.params else None
        self._dense = self.effective_weight()
        return self._conv_forward(x, self._dense, bias)

    def backward(self, grad):
        # straight-through: the proxy receives the gradient of the quantized weight
        return self._conv_backward(grad, self._dense, "proxy")


class DenseConv2d(_ConvBase):
    """Ordinary multiply-accumulate convolution (used only by standard-conv twins)."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=None, groups=1,
                 bias=True, rng=None):
        super().__init__(in_channels, out_channels, kernel, stride, padding, groups)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = Parameter(
            kaiming_uniform(rng, self.geometry.weight_shape, self.fan_in), "dense"
        )
        if bias:
            self.params["bias"] = Parameter(np.zeros(out_channels), "bias")

    def forward(self, x, training=False):
        bias = self.params["bias"].value if "bias" in self.params else None
        return self._conv_forward(x, self.params["weight"].value, bias)

    def backward(self, grad):
        return self._conv_backward(grad, self.params["weight"].value, "weight")


class AdderConv2d(_ConvBase):
    def __init__(self, in_channels, out_channels, kernel=1, stride=1, padding=None, groups=1,
                 bias=True, rng=None, clip_input_grad=True):
        super().__init__(in_channels, out_channels, kernel, stride, padding, groups)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = Parameter(
            kaiming_uniform(rng, self.geometry.weight_shape, self.fan_in), "adder"
        )
        if bias:
            self.params["bias"] = Parameter(np.zeros(out_channels), "bias")
        self.clip_input_grad = clip_input_grad

    def bank(self):
        bias = self.params["bias"].value if "bias" in self.params else None
        return AdderFilterBank(self.geometry, self.params["weight"].value, bias)

    def forward(self, x, training=False):
        self._x = core.check_tensor4(x)
        return adder_conv2d(self._x, self.bank())

    def backward(self, grad):
        gx, gw, gb = adder_conv2d_backward(self._x, self.bank(), grad, self.clip_input_grad)
        self.params["weight"].grad += gw
        if "bias" in self.params:
            self.params["bias"].grad += gb
        return gx


class BatchNorm2d(Layer):
    def __init__(self, channels, momentum=core.BN_MOMENTUM, eps=core.BN_EPS):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.params["scale"] = Parameter(np.ones(channels), "bn")
        self.params["shift"] = Parameter(np.zeros(channels), "bn")
        self.buffers["running_mean"] = np.zeros(channels, dtype=DTYPE)
        self.buffers["running_var"] = np.ones(channels, dtype=DTYPE)
        self._cache = None

    def forward(self, x, training=False):
        y, self._cache = core.batch_norm(
            x, self.params["scale"].value, self.params["shift"].value,
            self.buffers["running_mean"], self.buffers["running_var"], training,
            self.momentum, self.eps,
        )
        return y

    def backward(self, grad):
        gx, gs, gb = core.batch_norm_backward(grad, self.params["scale"].value, self._cache)
        self.params["scale"].grad += gs
        self.params["shift"].grad += gb
        return gx

    def __repr__(self):
        return f"BatchNorm2d({self.channels})"


class ReLU(Layer):
    def forward(self, x, training=False):
        self._x = x
        return core.relu(x)

    def backward(self, grad):
        return core.relu_backward(self._x, grad)


class HardSwish(Layer):
    def forward(self, x, training=False):
        self._x = x
        return core.hard_swish(x)

    def backward(self, grad):
        return core.hard_swish_backward(self._x, grad)


class MaxPool2d(Layer):
    def __init__(self, window=2, stride=2):
        super().__init__()
        self.window = window
        self.stride = stride

    def forward(self, x, training=False):
        self._x = x
        return core.maxpool2d(x, self.window, self.stride)

    def backward(self, grad):
        return core.maxpool2d_backward(self._x, grad, self.window, self.stride)

    def output_shape(self, input_shape):
        n, c, h, w = input_shape
        return (n, c, (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1)

    def __repr__(self):
        return f"MaxPool2d({self.window}, {self.stride})"


class GlobalAvgPool(Layer):
    def forward(self, x, training=False):
        self._shape = x.shape
        return core.global_avg_pool(x)

    def backward(self, grad):
        return core.global_avg_pool_backward(self._shape, grad)

    def output_shape(self, input_shape):
        return tuple(input_shape[:2])


class Linear(Layer):
    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.params["weight"] = Parameter(
            kaiming_uniform(rng, (out_features, in_features), in_features, gain=1.0), "dense"
        )
        self.params["bias"] = Parameter(np.zeros(out_features), "bias")

    def forward(self, x, training=False):
        self._x = x
        return core.linear(x, self.params["weight"].value, self.params["bias"].value)

    def backward(self, grad):
        gx, gw, gb = core.linear_backward(self._x, self.params["weight"].value, grad)
        self.params["weight"].grad += gw
        self.params["bias"].grad += gb
        return gx

    def output_shape(self, input_shape):
        return (input_shape[0], self.out_features)

    def __repr__(self):
        return f"Linear({self.in_features}, {self.out_features})"


class Sequential(Layer):
    def __init__(self, *named_layers):
        super().__init__()
        for name, layer in named_layers:
            self.children[name] = layer

    def forward(self, x, training=False):
        for layer in self.children.values():
            x = layer.forward(x, training)
        return x

    def backward(self, grad):
        for layer in reversed(list(self.children.values())):
            grad = layer.backward(grad)
        return grad

    def output_shape(self, input_shape):
        for layer in self.children.values():
            input_shape = layer.output_shape(input_shape)
        return input_shape

    def __repr__(self):
        inner = ", ".join(f"{k}={v!r}" for k, v in self.children.items())
        return f"Sequential({inner})"
