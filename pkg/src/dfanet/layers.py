"""Parameter-holding layers and a minimal module container."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Tuple

import numpy as np

from . import ops
from .ops import ConvParams
from .tensor import Tensor, relu


class Module:
    """Ordered registry of parameters, buffers and child modules.

    Attribute assignment registers ``Tensor`` parameters and child
    ``Module`` objects in insertion order, which fixes parameter names.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{name}.")

    def named_modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for name, m in self._modules.items():
            yield from m.named_modules(f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for _, m in self.named_modules():
            for name, b in list(m._buffers.items()):
                m.register_buffer(name, b.astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def he_normal(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(np.float32), requires_grad=True)


class Conv2d(Module):
    def __init__(self, params: ConvParams, rng: np.random.Generator):
        super().__init__()
        self.params = params
        kh, kw = params.kernel
        fan_in = (params.in_channels // params.groups) * kh * kw
        self.weight = he_normal(params.weight_shape, fan_in, rng)
        if params.has_bias:
            self.bias = Tensor(np.zeros((1, params.out_channels, 1, 1), np.float32),
                               requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.params, self.weight, getattr(self, "bias", None))


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.weight = Tensor(np.ones((1, channels, 1, 1), np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros((1, channels, 1, 1), np.float32), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, np.float32))
        self.register_buffer("running_var", np.ones(channels, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm(x, self.weight, self.bias, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class ConvBN(Module):
    """Convolution, batch norm, optional ReLU."""

    def __init__(self, params: ConvParams, rng: np.random.Generator, activation: bool = True):
        super().__init__()
        self.conv = Conv2d(params, rng)
        self.bn = BatchNorm2d(params.out_channels)
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return relu(y) if self.activation else y


class SepConv(Module):
    """Depthwise k x k (carrying the stride), then pointwise 1 x 1, each with BN + ReLU."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, stride: int = 1,
                 kernel: int = 3):
        super().__init__()
        pad = kernel // 2
        self.dw = ConvBN(ConvParams(cin, cin, (kernel, kernel), stride, pad, groups=cin), rng)
        self.pw = ConvBN(ConvParams(cin, cout, (1, 1)), rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.pw(self.dw(x))


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_features = cin
        self.out_features = cout
        self.weight = he_normal((cout, cin, 1, 1), cin, rng)
        if bias:
            self.bias = Tensor(np.zeros((1, cout, 1, 1), np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ops.fully_connected(x, self.weight, getattr(self, "bias", None))


def sep_conv(x: Tensor, dw_params: ConvParams, pw_params: ConvParams, dw_weight: Tensor,
             pw_weight: Tensor, bn_dw: BatchNorm2d, bn_pw: BatchNorm2d) -> Tensor:
    """Functional depthwise-separable block: dw -> BN -> ReLU -> pw -> BN -> ReLU."""
    if not dw_params.depthwise or pw_params.kernel != (1, 1) or pw_params.groups != 1:
        raise ops.ContractError("sep_conv needs a depthwise stage and a dense 1x1 stage")
    if dw_params.out_channels != pw_params.in_channels:
        raise ops.ShapeError("depthwise output width must equal pointwise input width")
    y = relu(bn_dw(ops.conv2d(x, dw_params, dw_weight)))
    return relu(bn_pw(ops.conv2d(y, pw_params, pw_weight)))


def sep_conv_param_count(cin: int, cout: int, k: int = 3, with_bn: bool = True) -> int:
    n = k * k * cin + cin * cout
    return n + (2 * cin + 2 * cout if with_bn else 0)

