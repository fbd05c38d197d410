"""Parameterised layers built on :mod:`tempofuse.nn.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: tracks train/eval mode and walks child modules in attribute order."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                    dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True, dtype=np.float32):
        if min(in_ch, out_ch, kernel, stride) < 1 or padding < 0:
            raise ValueError(f"bad Conv2d({in_ch}, {out_ch}, k={kernel}, s={stride}, p={padding})")
        self.stride, self.padding = stride, padding
        self.weight = _param(kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel),
                                             in_ch * kernel * kernel, dtype), "weight")
        self.bias = _param(np.zeros(out_ch, dtype=dtype), "bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def output_shape(self, shape):
        n, _, h, w = shape
        k = self.weight.shape[2]
        return (n, self.weight.shape[0], (h + 2 * self.padding - k) // self.stride + 1,
                (w + 2 * self.padding - k) // self.stride + 1)


class Conv1d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True, dtype=np.float32):
        if min(in_ch, out_ch, kernel, stride) < 1 or padding < 0:
            raise ValueError(f"bad Conv1d({in_ch}, {out_ch}, k={kernel}, s={stride}, p={padding})")
        self.stride, self.padding = stride, padding
        self.weight = _param(kaiming_uniform(rng, (out_ch, in_ch, kernel), in_ch * kernel, dtype),
                             "weight")
        self.bias = _param(np.zeros(out_ch, dtype=dtype), "bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, self.stride, self.padding)

    def output_shape(self, shape):
        n, _, t = shape
        k = self.weight.shape[2]
        return (n, self.weight.shape[0], (t + 2 * self.padding - k) // self.stride + 1)


class BatchNorm(Module):
    """Batch normalization over the channel axis (axis 1) of 2-D or 1-D feature maps."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.momentum, self.eps = momentum, eps
        self.gamma = _param(np.ones(channels, dtype=dtype), "gamma")
        self.beta = _param(np.zeros(channels, dtype=dtype), "beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           self.training, self.momentum, self.eps)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype=np.float32):
        if min(in_features, out_features) < 1:
            raise ValueError(f"bad Dense({in_features}, {out_features})")
        self.weight = _param(kaiming_uniform(rng, (in_features, out_features), in_features, dtype),
                             "weight")
        self.bias = _param(np.zeros(out_features, dtype=dtype), "bias")

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ValueError(f"Dense expects {self.weight.shape[0]} features, got {x.shape[-1]}")
        return T.matmul(x, self.weight) + self.bias


class Dropout(Module):
    """Inverted dropout driven by its own seeded generator.

    ``enabled = False`` turns it into the identity regardless of mode; the
    gradient checker uses that to make the forward pass deterministic.
    """

    def __init__(self, p: float, rng: np.random.Generator):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng
        self.enabled = True

    def forward(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.p, self.rng, self.training and self.enabled)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x)


class MaxPool2d(Module):
    def __init__(self, size: int = 2):
        self.size = size

    def forward(self, x: Tensor) -> Tensor:
        return T.maxpool2d(x, self.size)


class Softmax(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.softmax(x)
