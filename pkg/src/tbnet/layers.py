"""Parameterized layers and a small module tree.

Modules discover children and parameters from their attributes in insertion
order, so parameter names (``stages.1.0.conv1.weight``) are stable across runs
and double as checkpoint keys.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as te
from .tensor import Tensor
from .temporal import conv3d, temporal_conv


class Module:
    training: bool = True

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield (f"{prefix}.{name}" if prefix else name), value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield (f"{prefix}.{name}" if prefix else name), getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}.{name}" if prefix else name)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(own) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, buf in buffers.items():
            if state[name].shape != buf.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {buf.shape}")
            buf[...] = state[name]

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        te.zero_grads(self.parameters())

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Layer(Module):
    """A leaf that records the shapes it last saw, for complexity audits."""

    kind = "layer"
    in_shape: tuple | None = None
    out_shape: tuple | None = None

    def __call__(self, x: Tensor) -> Tensor:
        y = self.forward(x)
        self.in_shape, self.out_shape = x.shape, y.shape
        return y


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, pad: int | None = None,
                 seed=None, dtype=np.float64):
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.pad = k // 2 if pad is None else pad
        self.weight = te.he_init((c_out, c_in, k, k), c_in * k * k, _rng(seed), dtype)

    def forward(self, x):
        return te.conv2d_spatial(x, self.weight, self.stride, self.pad)


class Conv3d(Layer):
    kind = "conv3d"

    def __init__(self, c_in: int, c_out: int, k: tuple, stride: tuple = (1, 1), pad: tuple | None = None,
                 seed=None, dtype=np.float64):
        self.c_in, self.c_out, self.k = c_in, c_out, tuple(k)
        self.stride = tuple(stride)
        self.pad = tuple(n // 2 for n in self.k) if pad is None else tuple(pad)
        fan_in = c_in * int(np.prod(self.k))
        self.weight = te.he_init((c_out, c_in) + self.k, fan_in, _rng(seed), dtype)

    def forward(self, x):
        return conv3d(x, self.weight, self.stride[0], self.stride[1], self.pad)


class TemporalConv(Layer):
    kind = "temporal_conv"

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, seed=None, dtype=np.float64):
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.weight = te.he_init((c_out, k, c_in), c_in * k, _rng(seed), dtype)

    def forward(self, x):
        return temporal_conv(x, self.weight, self.stride)


class BatchNorm(Layer):
    """Per-channel normalization over batch, time and space."""

    kind = "batch_norm"
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 channel_axis: int = 2, dtype=np.float64):
        self.channels, self.momentum, self.eps, self.channel_axis = channels, momentum, eps, channel_axis
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x):
        return te.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps, self.channel_axis)


class SampleNorm(Layer):
    """Per-sample normalization with a per-channel affine; identical in train and eval."""

    kind = "sample_norm"

    def __init__(self, channels: int, eps: float = 1e-5, channel_axis: int = 2, dtype=np.float64):
        self.channels, self.eps, self.channel_axis = channels, eps, channel_axis
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return te.sample_norm(x, self.gamma, self.beta, self.eps, self.channel_axis)


class Linear(Layer):
    kind = "linear"

    def __init__(self, c_in: int, c_out: int, seed=None, dtype=np.float64):
        self.c_in, self.c_out = c_in, c_out
        self.weight = te.he_init((c_out, c_in), c_in, _rng(seed), dtype)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return te.linear(x, self.weight, self.bias)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class ReLU(Module):
    def forward(self, x):
        return te.relu(x)
