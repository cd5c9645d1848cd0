"""Parameter containers and the handful of layers the ResNets are built from."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from .errors import ContractError
from .tensor import DTYPE, Tensor, batch_norm2d, conv2d, linear


class Parameter(Tensor):
    """A trainable leaf tensor. ``decay`` marks whether weight decay applies."""

    __slots__ = ("decay",)

    def __init__(self, data, decay: bool = True):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True)
        self.decay = decay


class Module:
    """Base class: discovers parameters, buffers and children from attributes."""

    buffer_names: tuple[str, ...] = ()

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            yield from _modules_in(name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self.buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data.copy()
        for name, buf in self.named_buffers():
            state[name] = buf.copy()
        return state

    def load_state_dict(self, state: dict) -> None:
        """Copy arrays into the existing parameters and buffers, in place."""
        targets = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        unknown = [k for k in state if k not in targets]
        if unknown:
            raise ContractError(f"unknown tensor name(s): {', '.join(unknown[:5])}")
        missing = [k for k in targets if k not in state]
        if missing:
            raise ContractError(f"missing tensor(s): {', '.join(missing[:5])}")
        for name, arr in state.items():
            arr = np.asarray(arr, dtype=DTYPE)
            if arr.shape != targets[name].shape:
                raise ContractError(f"{name}: shape {arr.shape} != {targets[name].shape}")
            targets[name][...] = arr


def _modules_in(name: str, value) -> Iterator[tuple[str, Module]]:
    if isinstance(value, Module):
        yield name, value
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _modules_in(f"{name}.{i}", item)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 padding: int = 0, groups: int = 1, rng: Optional[np.random.Generator] = None):
        if in_channels % groups or out_channels % groups:
            raise ContractError(f"channels {in_channels}->{out_channels} not divisible by groups={groups}")
        rng = rng or np.random.default_rng(0)
        fan_out = out_channels * kernel * kernel // groups
        shape = (out_channels, in_channels // groups, kernel, kernel)
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_out), size=shape))
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, None, self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int):
        self.gamma = Parameter(np.ones(channels), decay=False)
        self.beta = Parameter(np.zeros(channels), decay=False)
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm2d(x, self.gamma, self.beta, self.running_mean, self.running_var, training)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: Optional[np.random.Generator] = None, zero_init: bool = False):
        if zero_init:
            self.weight = Parameter(np.zeros((out_features, in_features)))
            self.bias = Parameter(np.zeros(out_features))
            return
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(out_features, in_features)))
        self.bias = Parameter(rng.uniform(-bound, bound, size=out_features))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)
