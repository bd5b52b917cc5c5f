"""Tiny layer/module system over the autodiff tensor.

Parameters are just Tensors with requires_grad=True collected by
attribute walking, so state dicts have stable dotted names derived from
construction order.  All random initialization draws from an explicit
numpy Generator passed into the constructor; nothing touches global RNG
state, which keeps whole-model init reproducible from one seed.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: walks its attributes to find parameters and children."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _entries(self):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, (Module, ModuleList)):
                yield name, value

    def named_parameters(self, prefix: str = ""):
        for name, value in self._entries():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            else:
                yield from value.named_parameters(prefix=full + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        mine = dict(self.named_parameters())
        missing = sorted(set(mine) - set(state))
        extra = sorted(set(state) - set(mine))
        if missing or extra:
            raise UsageError(f"state dict mismatch: missing={missing} extra={extra}")
        for name, p in mine.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise DimensionError(f"param '{name}': shape {arr.shape} != {p.data.shape}")
            p.data = np.ascontiguousarray(arr)


class ModuleList:
    def __init__(self, modules=()):
        self._mods = list(modules)

    def append(self, m: Module) -> None:
        self._mods.append(m)

    def __iter__(self):
        return iter(self._mods)

    def __len__(self):
        return len(self._mods)

    def __getitem__(self, i):
        return self._mods[i]

    def named_parameters(self, prefix: str = ""):
        for i, m in enumerate(self._mods):
            yield from m.named_parameters(prefix=f"{prefix}{i}.")


def _he_weight(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1,
                 padding: int = 0, bias: bool = True,
                 rng: np.random.Generator | None = None, init: str = "he"):
        if init == "he":
            if rng is None:
                raise UsageError("Conv2d: he init needs an rng")
            w = _he_weight(rng, (cout, cin, kernel, kernel), cin * kernel * kernel)
        elif init == "zero":
            w = np.zeros((cout, cin, kernel, kernel))
        else:
            raise ConfigError(f"unknown init '{init}'")
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1,
                 bias: bool = True, rng: np.random.Generator | None = None):
        if rng is None:
            raise UsageError("ConvTranspose2d needs an rng")
        w = _he_weight(rng, (cin, cout, kernel, kernel), cin * kernel * kernel)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, stride=self.stride)


class GroupNorm(Module):
    """group_norm plus a learned per-channel affine."""

    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        if channels % groups != 0:
            raise ConfigError(f"GroupNorm: {channels} channels, {groups} groups")
        self.groups = groups
        self.channels = channels
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        y = T.group_norm(x, self.groups, self.eps)
        shape = (1, self.channels, 1, 1)
        scale = self.gamma.reshape(shape).broadcast_to(y.shape)
        shift = self.beta.reshape(shape).broadcast_to(y.shape)
        return y * scale + shift


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator | None = None,
                 init: str = "he"):
        if init == "he":
            if rng is None:
                raise UsageError("Linear: he init needs an rng")
            w = _he_weight(rng, (dout, din), din)
        elif init == "zero":
            w = np.zeros((dout, din))
        else:
            raise ConfigError(f"unknown init '{init}'")
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 1
        if squeeze:
            x = x.reshape(1, x.shape[0])
        out = x @ self.weight.transpose(1, 0)
        out = out + self.bias.reshape(1, self.bias.shape[0]).broadcast_to(out.shape)
        if squeeze:
            out = out.reshape(out.shape[1])
        return out
