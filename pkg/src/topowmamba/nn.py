"""Parameter containers built on the op set."""
from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

from . import ops
from .autograd import Tensor

INIT_STD = 0.02
CONV_INIT_MODES = ("fan_in", "trunc_normal")
_conv_init = ["fan_in"]


@contextlib.contextmanager
def conv_init(mode: str):
    """Select how Conv2d weights are drawn while building modules.

    "fan_in": truncated normal with std 1/sqrt(fan_in); "trunc_normal": the
    fixed INIT_STD used for Linear layers.
    """
    if mode not in CONV_INIT_MODES:
        raise ValueError(f"conv init must be one of {CONV_INIT_MODES}, got {mode!r}")
    _conv_init.append(mode)
    try:
        yield
    finally:
        _conv_init.pop()


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) resampled into [-2std, 2std]."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


def Parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


class Module:
    """Minimal module tree: attributes that are Tensors with requires_grad are
    parameters; attributes that are Modules (or lists of them) are children."""

    training: bool = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = np.ascontiguousarray(p.data, dtype=dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (d_out, d_in)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, groups: int = 1, bias: bool = True):
        self.stride, self.padding, self.groups = stride, padding, groups
        shape = (c_out, c_in // groups, kernel, kernel)
        fan_in = shape[1] * kernel * kernel
        std = fan_in ** -0.5 if _conv_init[-1] == "fan_in" else INIT_STD
        self.weight = Parameter(trunc_normal(rng, shape, std))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class LayerNorm(Module):
    """LayerNorm over the last axis."""

    def __init__(self, channels: int, eps: float = 1e-5):
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


def to_channels_last(x: Tensor) -> Tensor:
    return ops.permute(x, (0, 2, 3, 1))


def to_channels_first(x: Tensor) -> Tensor:
    return ops.permute(x, (0, 3, 1, 2))


def norm2d(norm: LayerNorm, x: Tensor) -> Tensor:
    """Apply a channel LayerNorm to an N,C,H,W tensor."""
    return to_channels_first(norm(to_channels_last(x)))
