"""Parameter containers and the handful of layers the three networks share."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from ..tensor import Tensor, conv2d, group_norm, layer_norm, silu
from ..tensor.rng import RngStream


class Module:
    """Attribute-walking parameter registry.

    Parameters are :class:`Tensor` attributes created with ``requires_grad``;
    submodules are :class:`Module` attributes or lists of them. Names are the
    dotted attribute paths, assigned once via :meth:`assign_names`.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


def he_normal(rng: RngStream, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(shape) * np.float32(gain / np.sqrt(fan_in))


class Linear(Module):
    """y = x W^T + b with W stored as [d_out, d_in]."""

    def __init__(self, d_in: int, d_out: int, rng: RngStream, bias: bool = True, gain: float = 1.0):
        self.weight = param(he_normal(rng, (d_out, d_in), d_in, gain))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight.T
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: RngStream, k: int = 3, stride: int = 1, gain: float = 1.0):
        self.weight = param(he_normal(rng, (k, k, c_in, c_out), k * k * c_in, gain))
        self.bias = param(np.zeros(c_out))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8):
        self.groups = min(groups, channels)
        self.gamma = param(np.ones(channels))
        self.beta = param(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return group_norm(x, self.groups, self.gamma, self.beta)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class ResBlock(Module):
    """GroupNorm-SiLU-conv twice, optional timestep injection, 1x1 skip when widths differ."""

    def __init__(self, c_in: int, c_out: int, rng: RngStream, time_dim: int | None = None, groups: int = 8):
        self.norm1 = GroupNorm(c_in, groups)
        self.conv1 = Conv2d(c_in, c_out, rng.spawn(0))
        self.time_proj = Linear(time_dim, c_out, rng.spawn(1)) if time_dim else None
        self.norm2 = GroupNorm(c_out, groups)
        self.conv2 = Conv2d(c_out, c_out, rng.spawn(2), gain=0.5)
        self.skip = Linear(c_in, c_out, rng.spawn(3)) if c_in != c_out else None

    def __call__(self, x: Tensor, temb: Tensor | None = None) -> Tensor:
        h = self.conv1(silu(self.norm1(x)))
        if self.time_proj is not None:
            t = self.time_proj(temb)
            h = h + t.reshape(t.shape[0], 1, 1, t.shape[1])
        h = self.conv2(silu(self.norm2(h)))
        return (self.skip(x) if self.skip is not None else x) + h
