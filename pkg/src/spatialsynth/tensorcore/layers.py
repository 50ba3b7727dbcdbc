"""Trainable layers that append nodes to a :class:`~.graph.Graph`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .graph import Node, Tensor, concat, conv, group_norm


class Module:
    """Parameter container; attribute assignment registers tensors and submodules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for name, t in self.named_parameters():
            t.name = name
            params[name] = t
        return params

    def astype(self, dtype) -> "Module":
        for _, t in self.named_parameters():
            t.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, t in params.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {t.shape}")
            t.data = np.ascontiguousarray(arr, dtype=t.dtype)

    def num_parameters(self) -> int:
        return sum(t.data.size for _, t in self.named_parameters())

    def __call__(self, *args, **kwargs):
        return self.build(*args, **kwargs)

    def build(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


def _he(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.standard_normal(shape) * (gain / math.sqrt(fan_in))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, gain: float = 1.0):
        super().__init__()
        self.weight = _param(_he(rng, (d_in, d_out), d_in, gain))
        self.bias = _param(np.zeros(d_out)) if bias else None

    def build(self, x: Node) -> Node:
        g = x.graph
        y = x @ g.param(self.weight)
        if self.bias is not None:
            y = y + g.param(self.bias)
        return y


class Conv2d(Module):
    """2-D convolution with HWIO weights; input ``(N, H, W, C)``."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3,
                 stride: int = 1, pad: int | None = None, gain: float = 1.0):
        super().__init__()
        self.stride = stride
        self.pad = kernel // 2 if pad is None else pad
        self.weight = _param(_he(rng, (kernel, kernel, c_in, c_out), kernel * kernel * c_in, gain))
        self.bias = _param(np.zeros(c_out))

    def build(self, x: Node) -> Node:
        g = x.graph
        return conv(x, g.param(self.weight), self.stride, self.pad) + g.param(self.bias)


class Conv3d(Module):
    """3-D convolution over ``(N, T, H, W, C)`` with THWIO weights."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel=(3, 3, 3), gain: float = 1.0):
        super().__init__()
        kernel = tuple(kernel)
        self.pad = tuple(k // 2 for k in kernel)
        fan_in = math.prod(kernel) * c_in
        self.weight = _param(_he(rng, kernel + (c_in, c_out), fan_in, gain))
        self.bias = _param(np.zeros(c_out))

    def build(self, x: Node) -> Node:
        g = x.graph
        return conv(x, g.param(self.weight), 1, self.pad) + g.param(self.bias)


class TemporalConv(Module):
    """Channel-preserving residual mixing across frames (kernel 3 over time)."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.norm = GroupNorm(channels)
        # small init keeps the block near identity at the start of training
        self.conv = Conv3d(channels, channels, rng, kernel=(3, 1, 1), gain=0.1)

    def build(self, x: Node) -> Node:
        return x + self.conv(self.norm(x).silu())


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int | None = None, eps: float = 1e-5):
        super().__init__()
        self.groups = groups or math.gcd(channels, 8)
        self.eps = eps
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))

    def build(self, x: Node) -> Node:
        g = x.graph
        return group_norm(x, g.param(self.gamma), g.param(self.beta), self.groups, self.eps)


class CrossAttention(Module):
    """Single-head scaled dot-product attention from feature tokens to a context.

    ``x`` is ``(B, L, C)`` query tokens and ``context`` is ``(B, M, Cc)``;
    returns ``(B, L, C)`` (the caller adds the residual).
    """

    def __init__(self, dim: int, context_dim: int, rng: np.random.Generator, inner: int = 32):
        super().__init__()
        self.scale = 1.0 / math.sqrt(inner)
        self.norm = GroupNorm(dim)
        self.q = Linear(dim, inner, rng, bias=False)
        self.k = Linear(context_dim, inner, rng, bias=False)
        self.v = Linear(context_dim, inner, rng, bias=False)
        self.out = Linear(inner, dim, rng, gain=0.1)

    def build(self, x: Node, context: Node) -> Node:
        q = self.q(self.norm(x)) * self.scale
        k = self.k(context)
        v = self.v(context)
        attn = (q @ k.transpose(0, 2, 1)).softmax(axis=-1)
        return self.out(attn @ v)


class Modulation(Module):
    """Feature-wise scale/shift from a conditioning vector: ``h * (1 + s) + b``."""

    def __init__(self, cond_dim: int, channels: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.proj = Linear(cond_dim, 2 * channels, rng, gain=0.1)

    def build(self, h: Node, cond: Node) -> Node:
        b = cond.shape[0]
        ss = self.proj(cond)
        bshape = (b,) + (1,) * (len(h.shape) - 2) + (self.channels,)
        scale = ss.slice(-1, 0, self.channels).reshape(bshape)
        shift = ss.slice(-1, self.channels, 2 * self.channels).reshape(bshape)
        return h * (scale + 1.0) + shift


__all__ = [
    "Module", "ModuleList", "Linear", "Conv2d", "Conv3d", "TemporalConv", "GroupNorm",
    "CrossAttention", "Modulation", "concat",
]
