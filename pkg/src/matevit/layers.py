"""Parameter containers and the transformer building blocks shared by every stage."""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class Module:
    """Minimal parameter tree: attributes that are parameters, modules or lists of modules."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def n_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def cast(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()
            p.grad = np.zeros_like(p.data)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    """``x @ W + b``; weights truncated-normal with ``std`` (``None`` means ``1/sqrt(d_in)``)."""

    def __init__(self, d_in: int, d_out: int, rng, dtype=np.float32, bias: bool = True,
                 std: float | None = 0.02):
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = param(nx.trunc_normal(rng, (d_in, d_out), std=std, dtype=dtype))
        self.bias = param(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = nx.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = param(np.ones(dim, dtype=dtype))
        self.beta = param(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    """Two linears with an exact GELU in between (C -> hidden -> C)."""

    def __init__(self, dim: int, hidden: int, rng, dtype=np.float32, std: float | None = 0.02):
        self.fc1 = Linear(dim, hidden, rng, dtype, std=std)
        self.fc2 = Linear(hidden, dim, rng, dtype, std=std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nx.gelu(self.fc1(x)))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, c = x.shape
    return x.reshape(b, n, heads, c // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``heads`` heads of width ``dim // heads``.

    Called with one sequence it is self-attention; with ``context`` the keys
    and values come from the context (cross-attention). Inputs are
    ``(B, N, C)``; returns the projected output and the ``(B, h, Nq, Nk)``
    attention maps.
    """

    def __init__(self, dim: int, heads: int, rng, dtype=np.float32):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(dim, dim, rng, dtype)
        # no key bias: it adds a per-query constant to the scores, which softmax cancels
        self.k = Linear(dim, dim, rng, dtype, bias=False)
        self.v = Linear(dim, dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)

    def __call__(self, x: Tensor, context: Tensor | None = None):
        context = x if context is None else context
        q = _split_heads(self.q(x), self.heads)
        k = _split_heads(self.k(context), self.heads)
        v = _split_heads(self.v(context), self.heads)
        scale = 1.0 / math.sqrt(q.shape[-1])
        attn = nx.softmax_rows(nx.matmul(q, k.swapaxes(-1, -2)) * scale)
        out = _merge_heads(nx.matmul(attn, v))
        return self.proj(out), attn


class TransformerBlock(Module):
    """Post-norm encoder block: Add & Norm after attention and after the FFN."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng, dtype=np.float32):
        self.attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm1 = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, ffn_dim, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        a, _ = self.attn(x)
        x = self.norm1(x + a)
        return self.norm2(x + self.ffn(x))
