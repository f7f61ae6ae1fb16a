"""ViT backbone with attention-guided token pruning and a decoder-block upsampler.

Tokens flow as ``(B, N, C)``. At a prune layer the block's attention maps are
reduced to one importance score per token (column sums averaged over heads),
the ``k`` highest-scoring tokens survive in their original spatial order,
and the remaining layers run on ``k`` tokens. A cross-attention block then
restores ``N`` tokens, querying from the full-length sequence captured just
before the first prune.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ShapeError
from .layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, TransformerBlock, param
from .numerics import Tensor


@dataclass
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 4
    dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    # None -> a single prune at layer ceil(depth / 2)
    prune_layers: list | None = None
    keep_ratio: float = 0.5
    keep_k: int | None = None

    def __post_init__(self):
        if self.prune_layers is None:
            self.prune_layers = [math.ceil(self.depth / 2)] if self.depth > 1 else []
        self.prune_layers = sorted(int(i) for i in self.prune_layers)
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if any(not 0 <= i < self.depth for i in self.prune_layers):
            raise ValueError(f"prune_layers {self.prune_layers} outside [0, {self.depth})")
        if len(set(self.prune_layers)) != len(self.prune_layers):
            raise ValueError("prune_layers contains duplicates")
        if self.keep_k is None and not 0.0 < self.keep_ratio <= 1.0:
            raise ValueError(f"keep_ratio {self.keep_ratio} outside (0, 1]")
        if self.keep_k is not None and self.keep_k < 1:
            raise ValueError("keep_k must be >= 1")
        self.prune_schedule()

    def n_tokens(self, resolution: int | None = None) -> int:
        res = self.image_size if resolution is None else resolution
        if res % self.patch_size:
            raise ValueError(f"resolution {res} not divisible by patch_size {self.patch_size}")
        return (res // self.patch_size) ** 2

    def prune_schedule(self, resolution: int | None = None) -> list:
        """``[(layer, k), ...]`` for prunes that actually drop tokens.

        A prune keeping every live token is an identity and is left out, so a
        keep ratio of 1 yields the plain ViT.
        """
        live = self.n_tokens(resolution)
        out = []
        for layer in self.prune_layers:
            k = self.keep_k if self.keep_k is not None else max(1, int(self.keep_ratio * live))
            if k > live:
                raise ValueError(f"keep_k {k} exceeds {live} live tokens at layer {layer}")
            if k < live:
                out.append((layer, k))
                live = k
        return out

    @property
    def has_upsampler(self) -> bool:
        return bool(self.prune_schedule())


@dataclass
class PruneRecord:
    """Kept positions (into the original sequence) and the pre-prune snapshot.

    ``kept_indices`` is ``(B, k)`` ascending per row; ``snapshot`` is the
    ``(B, N, C)`` post-Add&Norm sequence of the first pruning block.
    """

    kept_indices: np.ndarray
    snapshot: Tensor
    original_n: int
    stages: list = field(default_factory=list)


def importance_scores(attn) -> np.ndarray:
    """Column sums of each head's attention map, averaged over heads.

    ``attn`` is ``(h, N, N)`` or ``(B, h, N, N)``; rows are softmax outputs so
    the scores of one map sum to N.
    """
    a = attn.data if isinstance(attn, Tensor) else np.asarray(attn)
    return a.sum(axis=-2).mean(axis=-2)


def select_top_k(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores in ascending index order.

    Works on ``(N,)`` or batched ``(B, N)``; ties go to the lower index.
    """
    scores = np.asarray(scores)
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def mhsa(attn: MultiHeadAttention, tokens: Tensor):
    """Self-attention of ``(B, N, C)`` tokens; returns ``(out, attn_maps)``."""
    return attn(tokens)


def encoder_block(block: TransformerBlock, tokens: Tensor, prune: int | None = None):
    """Run one encoder block, optionally pruning to ``prune`` tokens after the first Add & Norm.

    Returns ``(tokens, kept, snapshot)``; ``kept`` and ``snapshot`` are None
    without pruning. Kept indices are constants for autodiff.
    """
    a, maps = block.attn(tokens)
    x = block.norm1(tokens + a)
    kept = snapshot = None
    if prune is not None:
        kept = select_top_k(importance_scores(maps), prune)
        snapshot = x
        x = nx.gather_rows(x, kept)
    x = block.norm2(x + block.ffn(x))
    return x, kept, snapshot


class Upsampler(Module):
    """Decoder block restoring N tokens: cross-attention then FFN, each followed by Add & Norm."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng, dtype=np.float32):
        self.cross = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm1 = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, ffn_dim, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)

    def __call__(self, pruned: Tensor, record: PruneRecord, return_attn: bool = False):
        snap = record.snapshot
        if snap.shape[-2] != record.original_n:
            raise ShapeError(f"snapshot has {snap.shape[-2]} rows, record says {record.original_n}")
        if pruned.shape[-2] != record.kept_indices.shape[-1]:
            raise ShapeError(f"pruned sequence has {pruned.shape[-2]} rows, "
                             f"record keeps {record.kept_indices.shape[-1]}")
        read, maps = self.cross(snap, context=pruned)
        y = self.norm1(snap + read)
        out = self.norm2(y + self.ffn(y))
        return (out, maps) if return_attn else out


def upsample_tokens(upsampler: Upsampler, pruned: Tensor, record: PruneRecord) -> Tensor:
    return upsampler(pruned, record)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng, dtype=np.float32):
        self.cfg = cfg
        p, c = cfg.patch_size, cfg.dim
        self.patch = Linear(p * p * 3, c, rng, dtype)
        self.pos_embed = param(nx.trunc_normal(rng, (cfg.n_tokens(), c), dtype=dtype))
        self.blocks = [TransformerBlock(c, cfg.heads, cfg.ffn_dim, rng, dtype) for _ in range(cfg.depth)]
        self.upsampler = Upsampler(c, cfg.heads, cfg.ffn_dim, rng, dtype) if cfg.has_upsampler else None

    def patch_embed(self, images) -> Tensor:
        """``(B, H, W, 3)`` images -> ``(B, N, C)`` projected patches plus positions."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.pos_embed.dtype))
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        b, h, w, ch = x.shape
        s, p = self.cfg.image_size, self.cfg.patch_size
        if h % p or w % p:
            raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
        if (h, w) != (s, s) or ch != 3:
            raise ShapeError(f"expected {s}x{s}x3 images, got {h}x{w}x{ch}")
        g = s // p
        patches = x.reshape(b, g, p, g, p, 3).transpose(0, 1, 3, 2, 4, 5).reshape(b, g * g, p * p * 3)
        return self.patch(patches) + self.pos_embed

    def encode(self, tokens: Tensor):
        """Encoder stack on embedded tokens; returns ``(tokens, record or None)``."""
        schedule = dict(self.cfg.prune_schedule())
        record = None
        n = tokens.shape[-2]
        for i, block in enumerate(self.blocks):
            tokens, kept, snapshot = encoder_block(block, tokens, schedule.get(i))
            if kept is None:
                continue
            if record is None:
                record = PruneRecord(kept, snapshot, n, [(i, kept)])
            else:
                record.kept_indices = np.take_along_axis(record.kept_indices, kept, axis=-1)
                record.stages.append((i, kept))
        return tokens, record

    def __call__(self, images):
        """Images to full-length ``(B, N, C)`` tokens (after upsampling when pruned)."""
        tokens, record = self.encode(self.patch_embed(images))
        if record is not None:
            tokens = self.upsampler(tokens, record)
        return tokens, record

