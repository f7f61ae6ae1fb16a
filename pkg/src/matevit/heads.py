"""Mask-transformer decoder heads turning a token grid into per-pixel class logits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ShapeError
from .layers import Module, TransformerBlock, param
from .numerics import Tensor, bilinear_matrix


@dataclass
class HeadConfig:
    n_classes: int
    decoder_layers: int = 2
    name: str = ""
    # filled from the backbone when the model is assembled
    dim: int | None = None
    patch_size: int | None = None
    image_size: int | None = None
    heads: int | None = None
    ffn_dim: int | None = None

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.decoder_layers < 1:
            raise ValueError("decoder_layers must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size


def upsample_bilinear(x: Tensor, size: int) -> Tensor:
    """Resize the trailing two axes of ``(..., g, g)`` to ``(size, size)``."""
    g = x.shape[-1]
    u = bilinear_matrix(g, size).astype(x.dtype)
    return nx.matmul(nx.matmul(Tensor(u), x), Tensor(np.ascontiguousarray(u.T)))


def _l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    return x / nx.sqrt(nx.square(x).sum(axis=-1, keepdims=True) + eps)


class MaskDecoder(Module):
    """Class embeddings appended to the patch tokens, self-attention blocks, cosine masks.

    Mask logits are cosine similarities between patch and class tokens
    divided by a temperature of ``1/sqrt(C)``.
    """

    def __init__(self, cfg: HeadConfig, rng, dtype=np.float32):
        self.cfg = cfg
        c = cfg.dim
        # unit-normal class embeddings, as in the reference mask decoder; with the
        # 0.02 backbone scale they start nearly parallel and learn very slowly
        self.cls_emb = param(rng.standard_normal((cfg.n_classes, c)).astype(dtype))
        self.blocks = [TransformerBlock(c, cfg.heads, cfg.ffn_dim, rng, dtype)
                       for _ in range(cfg.decoder_layers)]

    def grid_logits(self, tokens: Tensor) -> Tensor:
        """``(B, N, C)`` tokens -> ``(B, N, K)`` patch-level mask logits."""
        cfg = self.cfg
        b, n, c = tokens.shape
        if n != cfg.grid ** 2:
            raise ShapeError(f"{n} tokens do not form the {cfg.grid}x{cfg.grid} grid")
        k = cfg.n_classes
        cls = self.cls_emb.reshape(1, k, c) + np.zeros((b, 1, 1), dtype=tokens.dtype)
        x = nx.concat([tokens, cls], axis=1)
        for blk in self.blocks:
            x = blk(x)
        patches = _l2_normalize(x[:, :n])
        classes = _l2_normalize(x[:, n:])
        return nx.matmul(patches, classes.swapaxes(-1, -2)) * math.sqrt(c)

    def __call__(self, tokens: Tensor) -> Tensor:
        """``(B, N, C)`` -> ``(B, S, S, K)`` logits at input resolution."""
        cfg = self.cfg
        b = tokens.shape[0]
        g, k = cfg.grid, cfg.n_classes
        grid = self.grid_logits(tokens).reshape(b, g, g, k).transpose(0, 3, 1, 2)
        return upsample_bilinear(grid, cfg.image_size).transpose(0, 2, 3, 1)


def decode_masks(head: MaskDecoder, tokens: Tensor) -> Tensor:
    """Per-pixel logits for ``(N, C)`` or ``(B, N, C)`` tokens."""
    if tokens.ndim == 2:
        return head(tokens.reshape(1, *tokens.shape)).reshape(
            head.cfg.image_size, head.cfg.image_size, head.cfg.n_classes)
    return head(tokens)
