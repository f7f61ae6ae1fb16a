"""Closed-form parameter and multiply-accumulate accounting.

Counts follow the model exactly: attention uses four ``C x C`` projections,
all biased except the key projection, experts and heads are itemized per task. FLOPs are
``2 x MACs``. Softmax, layer norm, GELU and the bilinear resize are tallied
as element operations and kept out of the totals.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field, replace

from .backbone import BackboneConfig


def linear_params(d_in: int, d_out: int, bias: bool = True) -> int:
    return d_in * d_out + (d_out if bias else 0)


def matmul_flops(m: int, k: int, n: int) -> int:
    """FLOPs of an ``(m, k) @ (k, n)`` product: ``2 * m * k * n``."""
    return 2 * m * k * n


def block_params(dim: int, ffn_dim: int) -> int:
    """Attention (4 projections, no key bias) + two layer norms + FFN."""
    return 3 * linear_params(dim, dim) + linear_params(dim, dim, bias=False) + 2 * 2 * dim + linear_params(dim, ffn_dim) + linear_params(ffn_dim, dim)


def expert_params(dim: int, hidden: int) -> int:
    return linear_params(dim, hidden) + linear_params(hidden, dim)


def count_params(cfg) -> dict:
    """Per-component parameter counts of a ``MateVitConfig``; ``"total"`` sums them."""
    b = cfg.backbone
    c, f = b.dim, b.ffn_dim
    out = {
        "patch_embed": linear_params(b.patch_size * b.patch_size * 3, c),
        "pos_embed": b.n_tokens() * c,
    }
    for i in range(b.depth):
        out[f"encoder.{i}"] = block_params(c, f)
    if b.has_upsampler:
        out["upsampler"] = block_params(c, f)
    n = cfg.gate.n_experts
    out["mmoe.gates"] = cfg.n_tasks * 2 * c * n
    out["mmoe.experts"] = n * expert_params(c, cfg.expert_hidden)
    for h in cfg.heads:
        out[f"head.{h.name}"] = h.n_classes * c + h.decoder_layers * block_params(c, h.ffn_dim)
    out["total"] = sum(out.values())
    return out


@dataclass
class FlopLedger:
    """Itemized multiply-accumulates at one input resolution."""

    resolution: int
    items: dict = field(default_factory=dict)
    element_ops: dict = field(default_factory=dict)

    @property
    def total_macs(self) -> int:
        return sum(self.items.values())

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    def subtotal(self, prefix: str) -> int:
        """MACs of every item whose name starts with ``prefix``."""
        return sum(v for k, v in self.items.items() if k.startswith(prefix))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["component", "macs", "flops"])
        for k, v in self.items.items():
            w.writerow([k, v, 2 * v])
        w.writerow(["total", self.total_macs, self.total_flops])
        for k, v in self.element_ops.items():
            w.writerow([f"element_ops.{k}", v, ""])
        return buf.getvalue()

    def table(self) -> str:
        width = max(len(k) for k in self.items) + 2
        lines = [f"FLOP ledger @ {self.resolution}x{self.resolution}",
                 f"{'component':<{width}}{'MMACs':>12}{'GFLOPs':>10}"]
        for k, v in self.items.items():
            lines.append(f"{k:<{width}}{v / 1e6:>12.3f}{2 * v / 1e9:>10.4f}")
        lines.append(f"{'total':<{width}}{self.total_macs / 1e6:>12.3f}{self.gflops:>10.4f}")
        return "\n".join(lines)


def _attention_block(items, elem, name, n_q, n_kv, c, f, n_ffn, heads):
    items[f"{name}.q_proj"] = n_q * c * c
    items[f"{name}.kv_proj"] = 2 * n_kv * c * c
    items[f"{name}.attn_scores"] = n_q * n_kv * c
    items[f"{name}.attn_values"] = n_q * n_kv * c
    items[f"{name}.attn_proj"] = n_q * c * c
    items[f"{name}.ffn"] = 2 * n_ffn * c * f
    elem["softmax"] = elem.get("softmax", 0) + heads * n_q * n_kv
    elem["layernorm"] = elem.get("layernorm", 0) + (n_q + n_ffn) * c
    elem["gelu"] = elem.get("gelu", 0) + n_ffn * f


def count_flops(cfg, resolution: int | None = None, tasks=None, backbone_only: bool = False) -> FlopLedger:
    """Inference ledger of a ``MateVitConfig`` at ``resolution`` (default: its image size).

    Token-wise linears scale with the live token count, attention products
    with its square; a pruning layer attends over its input tokens and runs
    its FFN on the kept ones. Each gate costs one ``C x n_experts`` product
    per token; expert compute counts only the ``m`` selected experts.
    ``tasks`` restricts gates and heads to those task ids.
    """
    b = cfg.backbone
    res = b.image_size if resolution is None else resolution
    if res % b.patch_size:
        raise ValueError(f"resolution {res} not divisible by patch size {b.patch_size}")
    n = b.n_tokens(res)
    c, f, p = b.dim, b.ffn_dim, b.patch_size
    items, elem = {}, {}
    items["patch_embed"] = n * p * p * 3 * c
    schedule = dict(b.prune_schedule(res))
    live = n
    for i in range(b.depth):
        k = schedule.get(i, live)
        _attention_block(items, elem, f"encoder.{i}", live, live, c, f, k, b.heads)
        live = k
    if schedule:
        _attention_block(items, elem, "upsampler", n, live, c, f, n, b.heads)
    if backbone_only:
        return FlopLedger(res, items, elem)
    task_ids = range(cfg.n_tasks) if tasks is None else list(tasks)
    hidden = cfg.expert_hidden
    for t in task_ids:
        h = cfg.heads[t]
        items[f"mmoe.gate.{h.name}"] = n * c * cfg.gate.n_experts
        items[f"mmoe.experts.{h.name}"] = n * cfg.gate.m * 2 * c * hidden
        elem["gelu"] = elem.get("gelu", 0) + n * cfg.gate.m * hidden
    for t in task_ids:
        h = cfg.heads[t]
        m_tok = n + h.n_classes
        for j in range(h.decoder_layers):
            _attention_block(items, elem, f"head.{h.name}.{j}", m_tok, m_tok, c, h.ffn_dim, m_tok, h.heads)
        items[f"head.{h.name}.masks"] = n * h.n_classes * c
        elem["upsample"] = elem.get("upsample", 0) + res * res * h.n_classes
    return FlopLedger(res, items, elem)


def identity_prune_flops(cfg, resolution: int | None = None, backbone_only: bool = False) -> int:
    """FLOPs of ``cfg``'s architecture with every prune keeping all ``N`` tokens.

    The upsampler stays in place. This is the unpruned baseline of a fixed
    pruning architecture, as opposed to the plain ViT, which has no upsampler.
    """
    b = cfg.backbone
    res = b.image_size if resolution is None else resolution
    plain = count_flops(replace(cfg, backbone=replace(b, prune_layers=[], keep_k=None)), res, backbone_only=backbone_only)
    if not b.prune_layers:
        return plain.total_flops
    n = b.n_tokens(res)
    items, elem = {}, {}
    _attention_block(items, elem, "upsampler", n, n, b.dim, b.ffn_dim, n, b.heads)
    return plain.total_flops + 2 * sum(items.values())


def break_even_keep(cfg, resolution: int | None = None, backbone_only: bool = False) -> int | None:
    """Largest ``keep_k`` at ``cfg``'s prune layers still cheaper than the plain ViT.

    Only meaningful for single-stage schedules; ``None`` when no ``k`` saves compute.
    """
    b = cfg.backbone
    res = b.image_size if resolution is None else resolution
    plain = count_flops(replace(cfg, backbone=replace(b, prune_layers=[], keep_k=None)), res,
                        backbone_only=backbone_only).total_flops
    best = None
    for k in range(1, b.n_tokens(res)):
        bb = replace(b, keep_k=k)
        if count_flops(replace(cfg, backbone=bb), res, backbone_only=backbone_only).total_flops < plain:
            best = k
    return best


def sweep_schedules(cfg, target_g: float, resolution: int = 512, backbone_only: bool = True,
                    ratios=None, max_stages: int = 1, unit: str = "flops") -> list:
    """Rank prune schedules by distance of their cost (in G``unit``) to ``target_g``.

    ``unit`` is ``"flops"`` (2 x MACs) or ``"macs"``, since published
    "FLOPs" are often MAC counts. Tries every choice of ``max_stages`` or
    fewer prune layers and every keep ratio in ``ratios``; returns
    ``[(abs_gap, cost, layers, ratio), ...]`` best first.
    """
    if unit not in ("flops", "macs"):
        raise ValueError(f"unit must be 'flops' or 'macs', got {unit!r}")
    ratios = ratios or [r / 100 for r in range(5, 101, 5)]
    b = cfg.backbone
    results = []
    for stages in range(1, max_stages + 1):
        for layers in itertools.combinations(range(b.depth), stages):
            for r in ratios:
                bb = replace(b, prune_layers=list(layers), keep_ratio=r, keep_k=None)
                ledger = count_flops(replace(cfg, backbone=bb), resolution, backbone_only=backbone_only)
                cost = (ledger.total_flops if unit == "flops" else ledger.total_macs) / 1e9
                results.append((abs(cost - target_g), cost, layers, r))
    results.sort()
    return results


def vit_tiny_config(n_classes: int = 46, keep_ratio: float = 0.5, prune_layers=None):
    """Single-task ViT-Tiny-sized model at 512x512 (L=12, C=192, 3 heads, FFN 768)."""
    from .heads import HeadConfig
    from .model import MateVitConfig
    from .moe import GateConfig
    bb = BackboneConfig(image_size=512, patch_size=16, depth=12, dim=192, heads=3, ffn_dim=768,
                        prune_layers=prune_layers, keep_ratio=keep_ratio)
    return MateVitConfig(backbone=bb, gate=GateConfig(n_experts=1, m=1),
                         heads=[HeadConfig(n_classes, 2, name="material")])
