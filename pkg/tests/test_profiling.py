from dataclasses import replace
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matevit.backbone import BackboneConfig
from matevit.heads import HeadConfig
from matevit.model import MateViT, MateVitConfig
from matevit.moe import GateConfig
from matevit.profiling import (break_even_keep, count_flops, count_params, identity_prune_flops, linear_params,
                               matmul_flops, sweep_schedules, vit_tiny_config)


def with_backbone(cfg, **kw):
    return replace(cfg, backbone=replace(cfg.backbone, **kw))


def test_hand_counts():
    assert linear_params(192, 192) == 37_056
    assert matmul_flops(2, 3, 4) == 48


@pytest.mark.parametrize("kw", [{}, {"keep_ratio": 1.0}, {"prune_layers": [0, 2], "keep_ratio": 0.5}])
def test_param_count_matches_model(kw):
    cfg = MateVitConfig(backbone=BackboneConfig(image_size=32, patch_size=8, depth=4, dim=16, heads=2,
                                                ffn_dim=24, **kw))
    assert count_params(cfg)["total"] == MateViT(cfg).n_params()


def test_doubling_experts_adds_expert_params():
    cfg = MateVitConfig(gate=GateConfig(n_experts=2, m=1))
    big = replace(cfg, gate=GateConfig(n_experts=4, m=1))
    a, b = count_params(cfg), count_params(big)
    per_expert = a["mmoe.experts"] // 2
    assert b["mmoe.experts"] - a["mmoe.experts"] == 2 * per_expert


def test_vit_tiny_params_near_reference():
    total = count_params(vit_tiny_config())["total"]
    assert abs(total / 7.78e6 - 1) <= 0.20


def test_unpruned_equals_plain():
    cfg = vit_tiny_config()
    plain = with_backbone(cfg, prune_layers=[])
    ident = with_backbone(cfg, keep_ratio=1.0)
    assert count_flops(ident).items == count_flops(plain).items
    assert "upsampler.q_proj" not in count_flops(plain).items


def test_half_prune_at_midpoint_exact_ratios():
    cfg = vit_tiny_config(prune_layers=[6], keep_ratio=0.5)
    pruned, plain = count_flops(cfg), count_flops(with_backbone(cfg, prune_layers=[]))
    n, k, c, f = 1024, 512, 192, 768
    for i in range(7, 12):
        p, q = f"encoder.{i}.", f"encoder.{i}."
        for term in ("q_proj", "kv_proj", "attn_proj", "ffn"):
            assert Fraction(pruned.items[p + term], plain.items[q + term]) == Fraction(1, 2)
        for term in ("attn_scores", "attn_values"):
            assert Fraction(pruned.items[p + term], plain.items[q + term]) == Fraction(1, 4)
    # the prune layer attends over all N tokens and runs its FFN on k
    assert pruned.items["encoder.6.attn_scores"] == plain.items["encoder.6.attn_scores"]
    assert Fraction(pruned.items["encoder.6.ffn"], plain.items["encoder.6.ffn"]) == Fraction(1, 2)

    def block(nq, nkv, nffn):
        return nq * c * c + 2 * nkv * c * c + 2 * nq * nkv * c + nq * c * c + 2 * nffn * c * f
    patch = n * 16 * 16 * 3 * c
    plain_bb = patch + 12 * block(n, n, n)
    pruned_bb = patch + 6 * block(n, n, n) + block(n, n, k) + 5 * block(k, k, k) + block(n, k, n)
    bb = count_flops(cfg, backbone_only=True)
    bb_plain = count_flops(with_backbone(cfg, prune_layers=[]), backbone_only=True)
    assert Fraction(bb.total_flops, bb_plain.total_flops) == Fraction(pruned_bb, plain_bb)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 3), st.integers(1, 15))
def test_flops_strictly_increase_with_keep_k(layer, k):
    base = MateVitConfig(backbone=BackboneConfig(image_size=32, patch_size=8, depth=4, dim=16, heads=2,
                                                 ffn_dim=24, prune_layers=[layer], keep_k=k))
    cost = count_flops(base).total_flops
    ceiling = identity_prune_flops(base)
    nxt = count_flops(with_backbone(base, keep_k=k + 1)).total_flops if k < 15 else ceiling
    assert cost < nxt <= ceiling


def test_break_even_against_plain_vit():
    # the upsampler is a full block over N tokens, so a light prune costs more than the plain ViT
    cfg = vit_tiny_config(prune_layers=[6])
    plain = count_flops(with_backbone(cfg, prune_layers=[])).total_flops
    k = break_even_keep(cfg)
    assert 512 <= k < 1023
    assert count_flops(with_backbone(cfg, keep_k=k)).total_flops < plain
    assert count_flops(with_backbone(cfg, keep_k=k + 1)).total_flops >= plain
    assert count_flops(with_backbone(cfg, keep_k=1023)).total_flops > plain


def test_expert_flops_independent_of_n_experts():
    a = MateVitConfig(gate=GateConfig(n_experts=2, m=1))
    b = replace(a, gate=GateConfig(n_experts=8, m=1))
    assert count_flops(a).subtotal("mmoe.experts") == count_flops(b).subtotal("mmoe.experts")
    assert count_flops(b).subtotal("mmoe.gate") == 4 * count_flops(a).subtotal("mmoe.gate")


def test_ledger_consistency():
    ledger = count_flops(MateVitConfig())
    assert ledger.total_macs == sum(ledger.items.values())
    assert ledger.total_flops == 2 * ledger.total_macs
    assert count_flops(MateVitConfig()).items == ledger.items
    rows = ledger.to_csv().splitlines()
    assert rows[0] == "component,macs,flops"
    assert f"total,{ledger.total_macs},{ledger.total_flops}" in rows
    assert ledger.subtotal("head.object") + ledger.subtotal("head.material") == ledger.subtotal("head.")
    with pytest.raises(ValueError):
        count_flops(MateVitConfig(), resolution=60)


def test_resolution_scaling():
    cfg = MateVitConfig(backbone=BackboneConfig(keep_ratio=1.0),
                        heads=[HeadConfig(5, name="object")])
    small = count_flops(cfg, 64).items["encoder.0.q_proj"]
    assert count_flops(cfg, 128).items["encoder.0.q_proj"] == 4 * small
    assert count_flops(cfg, 128).items["encoder.0.attn_scores"] == 16 * count_flops(cfg, 64).items["encoder.0.attn_scores"]


def test_sweep_reports_nearest_schedule():
    results = sweep_schedules(vit_tiny_config(), 4.30)
    gap, cost, layers, ratio = results[0]
    assert gap == min(r[0] for r in results) and gap == pytest.approx(abs(cost - 4.30))
    assert len(layers) == 1 and 0 < ratio <= 1
    with pytest.raises(ValueError):
        sweep_schedules(vit_tiny_config(), 4.30, unit="watts")
