"""Watch the backbone drop tokens, then price what it saves.

A desk-sized model trains briefly on synthetic data, then one image goes
through the backbone. We print the per-token importance at the prune layer,
mark which patches survive, and compare FLOP totals for a few keep counts
against the plain ViT.

With small query/key weights the attention is still close to uniform after
a short run, so scores sit near 1; the grid shows their deviation in percent,
which is all the top-k ranking looks at.

    python3 demos/01_token_pruning.py
"""

from dataclasses import replace

import numpy as np

from matevit import numerics as nx
from matevit.backbone import importance_scores
from matevit.data import SyntheticSpec, generate_synthetic
from matevit.model import MateVitConfig, fit
from matevit.profiling import break_even_keep, count_flops, identity_prune_flops, vit_tiny_config


def show_grid(values, fmt):
    for row in values:
        print("   " + " ".join(fmt(v) for v in row))


def main():
    cfg = MateVitConfig(seed=0)
    data = generate_synthetic(SyntheticSpec(n_images=16))
    print("training 40 epochs ...")
    model = fit(data, cfg, max_steps=40 * len(data) // cfg.schedule.batch_size)[0].model
    sample = data[0]
    side = cfg.backbone.image_size // cfg.backbone.patch_size
    (layer, k), = cfg.backbone.prune_schedule()

    with nx.no_grad():
        tokens = model.backbone.patch_embed(model.preprocess(sample.image))
        for block in model.backbone.blocks[:layer]:
            tokens = block(tokens)
        _, attn = model.backbone.blocks[layer].attn(tokens)
        _, record = model.backbone.encode(model.backbone.patch_embed(model.preprocess(sample.image)))

    scores = importance_scores(attn.data)[0]
    print(f"{side}x{side} tokens, prune at layer {layer} keeps k={k}")
    print(f"importance sums to {scores.sum():.4f} (one unit per token on average)")
    print("deviation from 1, in percent")
    show_grid(100 * (scores.reshape(side, side) - 1), lambda v: f"{v:+5.2f}")

    kept = np.zeros(side * side, bool)
    kept[record.kept_indices[0]] = True
    print("kept tokens (#) and dropped tokens (.)")
    show_grid(kept.reshape(side, side), lambda v: "#" if v else ".")

    print("\nFLOPs for the desk model as k varies (pruning architecture fixed):")
    for kk in (8, 16, k, 48, 63):
        c = replace(cfg, backbone=replace(cfg.backbone, keep_k=kk))
        print(f"   k={kk:3d}  {count_flops(c).total_flops / 1e6:8.2f} MFLOPs")
    print(f"   k={side * side:3d}  {identity_prune_flops(cfg) / 1e6:8.2f} MFLOPs (nothing dropped)")
    plain = replace(cfg, backbone=replace(cfg.backbone, prune_layers=[]))
    print(f"   plain ViT {count_flops(plain).total_flops / 1e6:6.2f} MFLOPs;"
          f" pruning beats it only for k <= {break_even_keep(cfg)}")

    tiny = vit_tiny_config(prune_layers=[6], keep_ratio=0.5)
    tiny_plain = replace(tiny, backbone=replace(tiny.backbone, prune_layers=[]))
    print("\nViT-Tiny-like backbone at 512x512:")
    print(f"   plain        {count_flops(tiny_plain, backbone_only=True).gflops:6.2f} GFLOPs")
    print(f"   half @ 6     {count_flops(tiny, backbone_only=True).gflops:6.2f} GFLOPs")


if __name__ == "__main__":
    main()
