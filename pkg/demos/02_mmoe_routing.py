"""Route one batch of tokens through the multi-gate mixture of experts.

Each task owns a gate; experts are shared. For every task we show how many
tokens picked each expert, a few tokens' top-m weights, and the two balancing
terms. A deliberately lopsided gate shows what the importance loss punishes.

    python3 demos/02_mmoe_routing.py
"""

import numpy as np

from matevit import numerics as nx
from matevit.moe import MMoE, GateConfig, importance_loss
from matevit.numerics import Tensor


def main():
    cfg = GateConfig(n_experts=4, m=2)
    rng = nx.make_rng(0)
    moe = MMoE(dim=32, n_tasks=2, cfg=cfg, hidden=64, rng=rng, dtype=np.float64)
    tokens = Tensor(rng.normal(size=(64, 32)))

    for task, name in enumerate(("object", "material")):
        out = moe.route(tokens, task, training=True, rng=rng)
        print(f"gate {name}: tokens per expert {out.counts.tolist()}")
        for t in range(3):
            picks = ", ".join(f"e{e}={w:.2f}" for e, w in zip(out.decision.expert_indices[t],
                                                             out.decision.weights[t]))
            print(f"   token {t}: {picks}")
        print(f"   importance CV^2 {float(out.importance.data):.4f}, load CV^2 {float(out.load.data):.4f}")
        dense = moe.dense_mixture(tokens, out.gates).data
        print(f"   sparse vs dense mixture max diff {np.abs(out.mixed.data - dense).max():.1e}")

    # every token sends all its weight to expert 0
    lopsided = Tensor(np.tile([1.0, 0.0, 0.0, 0.0], (64, 1)))
    uniform = Tensor(np.full((64, 4), 0.25))
    print(f"\nimportance loss, w=1: lopsided {float(importance_loss(lopsided, 1.0).data):.2f},"
          f" uniform {float(importance_loss(uniform, 1.0).data):.2f}")


if __name__ == "__main__":
    main()
