"""Multi-gate mixture of experts with noisy top-m gating and balancing losses.

One gate per task scores every token against a shared pool of experts.
Only the ``m`` best-scoring experts run on a token; their outputs are mixed
with the softmax of the surviving gate logits. During training each sample
goes through its own task's gate and Gaussian noise scaled by
``softplus(x @ W_noise)`` perturbs the logits; at inference the noise is off
and every gate runs on every token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .layers import FeedForward, Module, param
from .numerics import Tensor


@dataclass
class GateConfig:
    n_experts: int = 4
    m: int = 2
    noise_enabled_in_training: bool = True
    w_importance: float = 0.1
    w_load: float = 0.1
    # expert hidden width; None reuses the backbone FFN width
    expert_hidden: int | None = None

    def __post_init__(self):
        if not 1 <= self.m <= self.n_experts:
            raise ValueError(f"m={self.m} outside [1, n_experts={self.n_experts}]")
        if self.w_importance < 0 or self.w_load < 0:
            raise ValueError("balancing loss weights must be >= 0")


@dataclass
class RoutingDecision:
    """Per-token experts in rank order and their mixture weights, both ``(T, m)``."""

    expert_indices: np.ndarray
    weights: np.ndarray


class Gate(Module):
    def __init__(self, dim: int, n_experts: int, rng, dtype=np.float32):
        self.w_g = param(nx.trunc_normal(rng, (dim, n_experts), dtype=dtype))
        self.w_noise = param(nx.trunc_normal(rng, (dim, n_experts), dtype=dtype))


def noisy_gate_logits(x: Tensor, gate: Gate, training: bool, rng=None, return_parts: bool = False):
    """Gate logits ``x @ W_g``, plus ``Normal() * softplus(x @ W_noise)`` when training.

    With ``return_parts`` also returns the clean logits and the noise scale.
    """
    clean = nx.matmul(x, gate.w_g)
    scale = nx.softplus(nx.matmul(x, gate.w_noise))
    if training:
        if rng is None:
            raise ValueError("training-mode gate noise needs an rng")
        noise = rng.standard_normal(clean.shape).astype(clean.dtype)
        h = clean + scale * noise
    else:
        h = clean
    return (h, clean, scale) if return_parts else h


def top_m_indices(h, m: int) -> np.ndarray:
    """``(..., m)`` indices of the largest entries, best first; ties go to the lower index."""
    h = h.data if isinstance(h, Tensor) else np.asarray(h)
    n = h.shape[-1]
    if not 1 <= m <= n:
        raise ValueError(f"m={m} outside [1, {n}]")
    return np.argsort(-h, axis=-1, kind="stable")[..., :m]


def top_m_softmax(h, m: int) -> Tensor:
    """Softmax over the top ``m`` logits of each row; every other entry is exactly 0."""
    h = h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=np.float64))
    idx = top_m_indices(h, m)
    mask = np.full(h.shape, -np.inf, dtype=h.dtype)
    np.put_along_axis(mask, idx, 0.0, axis=-1)
    return nx.softmax_rows(h + mask)


def _cv_squared(v: Tensor) -> Tensor:
    mu = v.mean()
    var = nx.square(v - mu).mean()
    return var / nx.square(mu)


def importance_loss(gates: Tensor, w: float) -> Tensor:
    """``w * CV(sum of gate values per expert)^2`` with the population std."""
    if gates.shape[0] < 1:
        raise ValueError("importance_loss needs at least one token")
    if w == 0 or gates.shape[-1] == 1:
        return Tensor(np.zeros((), dtype=gates.dtype))
    return _cv_squared(gates.sum(axis=0)) * w


def load_loss(h_clean: Tensor, h_noisy: Tensor, noise_scale: Tensor, m: int, w: float) -> Tensor:
    """``w * CV(load)^2`` with the smooth load estimator.

    For each token and expert, the probability that the expert stays in the
    top ``m`` if its own noise were redrawn is
    ``Phi((clean_i - threshold_i) / scale_i)``, where the threshold is the
    m-th largest noisy logit among the other experts. Load sums this over
    tokens.
    """
    if np.any(noise_scale.data <= 0):
        raise ValueError("load estimator undefined for a non-positive noise scale")
    n = h_clean.shape[-1]
    if not 1 <= m <= n:
        raise ValueError(f"m={m} outside [1, {n}]")
    if w == 0 or n == 1 or m == n:
        return Tensor(np.zeros((), dtype=h_clean.dtype))
    order = top_m_indices(h_noisy, m + 1)
    in_top = np.zeros(h_noisy.shape, dtype=h_clean.dtype)
    np.put_along_axis(in_top, order[:, :m], 1.0, axis=-1)
    # expert inside the top m: competitor is the (m+1)-th value; outside: the m-th
    thr_in = nx.take_along(h_noisy, order[:, m:m + 1], axis=-1)
    thr_out = nx.take_along(h_noisy, order[:, m - 1:m], axis=-1)
    p_in = nx.normal_cdf((h_clean - thr_in) / noise_scale)
    p_out = nx.normal_cdf((h_clean - thr_out) / noise_scale)
    prob = p_in * in_top + p_out * (1.0 - in_top)
    return _cv_squared(prob.sum(axis=0)) * w


@dataclass
class GateOutput:
    """Mixture for one gate over a flat token list, with its routing and balancing terms."""

    mixed: Tensor
    decision: RoutingDecision
    gates: Tensor
    importance: Tensor
    load: Tensor
    counts: np.ndarray


class MMoE(Module):
    def __init__(self, dim: int, n_tasks: int, cfg: GateConfig, hidden: int, rng, dtype=np.float32):
        self.cfg = cfg
        self.gates = [Gate(dim, cfg.n_experts, rng, dtype) for _ in range(n_tasks)]
        # fan-in scaled: expert outputs replace the tokens outright, so they need unit gain
        self.experts = [FeedForward(dim, hidden, rng, dtype, std=None) for _ in range(cfg.n_experts)]

    @property
    def n_tasks(self) -> int:
        return len(self.gates)

    def route(self, x: Tensor, task_id: int, training: bool, rng=None, noise: bool | None = None) -> GateOutput:
        """Mix a flat ``(T, C)`` token list through gate ``task_id``'s top-m experts."""
        if not 0 <= task_id < self.n_tasks:
            raise ValueError(f"task_id {task_id} outside [0, {self.n_tasks})")
        cfg = self.cfg
        use_noise = training and (cfg.noise_enabled_in_training if noise is None else noise)
        h, clean, scale = noisy_gate_logits(x, self.gates[task_id], use_noise, rng, return_parts=True)
        idx = top_m_indices(h, cfg.m)
        mask = np.full(h.shape, -np.inf, dtype=h.dtype)
        np.put_along_axis(mask, idx, 0.0, axis=-1)
        g = nx.softmax_rows(h + mask)
        t = x.shape[0]
        mixed = None
        counts = np.zeros(cfg.n_experts, dtype=np.int64)
        for e, expert in enumerate(self.experts):
            rows = np.nonzero((idx == e).any(axis=-1))[0]
            counts[e] = rows.size
            if rows.size == 0:
                continue
            y = expert(nx.gather_rows(x, rows)) * g[rows, e].reshape(-1, 1)
            y = nx.scatter_add_rows(y, rows, t)
            mixed = y if mixed is None else mixed + y
        decision = RoutingDecision(idx, np.take_along_axis(g.data, idx, axis=-1))
        # raw CV^2 terms; the model applies the weights in its total loss
        zero = Tensor(np.zeros((), dtype=x.dtype))
        imp = importance_loss(g, 1.0) if training and cfg.w_importance else zero
        load = load_loss(clean, h, scale, cfg.m, 1.0) if training and cfg.w_load else zero
        return GateOutput(mixed, decision, g, imp, load, counts)

    def dense_mixture(self, x: Tensor, gates: Tensor) -> Tensor:
        """Reference mixture running every expert on every token."""
        out = None
        for e, expert in enumerate(self.experts):
            y = expert(x) * gates[:, e].reshape(-1, 1)
            out = y if out is None else out + y
        return out

    def __call__(self, tokens: Tensor, task_ids, training: bool, rng=None):
        """Route ``(B, N, C)`` tokens, sample ``b`` through gate ``task_ids[b]``.

        Returns ``(mixed, outputs)`` where ``outputs`` maps each task present
        to its :class:`GateOutput` (over that task's samples, flattened).
        """
        b, n, c = tokens.shape
        task_ids = np.broadcast_to(np.asarray(task_ids, dtype=np.intp), (b,))
        pieces, order, outputs = [], [], {}
        for t in np.unique(task_ids):
            rows = np.nonzero(task_ids == t)[0]
            sub = tokens if rows.size == b else tokens[rows]
            out = self.route(sub.reshape(rows.size * n, c), int(t), training, rng)
            outputs[int(t)] = out
            pieces.append(out.mixed.reshape(rows.size, n, c))
            order.append(rows)
        if len(pieces) == 1:
            return pieces[0], outputs
        order = np.concatenate(order)
        return nx.concat(pieces, axis=0)[np.argsort(order)], outputs

    def forward_all(self, tokens: Tensor):
        """Inference: every gate on every token; one ``(B, N, C)`` mixture per task."""
        b, n, c = tokens.shape
        flat = tokens.reshape(b * n, c)
        outs = [self.route(flat, t, training=False) for t in range(self.n_tasks)]
        return [o.mixed.reshape(b, n, c) for o in outs], outs


def mmoe_forward(layer: MMoE, tokens: Tensor, task_id: int, training: bool, rng=None):
    """Mixture of ``(N, C)`` or ``(B, N, C)`` tokens for one task, with decisions and stats."""
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens.reshape(1, *tokens.shape)
    mixed, outputs = layer(tokens, task_id, training, rng)
    out = outputs[int(task_id)]
    if squeeze:
        mixed = mixed.reshape(mixed.shape[1:])
    return mixed, out.decision, out
