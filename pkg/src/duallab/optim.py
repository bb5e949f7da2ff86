"""Preference and policy-gradient objectives plus AdamW with a cosine schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import TaskSequence, Transformer, avg_log_likelihoods, token_logprobs
from .rewards import CandidateGroup
from .tensor import Tensor, clip, exp, log_sigmoid, minimum, no_grad


@dataclass
class SimPOConfig:
    beta: float = 2.0
    gamma: float = 0.5

    def __post_init__(self):
        if self.beta <= 0 or self.gamma < 0:
            raise ValueError("SimPO needs beta > 0 and gamma >= 0")


@dataclass
class GRPOConfig:
    eps_low: float = 0.2
    eps_high: float = 0.28
    kl_beta: float = 0.04
    group_size: int = 8

    def __post_init__(self):
        if not 0 < self.eps_low <= self.eps_high:
            raise ValueError("GRPO needs 0 < eps_low <= eps_high")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be non-negative")
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")


# -------------------------------------------------------------------- SimPO

def simpo_margins(avg_chosen: Tensor, avg_rejected: Tensor, cfg: SimPOConfig) -> Tensor:
    return (avg_chosen - avg_rejected) * cfg.beta - cfg.gamma


def simpo_loss(policy: Transformer, pairs: list[tuple[TaskSequence, TaskSequence]], cfg: SimPOConfig) -> Tensor:
    """Mean over pairs of ``-log sigmoid(beta*(avg_logp(Y+) - avg_logp(Y-)) - gamma)``.

    Chosen and rejected sequences share one batched forward pass.
    """
    if not pairs:
        raise ValueError("simpo_loss needs at least one pair")
    n = len(pairs)
    avg = avg_log_likelihoods(policy, [p[0] for p in pairs] + [p[1] for p in pairs])
    return -log_sigmoid(simpo_margins(avg[:n], avg[n:], cfg)).mean()


# --------------------------------------------------------------------- GRPO

def grpo_advantages(rewards) -> np.ndarray:
    """Group-standardized rewards with population std; zeros if the group is flat."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least two rewards")
    std = r.std()
    if std < 1e-9:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def importance_ratios(policy: Transformer, ref: Transformer, seq: TaskSequence) -> np.ndarray:
    with no_grad():
        lp, mask = token_logprobs(policy, [seq])
        lr_, _ = token_logprobs(ref, [seq])
    return np.exp(lp.data[0][mask[0]] - lr_.data[0][mask[0]])


def k3_kl(logp: np.ndarray, ref_logp: np.ndarray) -> np.ndarray:
    """Per-token ``rho - log rho - 1`` with ``rho = pi_ref / pi_theta``."""
    d = ref_logp - logp
    return np.exp(d) - d - 1.0


def clipped_surrogate(ratio: Tensor, adv, eps_low: float, eps_high: float) -> Tensor:
    return minimum(ratio * adv, clip(ratio, 1.0 - eps_low, 1.0 + eps_high) * adv)


def grpo_loss(policy: Transformer, ref: Transformer, groups: list[CandidateGroup], cfg: GRPOConfig) -> Tensor:
    """Negative clipped, KL-regularized GRPO objective.

    Each group's token terms are summed and divided by that group's total
    target length; the loss averages this over groups. Advantages and the
    reference log-probs are constants.
    """
    if not groups:
        raise ValueError("grpo_loss needs at least one group")
    seqs = [s for g in groups for s in g.candidates]
    adv = np.concatenate([grpo_advantages(g.rewards) for g in groups])
    logp, mask = token_logprobs(policy, seqs)
    with no_grad():
        ref_logp, _ = token_logprobs(ref, seqs)
    m = mask.astype(np.float64)
    log_ratio = (logp - ref_logp.data) * m
    ratio = exp(log_ratio)
    surr = clipped_surrogate(ratio, adv[:, None], cfg.eps_low, cfg.eps_high)
    # k3 with rho = exp(-log_ratio); zero on masked-out slots since log_ratio = 0 there
    kl = exp(-log_ratio) + log_ratio - 1.0
    per_row = ((surr - kl * cfg.kl_beta) * m).sum(axis=1)

    weights = np.zeros((len(groups), len(seqs)))
    start = 0
    for k, g in enumerate(groups):
        n_tok = m[start:start + g.G].sum()
        weights[k, start:start + g.G] = 1.0 / n_tok
        start += g.G
    per_group = Tensor(weights) @ per_row.reshape(len(seqs), 1)
    return -per_group.mean()


# -------------------------------------------------------------------- AdamW

def cosine_lr(step: int, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to 0 at ``total_steps``."""
    if total_steps <= warmup_steps:
        raise ValueError("total_steps must exceed warmup_steps")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return max(0.0, base_lr * 0.5 * (1.0 + math.cos(math.pi * progress)))


@dataclass
class OptimConfig:
    base_lr: float = 3e-4
    warmup_steps: int = 5
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdamW:
    """AdamW with bias correction; lr follows ``cosine_lr`` per update."""

    def __init__(self, params: list[Tensor], cfg: OptimConfig, total_steps: int):
        self.params = params
        self.cfg = cfg
        self.total_steps = max(total_steps, cfg.warmup_steps + 1)
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def current_lr(self) -> float:
        return cosine_lr(self.t + 1, self.cfg.warmup_steps, self.total_steps, self.cfg.base_lr)

    def step(self, grads: list[np.ndarray | None] | None = None) -> float:
        """Apply one update from ``grads`` (default: each param's ``.grad``)."""
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter required")
        c = self.cfg
        lr = self.current_lr()
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            if c.weight_decay:
                p.data -= lr * c.weight_decay * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
        return lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}
