"""Dual self-rewards: score an output by how well it reproduces its input.

A caption sampled for an image is rewarded with the mean log-likelihood of
that image given the caption; an image sampled for a prompt is rewarded with
the mean log-likelihood of the prompt given the image. The scorer may be the
policy itself (unified) or a frozen partner model (separate).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import microworld as mw
from .model import (
    Task,
    TaskSequence,
    Transformer,
    batched_avg_log_likelihood,
    condition_for,
    i2t_sequence,
    sample_targets,
    t2i_sequence,
)

DEGENERATE_EPS = 1e-9


class Direction(str, Enum):
    UNDERSTANDING = "understanding"
    GENERATION = "generation"


@dataclass(frozen=True)
class DualReward:
    value: float
    direction: Direction

    def __post_init__(self):
        if not math.isfinite(self.value) or self.value > 0:
            raise ValueError(f"dual reward must be finite and <= 0, got {self.value}")


@dataclass
class CandidateGroup:
    source: tuple[int, ...]  # prompt tokens (T2I) or image tokens (I2T)
    task: Task
    candidates: list[TaskSequence]
    rewards: list[float]

    def __post_init__(self):
        if len(self.candidates) != len(self.rewards) or len(self.candidates) < 2:
            raise ValueError("a group needs G >= 2 candidates with one reward each")

    @property
    def G(self) -> int:
        return len(self.candidates)


def reversed_sequence(task: Task, source, output) -> TaskSequence:
    """The sequence whose likelihood rewards ``output`` for ``source``.

    I2T outputs (captions) are scored as T2I ``caption -> source image``;
    T2I outputs (images) are scored as I2T ``image -> source prompt``.
    """
    if task is Task.I2T:
        return t2i_sequence(output, source)
    return i2t_sequence(output, source)


def dual_reward_understanding(scorer: Transformer, image, caption) -> DualReward:
    if not len(caption):
        raise ValueError("caption must be non-empty")
    v = batched_avg_log_likelihood(scorer, [t2i_sequence(caption, image)])[0]
    return DualReward(float(v), Direction.UNDERSTANDING)


def dual_reward_generation(scorer: Transformer, prompt, image) -> DualReward:
    if len(image) != mw.GRID_CELLS:
        raise ValueError(f"image must have {mw.GRID_CELLS} vision tokens")
    v = batched_avg_log_likelihood(scorer, [i2t_sequence(image, prompt)])[0]
    return DualReward(float(v), Direction.GENERATION)


def score_outputs(scorer: Transformer, task: Task, sources, outputs) -> np.ndarray:
    """Dual rewards for (source, output) pairs, one teacher-forced pass each."""
    return batched_avg_log_likelihood(
        scorer, [reversed_sequence(task, s, o) for s, o in zip(sources, outputs)]
    )


def candidate_rng(master_seed: int, input_id: int, i: int) -> np.random.Generator:
    return np.random.default_rng([master_seed, input_id, i])


def sample_groups(
    policy: Transformer,
    scorer: Transformer,
    sources: list,
    task: Task,
    G: int,
    temperature: float,
    master_seed: int,
    input_ids: list[int],
) -> list[CandidateGroup]:
    """Sample G outputs per source from ``policy``, score them with ``scorer``."""
    if G < 2:
        raise ValueError("group size must be at least 2")
    conds, rngs = [], []
    for src, iid in zip(sources, input_ids):
        cond = condition_for(task, src)
        for i in range(G):
            conds.append(cond)
            rngs.append(candidate_rng(master_seed, iid, i))
    seqs = sample_targets(policy, conds, task, temperature, rngs)
    flat_sources = [tuple(s) for s in sources for _ in range(G)]
    rewards = score_outputs(scorer, task, flat_sources, [s.payload for s in seqs])
    groups = []
    for k, src in enumerate(sources):
        sl = slice(k * G, (k + 1) * G)
        groups.append(CandidateGroup(tuple(src), task, seqs[sl], rewards[sl].tolist()))
    return groups


def sample_group(policy, scorer, source, task: Task, G: int, temperature: float,
                 master_seed: int, input_id: int = 0) -> CandidateGroup:
    return sample_groups(policy, scorer, [source], task, G, temperature, master_seed, [input_id])[0]


def select_preference_pair(group: CandidateGroup) -> tuple[int, int] | None:
    """Indices (best, worst) by reward, lowest index on ties; None if degenerate."""
    r = np.asarray(group.rewards)
    best, worst = int(np.argmax(r)), int(np.argmin(r))
    if r[best] - r[worst] < DEGENERATE_EPS:
        return None
    return best, worst
