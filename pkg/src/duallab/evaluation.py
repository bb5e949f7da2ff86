"""Oracle-scored evaluation of both directions and report/curve files.

Generation sub-scores relax the triple match: ``color`` compares
(color, position) pairs, ``shape`` compares (shape, position) pairs and
``position`` compares occupied cells only. Each relaxation is a coarsening
of the full triple, so every sub-score is at least the overall F1.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import microworld as mw
from .model import Task, Transformer, i2t_condition, sample_targets, t2i_condition
from .rewards import score_outputs

log = logging.getLogger(__name__)

_PROJECTIONS = {
    "f1_overall": lambda t: t,
    "f1_color": lambda t: (t[0], t[2]),
    "f1_shape": lambda t: (t[1], t[2]),
    "f1_position": lambda t: (t[2],),
}


@dataclass
class EvalConfig:
    samples: int = 4
    corr_n: int = 200
    seed: int = 12345
    temperature: float = 1.0

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("eval samples must be >= 1")
        if self.corr_n < 50:
            raise ValueError("corr_n must be >= 50")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class EvalReport:
    gen: dict = field(default_factory=dict)
    und: dict = field(default_factory=dict)
    reward_oracle_spearman: float = float("nan")
    n_samples: int = 0
    seed: int = 0
    checkpoint: str = ""
    epoch: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls(**d)


def _f1(asserted: list, truth: list) -> float:
    matched = sum((Counter(asserted) & Counter(truth)).values())
    return mw.f1_from_counts(matched, len(asserted), len(truth))[2]


def generation_scores(prompt, image) -> dict[str, float]:
    """Per-sample scores with the prompt's clauses as truth and the image's objects as assertions."""
    caption = mw.try_parse(prompt)
    if caption is None:
        raise ValueError(f"eval prompt does not parse: {prompt}")
    truth = list(caption.clauses)
    asserted = mw.image_triples(image)
    return {k: _f1([proj(t) for t in asserted], [proj(t) for t in truth]) for k, proj in _PROJECTIONS.items()}


def score_generation(prompts, images_per_prompt) -> dict[str, float]:
    totals = Counter()
    n = 0
    for prompt, images in zip(prompts, images_per_prompt):
        for img in images:
            totals.update(generation_scores(prompt, img))
            n += 1
    if not n:
        raise ValueError("no generated images to score")
    return {k: totals[k] / n for k in _PROJECTIONS}


def score_understanding(scenes, captions_per_scene) -> dict[str, float]:
    f1_sum, n, halluc, asserted = 0.0, 0, 0, 0
    for scene, captions in zip(scenes, captions_per_scene):
        for cap in captions:
            s = mw.oracle_score(cap, scene)
            f1_sum += s.f1
            n += 1
            parsed = mw.try_parse(cap)
            if parsed is None:
                # an unparseable caption counts as one hallucinated assertion
                halluc += 1
                asserted += 1
            else:
                halluc += s.hallucinated
                asserted += len(parsed.triples())
    if not n:
        raise ValueError("no captions to score")
    return {"f1_overall": f1_sum / n, "hallucination_rate": halluc / asserted if asserted else 0.0}


def _eval_rngs(seed: int, n_items: int, per_item: int, stream: int) -> list[np.random.Generator]:
    return [np.random.default_rng([seed, stream, i, j]) for i in range(n_items) for j in range(per_item)]


def generate_images(model: Transformer, prompts, samples_per_prompt: int, seed: int, temperature: float = 1.0):
    conds = [t2i_condition(p) for p in prompts for _ in range(samples_per_prompt)]
    seqs = sample_targets(model, conds, Task.T2I, temperature, _eval_rngs(seed, len(prompts), samples_per_prompt, 1))
    k = samples_per_prompt
    return [[list(s.payload) for s in seqs[i * k:(i + 1) * k]] for i in range(len(prompts))]


def generate_captions(model: Transformer, scenes, samples_per_scene: int, seed: int, temperature: float = 1.0,
                      stream: int = 2):
    conds = [i2t_condition(mw.tokenize_image(s)) for s in scenes for _ in range(samples_per_scene)]
    seqs = sample_targets(model, conds, Task.I2T, temperature, _eval_rngs(seed, len(scenes), samples_per_scene, stream))
    k = samples_per_scene
    return [[list(s.payload) for s in seqs[i * k:(i + 1) * k]] for i in range(len(scenes))]


def eval_generation(model: Transformer, prompts, samples_per_prompt: int = 4, seed: int = 0,
                    temperature: float = 1.0) -> dict[str, float]:
    if not prompts:
        raise ValueError("eval_generation needs prompts")
    return score_generation(prompts, generate_images(model, prompts, samples_per_prompt, seed, temperature))


def eval_understanding(model: Transformer, scenes, samples_per_scene: int = 4, seed: int = 0,
                       temperature: float = 1.0) -> dict[str, float]:
    if not scenes:
        raise ValueError("eval_understanding needs scenes")
    return score_understanding(scenes, generate_captions(model, scenes, samples_per_scene, seed, temperature))


def spearman(x, y) -> float:
    """Spearman rho with average ranks for ties; NaN if either side is constant."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("spearman needs two equal-length samples of size >= 2")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0:
        return float("nan")
    return float((rx * ry).sum() / denom)


def reward_oracle_correlation(model: Transformer, scenes, n: int = 200, seed: int = 0,
                              scorer: Transformer | None = None, temperature: float = 1.0) -> float:
    """Spearman rho between understanding rewards and oracle F1 of sampled captions.

    Scenes are cycled when ``n`` exceeds their count.
    """
    if n < 50:
        raise ValueError("reward_oracle_correlation needs n >= 50")
    chosen = [scenes[i % len(scenes)] for i in range(n)]
    images = [mw.tokenize_image(s) for s in chosen]
    conds = [i2t_condition(img) for img in images]
    rngs = [np.random.default_rng([seed, 3, i]) for i in range(n)]
    seqs = sample_targets(model, conds, Task.I2T, temperature, rngs)
    captions = [s.payload for s in seqs]
    rewards = score_outputs(scorer or model, Task.I2T, images, captions)
    f1 = [mw.oracle_score(c, s).f1 for c, s in zip(captions, chosen)]
    if len(set(f1)) < 2:
        log.warning("reward_oracle_correlation: oracle scores are constant, rho undefined")
        return float("nan")
    return spearman(rewards, f1)


def evaluate(model: Transformer, eval_prompts, eval_scenes, *, samples: int = 4, seed: int = 0,
             n_corr: int = 200, checkpoint: str = "", epoch: int = 0, und_model: Transformer | None = None,
             temperature: float = 1.0) -> EvalReport:
    """Full report; ``und_model`` (separate strategy) supplies the understanding side."""
    und = und_model or model
    return EvalReport(
        gen=eval_generation(model, eval_prompts, samples, seed, temperature),
        und=eval_understanding(und, eval_scenes, samples, seed, temperature),
        reward_oracle_spearman=reward_oracle_correlation(und, eval_scenes, n_corr, seed, scorer=model,
                                                         temperature=temperature),
        n_samples=samples,
        seed=seed,
        checkpoint=checkpoint,
        epoch=epoch,
    )


# ------------------------------------------------------------------- files

CURVE_FIELDS = ("epoch", "gen_f1", "gen_color", "gen_shape", "gen_position", "und_f1", "halluc_rate")


def emit_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")


def read_json(path):
    """Parse a report-style JSON file, naming the path on failure."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing report: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: not valid JSON ({e})") from e


def read_report(path) -> EvalReport:
    return EvalReport.from_dict(read_json(path))


def emit_curves(reports: list[EvalReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for r in reports:
            w.writerow([
                r.epoch,
                *(f"{r.gen[k]:.6f}" for k in ("f1_overall", "f1_color", "f1_shape", "f1_position")),
                f"{r.und['f1_overall']:.6f}",
                f"{r.und['hallucination_rate']:.6f}",
            ])
