"""Supervised pretraining and dual self-reward fine-tuning loops."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import microworld as mw
from .evaluation import EvalConfig, EvalReport, emit_curves, emit_report, evaluate
from .model import (
    ModelConfig,
    Task,
    Transformer,
    i2t_sequence,
    pad_batch,
    save_checkpoint,
    t2i_sequence,
)
from .optim import AdamW, GRPOConfig, OptimConfig, SimPOConfig, grpo_loss, simpo_loss
from .rewards import sample_groups, select_preference_pair
from .tensor import backward, cross_entropy_per_token, no_grad

log = logging.getLogger(__name__)

STRATEGIES = ("unified", "separate", "only_und", "only_gen")
METHODS = ("simpo", "grpo")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage


# --------------------------------------------------------------- pretraining

@dataclass
class PretrainConfig:
    epochs: int = 20
    lr: float = 3e-3
    batch_size: int = 64
    warmup_steps: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("pretrain epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("pretrain lr must be positive")


def pair_sequences(pairs) -> list:
    """Both task directions for every (scene, caption) pair."""
    out = []
    for scene, caption in pairs:
        img = mw.tokenize_image(scene)
        out.append(t2i_sequence(caption, img))
        out.append(i2t_sequence(img, caption))
    return out


def supervised_loss(model: Transformer, seqs):
    """Mean next-token cross-entropy over all target tokens of the batch."""
    tokens, mask = pad_batch(seqs)
    ce = cross_entropy_per_token(model.forward(tokens)[:, :-1], tokens[:, 1:], mask)
    return ce.sum() * (1.0 / mask.sum())


def pretrain(model: Transformer, pairs, cfg: PretrainConfig | None = None, on_epoch=None) -> list[float]:
    """Teacher-forced training on both directions; returns the mean loss per epoch."""
    cfg = cfg or PretrainConfig()
    if not pairs:
        raise ValueError("pretrain needs at least one pair")
    seqs = pair_sequences(pairs)
    n_batches = math.ceil(len(seqs) / cfg.batch_size)
    opt = AdamW(model.parameters(), OptimConfig(base_lr=cfg.lr, warmup_steps=cfg.warmup_steps),
                total_steps=cfg.epochs * n_batches + 1)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(seqs))
        total = 0.0
        for b in range(n_batches):
            batch = [seqs[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            opt.zero_grad()
            loss = supervised_loss(model, batch)
            backward(loss)
            opt.step()
            total += loss.item()
        history.append(total / n_batches)
        log.info("pretrain epoch %d loss %.4f", epoch + 1, history[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, history[-1])
    return history


# ------------------------------------------------------------ DSR fine-tuning

@dataclass
class TrainConfig:
    strategy: str = "unified"
    method: str = "simpo"
    G: int = 8
    temperature: float = 1.0
    epochs: int = 5
    batch_size: int = 16
    grad_accum: int = 2
    master_seed: int = 0
    simpo: SimPOConfig = field(default_factory=SimPOConfig)
    grpo: GRPOConfig = field(default_factory=GRPOConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    checkpoint_every: int = 0
    log_wall_ms: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.epochs < 1 or self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("epochs, batch_size and grad_accum must be >= 1")
        if self.G < 2:
            raise ValueError("G must be >= 2")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        # the group size always follows G
        self.grpo = replace(self.grpo, group_size=self.G)


METRIC_FIELDS = ("step", "epoch", "task", "mean_reward", "loss", "lr", "degenerate_rate", "wall_ms")


class MetricsLog:
    """Append-only training log with strictly increasing steps."""

    def __init__(self):
        self.rows: list[dict] = []

    def append(self, **row) -> None:
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("metrics steps must increase strictly")
        self.rows.append({k: row[k] for k in METRIC_FIELDS})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in self.rows:
            w.writerow([r["step"], r["epoch"], r["task"], repr(float(r["mean_reward"])), repr(float(r["loss"])),
                        repr(float(r["lr"])), repr(float(r["degenerate_rate"])), r["wall_ms"]])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read(cls, path) -> MetricsLog:
        m = cls()
        with open(path) as fh:
            for r in csv.DictReader(fh):
                m.append(step=int(r["step"]), epoch=int(r["epoch"]), task=r["task"],
                         mean_reward=float(r["mean_reward"]), loss=float(r["loss"]), lr=float(r["lr"]),
                         degenerate_rate=float(r["degenerate_rate"]), wall_ms=int(r["wall_ms"]))
        return m


TASK_OFFSET = {Task.T2I: 0, Task.I2T: 5_000_000}


class _Learner:
    """One trainable model with its optimizer and accumulation counter."""

    def __init__(self, model: Transformer, cfg: TrainConfig, total_updates: int):
        self.model = model
        self.cfg = cfg
        self.opt = AdamW(model.parameters(), cfg.optim, total_updates)
        self.pending = 0
        self.ref: Transformer | None = None

    def snapshot_ref(self) -> None:
        self.ref = self.model.clone()

    def micro_step(self, scorer: Transformer, task: Task, sources, ids, epoch: int, rows: MetricsLog,
                   step: int) -> None:
        cfg = self.cfg
        t0 = time.perf_counter()
        groups = sample_groups(self.model, scorer, sources, task, cfg.G, cfg.temperature,
                               cfg.master_seed, ids)
        if cfg.method == "simpo":
            pairs, n_degen = [], 0
            for g in groups:
                sel = select_preference_pair(g)
                if sel is None:
                    n_degen += 1
                else:
                    pairs.append((g.candidates[sel[0]], g.candidates[sel[1]]))
            loss = simpo_loss(self.model, pairs, cfg.simpo) if pairs else None
        else:
            n_degen = sum(np.std(g.rewards) < 1e-9 for g in groups)
            loss = grpo_loss(self.model, self.ref, groups, cfg.grpo)
        lr = self.opt.current_lr()
        if loss is not None:
            backward(loss * (1.0 / cfg.grad_accum))
        self.pending += 1
        if self.pending == cfg.grad_accum:
            self.flush()
        wall = int((time.perf_counter() - t0) * 1000) if cfg.log_wall_ms else 0
        rows.append(step=step, epoch=epoch, task=task.value,
                    mean_reward=float(np.mean([r for g in groups for r in g.rewards])),
                    loss=float("nan") if loss is None else loss.item(), lr=lr,
                    degenerate_rate=n_degen / len(groups), wall_ms=wall)

    def flush(self) -> None:
        if self.pending:
            self.opt.step()
            self.opt.zero_grad()
            self.pending = 0


def _batches(items: list, order: np.ndarray, size: int):
    return [[int(i) for i in order[k:k + size]] for k in range(0, len(order), size)]


def _epoch_schedule(cfg: TrainConfig, n_prompts: int, n_images: int, epoch: int, tasks: tuple[Task, ...]):
    """Micro-batches for one epoch, alternating task types when both are active."""
    rng = np.random.default_rng([cfg.master_seed, 7, epoch])
    per_task = {}
    for task in (Task.T2I, Task.I2T):
        n = n_prompts if task is Task.T2I else n_images
        per_task[task] = _batches(list(range(n)), rng.permutation(n), cfg.batch_size)
    sched = []
    lists = [per_task[t] for t in tasks]
    for k in range(max(len(l) for l in lists)):
        for t, l in zip(tasks, lists):
            if k < len(l):
                sched.append((t, l[k]))
    return sched


def epoch_degenerate_rate(rows: MetricsLog, epoch: int) -> float:
    rates = [r["degenerate_rate"] for r in rows.rows if r["epoch"] == epoch]
    return float(np.mean(rates)) if rates else float("nan")


def _degenerate_warning(rows: MetricsLog, epoch: int) -> None:
    # Later epochs legitimately collapse as the policy sharpens; only the
    # first epoch tells whether the reward carries any signal at all.
    rate = epoch_degenerate_rate(rows, epoch)
    if epoch == 1 and rate >= 0.5:
        log.warning("DEGENERATE RATE %.2f in epoch 1: most groups carry no reward signal", rate)
    else:
        log.info("degenerate rate %.2f in epoch %d", rate, epoch)


def _sources(task: Task, prompts, images, idx):
    if task is Task.T2I:
        return [tuple(prompts[i]) for i in idx]
    return [tuple(mw.tokenize_image(images[i])) for i in idx]


def _ids(epoch: int, task: Task, idx) -> list[int]:
    return [epoch * 10_000_000 + TASK_OFFSET[task] + i for i in idx]


def train_dsr_unified(model: Transformer, prompts, images, cfg: TrainConfig, rows: MetricsLog | None = None,
                      on_epoch=None, on_step=None) -> Transformer:
    """One model samples, scores and learns; also serves only_und / only_gen."""
    tasks = {"unified": (Task.T2I, Task.I2T), "only_gen": (Task.T2I,), "only_und": (Task.I2T,)}[cfg.strategy]
    if Task.T2I in tasks and not prompts:
        raise ValueError("no DSR prompts")
    if Task.I2T in tasks and not images:
        raise ValueError("no DSR images")
    rows = rows if rows is not None else MetricsLog()
    n_micro = len(_epoch_schedule(cfg, len(prompts), len(images), 1, tasks))
    learner = _Learner(model, cfg, cfg.epochs * math.ceil(n_micro / cfg.grad_accum))
    step = rows.rows[-1]["step"] if rows.rows else 0
    for epoch in range(1, cfg.epochs + 1):
        if cfg.method == "grpo":
            learner.snapshot_ref()
        for task, idx in _epoch_schedule(cfg, len(prompts), len(images), epoch, tasks):
            step += 1
            learner.micro_step(model, task, _sources(task, prompts, images, idx), _ids(epoch, task, idx),
                               epoch, rows, step)
            if on_step is not None:
                on_step(step)
        learner.flush()
        _degenerate_warning(rows, epoch)
        if on_epoch is not None:
            on_epoch(epoch)
    return model


def train_dsr_separate(gen_model: Transformer, und_model: Transformer, prompts, images, cfg: TrainConfig,
                       rows: MetricsLog | None = None, on_epoch=None, on_step=None):
    """Odd epochs train ``gen_model`` scored by a frozen ``und_model``; even epochs the reverse."""
    if not prompts or not images:
        raise ValueError("separate strategy needs both prompts and images")
    rows = rows if rows is not None else MetricsLog()
    gen_epochs = (cfg.epochs + 1) // 2
    und_epochs = cfg.epochs // 2
    n_gen = math.ceil(len(prompts) / cfg.batch_size)
    n_und = math.ceil(len(images) / cfg.batch_size)
    learners = {
        Task.T2I: _Learner(gen_model, cfg, gen_epochs * math.ceil(n_gen / cfg.grad_accum)),
        Task.I2T: _Learner(und_model, cfg, und_epochs * math.ceil(n_und / cfg.grad_accum)),
    }
    step = rows.rows[-1]["step"] if rows.rows else 0
    for epoch in range(1, cfg.epochs + 1):
        task = Task.T2I if epoch % 2 == 1 else Task.I2T
        learner = learners[task]
        scorer = und_model if task is Task.T2I else gen_model
        if cfg.method == "grpo":
            learner.snapshot_ref()
        for _, idx in _epoch_schedule(cfg, len(prompts), len(images), epoch, (task,)):
            step += 1
            learner.micro_step(scorer, task, _sources(task, prompts, images, idx), _ids(epoch, task, idx),
                               epoch, rows, step)
            if on_step is not None:
                on_step(step)
        learner.flush()
        _degenerate_warning(rows, epoch)
        if on_epoch is not None:
            on_epoch(epoch)
    return gen_model, und_model


# ---------------------------------------------------------------- experiment

@dataclass
class ExperimentConfig:
    data: mw.DataConfig = field(default_factory=mw.DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def run_id(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _evaluate(cfg: ExperimentConfig, ds: mw.Datasets, model, und_model, run_id: str, epoch: int) -> EvalReport:
    e = cfg.eval
    return evaluate(model, ds.eval_prompts, ds.eval_scenes, samples=e.samples, seed=e.seed, n_corr=e.corr_n,
                    checkpoint=f"{run_id}:epoch{epoch}", epoch=epoch, und_model=und_model,
                    temperature=e.temperature)


def run_experiment(cfg: ExperimentConfig, out_dir, datasets: mw.Datasets | None = None,
                   base_model: Transformer | None = None) -> dict:
    """Pretrain (unless ``base_model`` is given), fine-tune, evaluate every epoch.

    Writes ``metrics.csv``, ``reports/baseline.json`` (before fine-tuning),
    ``reports/epoch_XXX.json``, ``curves.csv`` and checkpoints under
    ``out_dir``. Deterministic for a fixed config.
    """
    out = Path(out_dir)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    run_id = cfg.run_id()
    tc = cfg.train

    try:
        ds = datasets or mw.make_datasets(cfg.data)
    except Exception as e:
        raise StageError("data", e) from e

    try:
        if base_model is None:
            model = Transformer(cfg.model, seed=tc.master_seed)
            pretrain(model, ds.pretrain_pairs, cfg.pretrain)
        else:
            model = base_model.clone()
        save_checkpoint(model, out / "checkpoints" / "pretrained.ckpt")
    except Exception as e:
        raise StageError("pretrain", e) from e

    separate = tc.strategy == "separate"
    gen_model = model
    und_model = model.clone() if separate else model
    reports = []

    def do_eval(epoch: int) -> EvalReport:
        r = _evaluate(cfg, ds, gen_model, und_model if separate else None, run_id, epoch)
        name = "baseline.json" if epoch == 0 else f"epoch_{epoch:03d}.json"
        emit_report(r, out / "reports" / name)
        if epoch:
            reports.append(r)
        return r

    def on_step(step: int) -> None:
        if tc.checkpoint_every and step % tc.checkpoint_every == 0:
            save_checkpoint(gen_model, out / "checkpoints" / f"step_{step:05d}{'_gen' if separate else ''}.ckpt")
            if separate:
                save_checkpoint(und_model, out / "checkpoints" / f"step_{step:05d}_und.ckpt")

    try:
        baseline = do_eval(0)
    except Exception as e:
        raise StageError("eval", e) from e

    rows = MetricsLog()
    try:
        if separate:
            train_dsr_separate(gen_model, und_model, ds.dsr_prompts, ds.dsr_images, tc, rows, do_eval, on_step)
        else:
            train_dsr_unified(model, ds.dsr_prompts, ds.dsr_images, tc, rows, do_eval, on_step)
    except Exception as e:
        raise StageError("train", e) from e

    rows.write(out / "metrics.csv")
    finals = {}
    if separate:
        finals["gen"] = out / "checkpoints" / "final_gen.ckpt"
        finals["und"] = out / "checkpoints" / "final_und.ckpt"
        save_checkpoint(gen_model, finals["gen"])
        save_checkpoint(und_model, finals["und"])
    else:
        finals["model"] = out / "checkpoints" / "final.ckpt"
        save_checkpoint(model, finals["model"])
    emit_curves(reports, out / "curves.csv")
    return {"run_id": run_id, "checkpoints": finals, "metrics": rows, "baseline": baseline, "reports": reports,
            "gen_model": gen_model, "und_model": und_model}
