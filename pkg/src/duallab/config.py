"""Flat dotted-key view of the experiment configuration.

A config file is a single JSON object such as ``{"train.method": "grpo",
"data.p_corrupt": 0.0}``. Keys mirror the nested dataclasses; unknown keys
are rejected so typos never silently fall back to defaults.
"""
from __future__ import annotations

import json
from dataclasses import fields, is_dataclass
from pathlib import Path

from . import microworld as mw
from .evaluation import EvalConfig
from .model import ModelConfig
from .optim import GRPOConfig, OptimConfig, SimPOConfig
from .trainer import ExperimentConfig, PretrainConfig, TrainConfig


class ConfigError(ValueError):
    """Bad key or value in a config file or override."""


DOCS: dict[str, str] = {
    "seed": "master seed; when set it overrides data.seed, pretrain.seed and train.master_seed",
    "data.n_pretrain": "number of (scene, caption) pretraining pairs",
    "data.n_dsr_prompts": "number of unpaired prompts for DSR generation training",
    "data.n_dsr_images": "number of unpaired scenes for DSR understanding training",
    "data.n_eval_prompts": "held-out prompts for generation eval",
    "data.n_eval_scenes": "held-out scenes for understanding eval",
    "data.p_corrupt": "probability that a pretraining caption has one clause corrupted",
    "data.seed": "dataset generation seed",
    "data.seed_stride": "width of each split's private seed block",
    "model.d_model": "transformer width",
    "model.n_layers": "number of transformer blocks",
    "model.n_heads": "attention heads per block",
    "model.d_ff": "hidden width of the MLP",
    "model.max_seq_len": "maximum sequence length (positions)",
    "model.init_scale": "std of the normal weight initialization",
    "pretrain.epochs": "supervised pretraining epochs",
    "pretrain.lr": "peak pretraining learning rate",
    "pretrain.batch_size": "sequences per pretraining step",
    "pretrain.warmup_steps": "linear warmup steps for pretraining",
    "pretrain.seed": "shuffle seed for pretraining",
    "train.strategy": "unified | separate | only_und | only_gen",
    "train.method": "simpo | grpo",
    "train.G": "candidates sampled per input",
    "train.temperature": "sampling temperature for candidates",
    "train.epochs": "DSR fine-tuning epochs",
    "train.batch_size": "inputs per micro-batch",
    "train.grad_accum": "micro-batches per optimizer update",
    "train.master_seed": "seed for model init, schedules and candidate sampling",
    "train.checkpoint_every": "save a checkpoint every N micro-steps (0 disables)",
    "train.log_wall_ms": "record wall-clock time per step in metrics (breaks byte-identical logs)",
    "train.simpo.beta": "SimPO margin scale",
    "train.simpo.gamma": "SimPO target margin",
    "train.grpo.eps_low": "lower clipping threshold",
    "train.grpo.eps_high": "upper clipping threshold",
    "train.grpo.kl_beta": "weight of the KL penalty",
    "train.optim.base_lr": "peak DSR learning rate",
    "train.optim.warmup_steps": "linear warmup updates",
    "train.optim.weight_decay": "decoupled weight decay",
    "train.optim.beta1": "Adam first-moment decay",
    "train.optim.beta2": "Adam second-moment decay",
    "train.optim.eps": "Adam denominator epsilon",
    "eval.samples": "samples per eval prompt or scene",
    "eval.corr_n": "captions sampled for the reward/oracle correlation",
    "eval.seed": "eval sampling seed",
    "eval.temperature": "eval sampling temperature",
}

# fixed by the vocabulary or derived from another key
HIDDEN = {"model.vocab_size", "model.tie_embeddings", "train.grpo.group_size"}


def _flatten(obj, prefix: str = "") -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(v):
            out.update(_flatten(v, key + "."))
        elif key not in HIDDEN:
            out[key] = v
    return out


def defaults() -> dict:
    return {"seed": None, **_flatten(ExperimentConfig())}


def to_flat(cfg: ExperimentConfig, seed: int | None = None) -> dict:
    return {"seed": seed, **_flatten(cfg)}


def parse_value(key: str, raw: str):
    """Convert a command-line string to the type of ``key``'s default."""
    default = defaults()[key]
    if key == "seed" or isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key} expects an integer, got {raw!r}") from None
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes"):
            return True
        if low in ("0", "false", "no"):
            return False
        raise ConfigError(f"{key} expects true/false, got {raw!r}")
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key} expects a number, got {raw!r}") from None
    return raw


def _check_type(key: str, value):
    default = defaults()[key]
    if value is None and key == "seed":
        return None
    if key == "seed" or (isinstance(default, int) and not isinstance(default, bool)):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
    elif isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects a boolean, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        value = float(value)
    elif not isinstance(value, str):
        raise ConfigError(f"{key} expects a string, got {value!r}")
    return value


def merge(*layers: dict) -> dict:
    """Defaults overlaid with each layer in turn; unknown keys raise."""
    flat = defaults()
    for layer in layers:
        for k, v in layer.items():
            if k not in flat:
                raise ConfigError(f"unknown config key {k!r}")
            flat[k] = _check_type(k, v)
    return flat


def load_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing config file: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def build(flat: dict) -> ExperimentConfig:
    """Nested config from a complete flat dict, applying the master seed."""
    f = dict(flat)
    if f.get("seed") is not None:
        f["data.seed"] = f["pretrain.seed"] = f["train.master_seed"] = f["seed"]

    def section(prefix: str) -> dict:
        n = len(prefix)
        return {k[n:]: v for k, v in f.items() if k.startswith(prefix) and "." not in k[n:]}

    try:
        return ExperimentConfig(
            data=mw.DataConfig(**section("data.")),
            model=ModelConfig(**section("model.")),
            pretrain=PretrainConfig(**section("pretrain.")),
            train=TrainConfig(
                **section("train."),
                simpo=SimPOConfig(**section("train.simpo.")),
                grpo=GRPOConfig(**section("train.grpo."), group_size=f["train.G"]),
                optim=OptimConfig(**section("train.optim.")),
            ),
            eval=EvalConfig(**section("eval.")),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None


def write_effective(flat: dict, out_dir) -> Path:
    path = Path(out_dir) / "effective_config.json"
    path.write_text(json.dumps(flat, indent=2, sort_keys=True) + "\n")
    return path

