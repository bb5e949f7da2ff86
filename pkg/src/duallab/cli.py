"""Command-line entry point: ``duallab <subcommand> [options]``.

Every config key can be set in a JSON file (``--config``) or as a flag.
Flags use the dotted key (``--train.method grpo``); a bare leaf name
(``--method grpo``, ``--p_corrupt 0``) also works when it is unambiguous
for the subcommand. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import config as C
from . import microworld as mw
from .evaluation import emit_curves, emit_report, evaluate, generation_scores, read_report
from .model import Task, Transformer, load_checkpoint, save_checkpoint
from .rewards import sample_group
from .trainer import pretrain, run_experiment

log = logging.getLogger("duallab")

SUBCOMMANDS = {
    "gen-data": ("write the JSONL datasets and vocabulary", "data"),
    "pretrain": ("supervised pretraining on both task directions", "pretrain"),
    "train": ("dual self-reward fine-tuning with per-epoch evaluation", "train"),
    "eval": ("oracle evaluation of a checkpoint", "eval"),
    "demo": ("sample one candidate group and rank it by dual reward", "train"),
    "curves": ("collect per-epoch reports of a run into curves.csv", None),
}


class UsageError(Exception):
    pass


def flag_names(section: str | None) -> dict[str, list[str]]:
    """Flags accepted for each config key under a subcommand's primary section."""
    keys = list(C.DOCS)
    by_leaf: dict[str, list[str]] = {}
    for k in keys:
        by_leaf.setdefault(k.rsplit(".", 1)[-1], []).append(k)
    names = {k: [f"--{k}"] for k in keys}
    for leaf, owners in by_leaf.items():
        if leaf in C.DOCS:
            continue  # a top-level key already owns the bare name
        if len(owners) == 1:
            names[owners[0]].append(f"--{leaf}")
        elif section is not None:
            mine = [k for k in owners if k.startswith(section + ".")]
            if len(mine) == 1:
                names[mine[0]].append(f"--{leaf}")
    return names


def _add_config_flags(p: argparse.ArgumentParser, section: str | None) -> None:
    g = p.add_argument_group("config keys (JSON file keys; flags override the file)")
    defaults = C.defaults()
    for key, flags in flag_names(section).items():
        g.add_argument(*flags, dest=f"cfg:{key}", default=argparse.SUPPRESS, metavar="V",
                       help=f"{key}: {C.DOCS[key]} (default: {defaults[key]})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="duallab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_, section) in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=help_, description=help_,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--threads", type=int, default=1, help="BLAS thread cap; 1 gives bitwise reproducibility")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if name == "curves":
            p.add_argument("--run-dir", required=True, help="directory written by `train`")
            continue
        p.add_argument("--config", help="JSON file with flat dotted config keys")
        if name == "demo":
            p.add_argument("--out", help="optional directory for demo.json and effective_config.json")
            p.add_argument("--checkpoint", required=True, help="policy checkpoint")
            p.add_argument("--scorer", help="scorer checkpoint (default: the policy itself)")
            src = p.add_mutually_exclusive_group(required=True)
            src.add_argument("--prompt", help="caption text; samples images (generation)")
            src.add_argument("--scene-seed", type=int, help="scene seed; samples captions (understanding)")
        else:
            p.add_argument("--out", required=True, help="output directory")
        if name in ("pretrain", "train", "eval"):
            p.add_argument("--data", help="dataset directory from gen-data (default: generate in memory)")
        if name == "train":
            p.add_argument("--init", help="pretrained checkpoint (default: pretrain from scratch)")
        if name == "eval":
            p.add_argument("--checkpoint", required=True, help="checkpoint to evaluate")
            p.add_argument("--und-checkpoint", help="separate understanding model, if any")
        _add_config_flags(p, section)
    return parser


def resolve_config(args) -> tuple[dict, C.ExperimentConfig]:
    layers = []
    if getattr(args, "config", None):
        layers.append(C.load_file(args.config))
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:")}
    layers.append({k: C.parse_value(k, v) for k, v in overrides.items()})
    flat = C.merge(*layers)
    if flat["seed"] is None and os.environ.get("DUALLAB_SEED"):
        try:
            flat["seed"] = int(os.environ["DUALLAB_SEED"])
        except ValueError:
            raise C.ConfigError(f"DUALLAB_SEED must be an integer, got {os.environ['DUALLAB_SEED']!r}") from None
    return flat, C.build(flat)


def _out(args, flat) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    C.write_effective(flat, out)
    return out


def _datasets(args, cfg) -> mw.Datasets:
    if args.data:
        return mw.load_datasets(args.data)
    return mw.make_datasets(cfg.data)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2))


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, flat, cfg) -> None:
    out = _out(args, flat)
    ds = mw.make_datasets(cfg.data)
    paths = mw.save_datasets(ds, out)
    _print({"out": str(out), "files": sorted(p.name for p in paths.values()),
            "counts": {"pretrain": len(ds.pretrain_pairs), "dsr_prompts": len(ds.dsr_prompts),
                       "dsr_images": len(ds.dsr_images), "eval_prompts": len(ds.eval_prompts),
                       "eval_scenes": len(ds.eval_scenes)}})


def cmd_pretrain(args, flat, cfg) -> None:
    ds = _datasets(args, cfg)
    out = _out(args, flat)
    model = Transformer(cfg.model, seed=cfg.train.master_seed)
    history = pretrain(model, ds.pretrain_pairs, cfg.pretrain)
    (out / "checkpoints").mkdir(exist_ok=True)
    ckpt = out / "checkpoints" / "pretrained.ckpt"
    save_checkpoint(model, ckpt)
    lines = ["epoch,loss"] + [f"{i + 1},{v!r}" for i, v in enumerate(history)]
    (out / "pretrain_loss.csv").write_text("\n".join(lines) + "\n")
    _print({"checkpoint": str(ckpt), "final_loss": history[-1]})


def cmd_train(args, flat, cfg) -> None:
    ds = _datasets(args, cfg)
    base = load_checkpoint(args.init)[0] if args.init else None
    out = _out(args, flat)
    res = run_experiment(cfg, out, ds, base)
    b, f = res["baseline"], res["reports"][-1]
    _print({"run_id": res["run_id"], "checkpoints": {k: str(v) for k, v in res["checkpoints"].items()},
            "baseline": {"gen_f1": b.gen["f1_overall"], "und_f1": b.und["f1_overall"],
                         "halluc_rate": b.und["hallucination_rate"]},
            "final": {"gen_f1": f.gen["f1_overall"], "und_f1": f.und["f1_overall"],
                      "halluc_rate": f.und["hallucination_rate"]}})


def cmd_eval(args, flat, cfg) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    und = load_checkpoint(args.und_checkpoint)[0] if args.und_checkpoint else None
    ds = _datasets(args, cfg)
    out = _out(args, flat)
    e = cfg.eval
    report = evaluate(model, ds.eval_prompts, ds.eval_scenes, samples=e.samples, seed=e.seed, n_corr=e.corr_n,
                      checkpoint=str(args.checkpoint), und_model=und, temperature=e.temperature)
    emit_report(report, out / "report.json")
    _print(report.to_dict())


def _words_to_tokens(text: str) -> list[int]:
    bad = [w for w in text.split() if w not in mw.TEXT_WORDS]
    if bad:
        raise UsageError(f"--prompt contains words outside the vocabulary: {bad}")
    tokens = [mw.TOKEN_ID[w] for w in text.split()]
    if mw.try_parse(tokens) is None:
        raise UsageError(f"--prompt is not a well-formed caption: {text!r}")
    return tokens


def cmd_demo(args, flat, cfg) -> None:
    policy, _ = load_checkpoint(args.checkpoint)
    scorer = load_checkpoint(args.scorer)[0] if args.scorer else policy
    tc = cfg.train
    if args.prompt is not None:
        prompt = _words_to_tokens(args.prompt)
        group = sample_group(policy, scorer, tuple(prompt), Task.T2I, tc.G, tc.temperature, tc.master_seed)
        header = {"task": "t2i", "prompt": args.prompt}
    else:
        scene = mw.generate_scene(args.scene_seed)
        group = sample_group(policy, scorer, tuple(mw.tokenize_image(scene)), Task.I2T, tc.G, tc.temperature,
                             tc.master_seed)
        header = {"task": "i2t", "scene_seed": args.scene_seed, "scene": scene.ascii().splitlines()}
    order = sorted(range(group.G), key=lambda i: (-group.rewards[i], i))
    cands = []
    for rank, i in enumerate(order):
        payload = list(group.candidates[i].payload)
        entry = {"rank": rank, "index": i, "reward": group.rewards[i], "tokens": payload}
        if group.task is Task.T2I:
            entry["oracle_f1"] = generation_scores(group.source, payload)["f1_overall"]
            entry["grid"] = mw.render_grid(payload).splitlines()
        else:
            entry["oracle_f1"] = mw.oracle_score(payload, scene).f1
            entry["text"] = " ".join(mw.TOKENS[t] for t in payload)
        cands.append(entry)
    result = {**header, "G": group.G, "candidates": cands}
    if args.out:
        out = _out(args, flat)
        (out / "demo.json").write_text(json.dumps(result, indent=2) + "\n")
    _print(result)


_EPOCH_FILE = re.compile(r"epoch_(\d{3})\.json$")


def cmd_curves(args, flat=None, cfg=None) -> None:
    run_dir = Path(args.run_dir)
    rdir = run_dir / "reports"
    if not rdir.is_dir():
        raise FileNotFoundError(f"missing reports directory: {rdir}")
    found = {}
    for p in sorted(rdir.iterdir()):
        m = _EPOCH_FILE.search(p.name)
        if m:
            found[int(m.group(1))] = read_report(p)
    if not found:
        raise FileNotFoundError(f"no epoch reports in {rdir}")
    gaps = [e for e in range(1, max(found) + 1) if e not in found]
    if gaps:
        raise ValueError(f"missing epoch reports: {gaps}")
    runs = {r.checkpoint.split(":", 1)[0] for r in found.values()}
    if len(runs) > 1:
        raise ValueError(f"reports from different runs in one directory: {sorted(runs)}")
    reports = [found[e] for e in sorted(found)]
    emit_curves(reports, run_dir / "curves.csv")
    _print({"curves": str(run_dir / "curves.csv"), "rows": len(reports)})


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "demo": cmd_demo, "curves": cmd_curves}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        flat, cfg = (None, None) if args.command == "curves" else resolve_config(args)
    except (C.ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](args, flat, cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # reported, not re-raised: the exit code carries the failure
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
