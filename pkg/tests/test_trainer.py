import logging
import math

import numpy as np
import pytest

from duallab import microworld as mw
from duallab.evaluation import EvalConfig, read_report
from duallab.model import ModelConfig, Transformer, load_checkpoint, t2i_sequence
from duallab.optim import OptimConfig
from duallab.trainer import (
    METRIC_FIELDS,
    ExperimentConfig,
    MetricsLog,
    PretrainConfig,
    StageError,
    TrainConfig,
    _degenerate_warning,
    pair_sequences,
    pretrain,
    run_experiment,
    supervised_loss,
    train_dsr_separate,
    train_dsr_unified,
)

TINY_DATA = mw.DataConfig(n_pretrain=64, n_dsr_prompts=12, n_dsr_images=12, n_eval_prompts=6, n_eval_scenes=6)
TINY_MODEL = ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32)


def tiny_cfg(**train):
    kw = dict(G=3, epochs=2, batch_size=4, optim=OptimConfig(base_lr=1e-3, warmup_steps=1))
    kw.update(train)
    return ExperimentConfig(data=TINY_DATA, model=TINY_MODEL, pretrain=PretrainConfig(epochs=1, batch_size=32),
                            train=TrainConfig(**kw), eval=EvalConfig(samples=1, corr_n=50))


@pytest.fixture(scope="module")
def tiny_ds():
    return mw.make_datasets(TINY_DATA)


def fresh():
    return Transformer(TINY_MODEL, seed=0)


# ------------------------------------------------------------------ pretrain

def test_pair_sequences_cover_both_directions(tiny_ds):
    seqs = pair_sequences(tiny_ds.pretrain_pairs[:3])
    assert [s.task.value for s in seqs] == ["t2i", "i2t"] * 3


def test_initial_loss_near_log_vocab(tiny_ds):
    loss = supervised_loss(Transformer(ModelConfig(), seed=0), pair_sequences(tiny_ds.pretrain_pairs[:32])).item()
    assert abs(loss - math.log(35)) < 0.5


def test_loss_only_on_targets():
    # changing the condition changes the loss; the count of scored tokens stays the target length
    from duallab.model import pad_batch

    seq = t2i_sequence([mw.TOKEN_ID[w] for w in "red circle at center".split()], [mw.EMPTY] * 9)
    _, mask = pad_batch([seq])
    assert mask.sum() == 10


def test_pretrain_loss_trend_decreases(tiny_ds):
    hist = pretrain(fresh(), tiny_ds.pretrain_pairs, PretrainConfig(epochs=12, batch_size=16, warmup_steps=2))
    avg = np.convolve(hist, np.ones(5) / 5, mode="valid")
    assert (np.diff(avg) < 0).all()


def test_pretrain_rejects_empty():
    with pytest.raises(ValueError):
        pretrain(fresh(), [])


# ---------------------------------------------------------------- DSR loops

def test_unified_rows_alternate(tiny_ds):
    rows = MetricsLog()
    train_dsr_unified(fresh(), tiny_ds.dsr_prompts, tiny_ds.dsr_images, tiny_cfg(epochs=1).train, rows)
    assert [r["task"] for r in rows.rows] == ["t2i", "i2t"] * 3


@pytest.mark.parametrize("strategy, task", [("only_gen", "t2i"), ("only_und", "i2t")])
def test_single_task_strategies(tiny_ds, strategy, task):
    rows = MetricsLog()
    train_dsr_unified(fresh(), tiny_ds.dsr_prompts, tiny_ds.dsr_images, tiny_cfg(strategy=strategy, epochs=1).train,
                      rows)
    assert {r["task"] for r in rows.rows} == {task}
    assert len(rows.rows) == 3


def test_only_gen_needs_no_images(tiny_ds):
    train_dsr_unified(fresh(), tiny_ds.dsr_prompts, [], tiny_cfg(strategy="only_gen", epochs=1).train)
    with pytest.raises(ValueError):
        train_dsr_unified(fresh(), tiny_ds.dsr_prompts, [], tiny_cfg(epochs=1).train)


def test_separate_freezes_scorer(tiny_ds):
    gen, und = fresh(), fresh()
    seen = []

    def on_epoch(e):
        seen.append((e, gen.checksum(), und.checksum()))

    start = (0, gen.checksum(), und.checksum())
    rows = MetricsLog()
    train_dsr_separate(gen, und, tiny_ds.dsr_prompts, tiny_ds.dsr_images, tiny_cfg(epochs=3, strategy="separate").train,
                       rows, on_epoch)
    prev = start
    for e, g, u in seen:
        if e % 2 == 1:
            assert u == prev[2] and g != prev[1]
        else:
            assert g == prev[1] and u != prev[2]
        prev = (e, g, u)
    assert [(r["epoch"], r["task"]) for r in rows.rows] == [(1, "t2i")] * 3 + [(2, "i2t")] * 3 + [(3, "t2i")] * 3


def test_grpo_loop_runs(tiny_ds):
    rows = MetricsLog()
    m = fresh()
    before = m.checksum()
    train_dsr_unified(m, tiny_ds.dsr_prompts, tiny_ds.dsr_images, tiny_cfg(method="grpo", epochs=1).train, rows)
    assert m.checksum() != before
    assert all(np.isfinite(r["loss"]) for r in rows.rows)


def test_grad_accumulation_update_count(tiny_ds, monkeypatch):
    from duallab import optim

    calls = []
    orig = optim.AdamW.step

    def counting(self, grads=None):
        calls.append(1)
        return orig(self, grads)

    monkeypatch.setattr(optim.AdamW, "step", counting)
    train_dsr_unified(fresh(), tiny_ds.dsr_prompts, tiny_ds.dsr_images, tiny_cfg(epochs=1, grad_accum=4).train)
    assert len(calls) == 2  # six micro-batches, accumulation 4: one full update and one flushed at epoch end


# ------------------------------------------------------------- config / log

def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(strategy="both")
    with pytest.raises(ValueError):
        TrainConfig(method="ppo")
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    assert TrainConfig(G=5).grpo.group_size == 5


def test_metrics_log_strict_steps(tmp_path):
    log = MetricsLog()
    row = dict(epoch=1, task="t2i", mean_reward=-1.0, loss=0.5, lr=1e-4, degenerate_rate=0.0, wall_ms=0)
    log.append(step=1, **row)
    with pytest.raises(ValueError):
        log.append(step=1, **row)
    log.append(step=2, **row)
    log.write(tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == ",".join(METRIC_FIELDS)
    assert MetricsLog.read(tmp_path / "m.csv").to_csv() == log.to_csv()


def test_degenerate_warning_fires_on_first_epoch(caplog):
    log = MetricsLog()
    for s in range(4):
        log.append(step=s + 1, epoch=1, task="t2i", mean_reward=-1.0, loss=0.1, lr=1e-4, degenerate_rate=0.75,
                   wall_ms=0)
    with caplog.at_level(logging.WARNING):
        _degenerate_warning(log, 1)
    assert "DEGENERATE" in caplog.text


# ---------------------------------------------------------------- experiment

def test_run_experiment_outputs(tmp_path, tiny_ds):
    res = run_experiment(tiny_cfg(checkpoint_every=2), tmp_path, tiny_ds)
    assert (tmp_path / "metrics.csv").exists() and (tmp_path / "curves.csv").exists()
    assert (tmp_path / "reports" / "baseline.json").exists()
    assert [read_report(tmp_path / "reports" / f"epoch_{e:03d}.json").epoch for e in (1, 2)] == [1, 2]
    n_steps = len(res["metrics"].rows)
    assert sorted(p.name for p in (tmp_path / "checkpoints").glob("step_*.ckpt")) == [
        f"step_{s:05d}.ckpt" for s in range(2, n_steps + 1, 2)]
    load_checkpoint(tmp_path / "checkpoints" / "final.ckpt")
    assert len((tmp_path / "curves.csv").read_text().splitlines()) == 3


def test_run_experiment_deterministic(tmp_path, tiny_ds):
    run_experiment(tiny_cfg(), tmp_path / "a", tiny_ds)
    run_experiment(tiny_cfg(), tmp_path / "b", tiny_ds)
    for name in ("metrics.csv", "checkpoints/final.ckpt", "curves.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_ablation_sweep_emits_four_report_sets(tmp_path, tiny_ds):
    base = fresh()
    for s in ("unified", "separate", "only_und", "only_gen"):
        run_experiment(tiny_cfg(strategy=s, epochs=2), tmp_path / s, tiny_ds, base_model=base)
        assert len(list((tmp_path / s / "reports").glob("epoch_*.json"))) == 2
    assert (tmp_path / "separate" / "checkpoints" / "final_und.ckpt").exists()


def test_stage_error_tags_failure(tmp_path, tiny_ds):
    empty = mw.Datasets(tiny_ds.pretrain_pairs, [], [], tiny_ds.eval_prompts, tiny_ds.eval_scenes)
    with pytest.raises(StageError) as e:
        run_experiment(tiny_cfg(), tmp_path, empty, base_model=fresh())
    assert e.value.stage == "train"
