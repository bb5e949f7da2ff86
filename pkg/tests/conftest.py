import numpy as np
import pytest

from duallab.model import ModelConfig, Transformer


def tiny_model(seed=0, d_model=8, n_layers=1, init_scale=0.5, **kw):
    """Small model for gradient checks; the larger init keeps gradients well above FD roundoff."""
    cfg = ModelConfig(d_model=d_model, n_layers=n_layers, n_heads=2, d_ff=16, init_scale=init_scale, **kw)
    return Transformer(cfg, seed=seed)


def uniform_model():
    """Zero embeddings make every logit zero, so every next-token distribution is uniform."""
    m = tiny_model(seed=1)
    m.params["tok_emb"].data[:] = 0.0
    return m


@pytest.fixture
def small_model():
    return Transformer(ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def fitted():
    """A model briefly fit on clean pairs, plus the data it saw."""
    from duallab import microworld as mw
    from duallab.trainer import PretrainConfig, pretrain

    ds = mw.make_datasets(mw.DataConfig(n_pretrain=1000, p_corrupt=0.0, n_dsr_prompts=32, n_dsr_images=32,
                                        n_eval_prompts=64, n_eval_scenes=64, seed=11))
    m = Transformer(ModelConfig(), seed=11)
    pretrain(m, ds.pretrain_pairs, PretrainConfig(epochs=14, seed=11))
    return m, ds


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts at the end of the run, one line each."""
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
