import itertools
import json
import random
from collections import Counter

import pytest
from scipy.stats import chisquare

from duallab import microworld as mw


def tok(text):
    return [mw.TOKEN_ID[w] for w in text.split()]


# ------------------------------------------------------------------ vocabulary

def test_vocab_size_and_disjoint_ranges():
    assert mw.VOCAB_SIZE == 35
    assert len(mw.TEXT_IDS) == 15 and len(mw.VISION_IDS) == 13 and len(mw.SPECIALS) == 7
    assert not set(mw.TEXT_IDS) & set(mw.VISION_IDS)
    assert not (set(mw.TEXT_IDS) | set(mw.VISION_IDS)) & {mw.TOKEN_ID[s] for s in mw.SPECIALS}


def test_vocab_file_is_stable(tmp_path):
    mw.write_vocab(tmp_path / "a.json")
    mw.write_vocab(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert json.loads((tmp_path / "a.json").read_text()) == mw.TOKEN_ID


# ---------------------------------------------------------------------- scenes

def test_generate_scene_deterministic():
    assert mw.generate_scene(123) == mw.generate_scene(123)


def test_generated_scenes_valid():
    for s in range(500):
        scene = mw.generate_scene(s)
        assert 1 <= len(scene.objects) <= 3
        assert len(scene.cells) == 9


def test_object_count_histogram_uniform():
    counts = Counter(len(mw.generate_scene(s).objects) for s in range(10_000))
    for k in (1, 2, 3):
        assert abs(counts[k] / 10_000 - 1 / 3) < 0.03
    assert chisquare([counts[1], counts[2], counts[3]]).pvalue > 1e-3


def test_scene_rejects_too_many_objects():
    with pytest.raises(ValueError):
        mw.Scene((("red", "circle"),) * 4 + (None,) * 5)


# ---------------------------------------------------------------- tokenization

def test_tokenize_single_red_circle():
    scene = mw.Scene((("red", "circle"),) + (None,) * 8)
    assert mw.tokenize_image(scene) == [mw.TOKEN_ID["<red_circle>"]] + [mw.EMPTY] * 8


def test_tokenize_roundtrip_and_range():
    for s in range(1000):
        scene = mw.generate_scene(s)
        toks = mw.tokenize_image(scene)
        assert all(t in mw.VISION_RANGE for t in toks)
        assert mw.detokenize_image(toks) == scene


# -------------------------------------------------------------------- captions

def test_parse_simple_caption():
    assert mw.parse_caption(tok("red circle at top left")) == mw.Caption((("red", "circle", "top left"),))


def test_parse_failure_index():
    with pytest.raises(mw.ParseFailure) as e:
        mw.parse_caption(tok("red red circle at top left"))
    assert e.value.index == 1


@pytest.mark.parametrize("text, index", [
    ("red circle at", 3),
    ("red circle top left", 2),
    ("red circle at top left and", 6),
    ("red circle at top left blue", 5),
    ("red circle at middle center", 3),
])
def test_parser_is_strict(text, index):
    with pytest.raises(mw.ParseFailure) as e:
        mw.parse_caption(tok(text))
    assert e.value.index == index


def test_parse_rejects_vision_tokens_and_empty():
    with pytest.raises(mw.ParseFailure):
        mw.parse_caption([mw.EMPTY])
    with pytest.raises(mw.ParseFailure):
        mw.parse_caption([])


def test_render_parse_roundtrip_all_single_clauses():
    captions = [mw.Caption(((c, s, p),)) for c, s, p in itertools.product(mw.COLORS, mw.SHAPES, mw.POSITION_NAMES)]
    assert len(captions) == 108
    for cap in captions:
        assert mw.parse_caption(mw.render_caption(cap)) == cap


def test_render_joins_with_and():
    cap = mw.Caption((("red", "circle", "center"), ("blue", "square", "bottom right")))
    assert cap.text() == "red circle at center and blue square at bottom right"


# ---------------------------------------------------------------------- oracle

def _scene(objs):
    cells = [None] * 9
    for pos, color, shape in objs:
        cells[mw.POSITION_NAMES.index(pos)] = (color, shape)
    return mw.Scene(tuple(cells))


def test_oracle_score_perfect_two_objects():
    scene = _scene([("top left", "red", "circle"), ("center", "blue", "square")])
    s = mw.oracle_score(mw.render_caption(mw.oracle_caption(scene)), scene)
    assert s.f1 == 1.0 and s.hallucinated == 0


def test_oracle_score_half_match():
    scene = _scene([("top left", "red", "circle"), ("center", "green", "square")])
    s = mw.oracle_score(tok("red circle at top left and blue square at center"), scene)
    assert (s.precision, s.recall, s.f1, s.hallucinated) == (0.5, 0.5, 0.5, 1)


def test_oracle_score_unparseable():
    scene = mw.generate_scene(0)
    assert mw.oracle_score(tok("red"), scene) == mw.AlignmentScore(0.0, 0.0, 0.0, 0)


def test_oracle_caption_single_object():
    scene = mw.Scene((("red", "circle"),) + (None,) * 8)
    assert mw.oracle_caption(scene).text() == "red circle at top left"


def test_oracle_caption_perfect_and_raster_ordered():
    for s in range(1000):
        scene = mw.generate_scene(s)
        cap = mw.oracle_caption(scene)
        assert mw.oracle_score(mw.render_caption(cap), scene).f1 == 1.0
        idx = [mw.POSITION_NAMES.index(p) for _, _, p in cap.clauses]
        assert idx == sorted(idx)


def test_f1_is_one_iff_sets_equal():
    rng = random.Random(0)
    for _ in range(300):
        a, b = mw.generate_scene(rng), mw.generate_scene(rng)
        s = mw.score_triples(a.triples(), b.triples())
        assert (s.f1 == 1.0) == (a.triples() == b.triples())
        assert 0.0 <= s.f1 <= 1.0


# -------------------------------------------------------------------- datasets

SMALL = dict(n_pretrain=300, n_dsr_prompts=64, n_dsr_images=64, n_eval_prompts=64, n_eval_scenes=64)


def test_clean_pretraining_captions_are_perfect():
    ds = mw.make_datasets(mw.DataConfig(p_corrupt=0.0, **SMALL))
    assert all(mw.oracle_score(c, s).f1 == 1.0 for s, c in ds.pretrain_pairs)


def test_corruption_rate():
    ds = mw.make_datasets(mw.DataConfig(n_pretrain=10_000, p_corrupt=0.3, n_dsr_prompts=1, n_dsr_images=1,
                                        n_eval_prompts=1, n_eval_scenes=1))
    corrupted = sum(mw.oracle_score(c, s).f1 < 1.0 for s, c in ds.pretrain_pairs)
    assert abs(corrupted / 10_000 - 0.30) <= 0.02


def test_corruption_changes_color_or_position_only():
    rng = random.Random(1)
    for _ in range(200):
        scene = mw.generate_scene(rng)
        clean = mw.oracle_caption(scene).clauses
        bad = mw.corrupt_caption(scene, rng).clauses
        diffs = [(a, b) for a, b in zip(clean, bad) if a != b]
        assert len(diffs) == 1
        (a, b), = diffs
        assert a[1] == b[1]
        assert (a[0] != b[0]) != (a[2] != b[2])


def test_dsr_prompts_disjoint_from_eval():
    ds = mw.make_datasets(mw.DataConfig(n_pretrain=10, n_dsr_prompts=512, n_eval_prompts=128,
                                        n_dsr_images=512, n_eval_scenes=128))
    assert not {tuple(p) for p in ds.dsr_prompts} & {tuple(p) for p in ds.eval_prompts}
    assert not set(ds.dsr_images) & set(ds.eval_scenes)


def test_overlapping_seed_blocks_rejected():
    with pytest.raises(ValueError):
        mw.make_datasets(mw.DataConfig(seed_stride=0, **SMALL))


def test_dataset_files_byte_identical(tmp_path):
    cfg = mw.DataConfig(**SMALL)
    mw.save_datasets(mw.make_datasets(cfg), tmp_path / "a")
    mw.save_datasets(mw.make_datasets(cfg), tmp_path / "b")
    for name in list(mw.DATASET_FILES.values()) + [mw.VOCAB_FILE]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_dataset_jsonl_schema_and_reload(tmp_path):
    ds = mw.make_datasets(mw.DataConfig(**SMALL))
    mw.save_datasets(ds, tmp_path)
    first = json.loads((tmp_path / "pretrain.jsonl").read_text().splitlines()[0])
    assert set(first) == {"scene", "caption"} and len(first["scene"]) == 9
    assert set(json.loads((tmp_path / "dsr_prompts.jsonl").read_text().splitlines()[0])) == {"caption"}
    assert set(json.loads((tmp_path / "dsr_images.jsonl").read_text().splitlines()[0])) == {"scene"}
    back = mw.load_datasets(tmp_path)
    assert back.pretrain_pairs == ds.pretrain_pairs
    assert back.dsr_prompts == ds.dsr_prompts and back.eval_scenes == ds.eval_scenes
