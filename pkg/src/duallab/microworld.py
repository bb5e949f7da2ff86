"""A 3x3 grid world of colored shapes with exact text/image semantics.

Images are nine vision tokens in raster order. Captions follow a strict
grammar ``<color> <shape> at <position> [and ...]``. ``oracle_score``
compares the (color, shape, position) triples a caption asserts with the
ones a scene contains.
"""
from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from pathlib import Path

COLORS = ("red", "blue", "green", "yellow")
SHAPES = ("circle", "square", "triangle")
POSITIONS = (
    ("top", "left"), ("top", "center"), ("top", "right"),
    ("middle", "left"), ("center",), ("middle", "right"),
    ("bottom", "left"), ("bottom", "center"), ("bottom", "right"),
)
POSITION_NAMES = tuple(" ".join(p) for p in POSITIONS)
GRID_CELLS = 9
MAX_OBJECTS = 3

SPECIALS = ("PAD", "BOS_T2I", "BOS_I2T", "BOI", "EOI", "BOT", "EOS")
TEXT_WORDS = COLORS + SHAPES + ("at", "and") + ("top", "middle", "bottom", "left", "center", "right")
VISION_WORDS = tuple(f"<{c}_{s}>" for c in COLORS for s in SHAPES) + ("<empty>",)

TOKENS = SPECIALS + TEXT_WORDS + VISION_WORDS
TOKEN_ID = {t: i for i, t in enumerate(TOKENS)}
VOCAB_SIZE = len(TOKENS)

PAD, BOS_T2I, BOS_I2T, BOI, EOI, BOT, EOS = (TOKEN_ID[s] for s in SPECIALS)
TEXT_IDS = tuple(TOKEN_ID[w] for w in TEXT_WORDS)
VISION_IDS = tuple(TOKEN_ID[w] for w in VISION_WORDS)
EMPTY = TOKEN_ID["<empty>"]
TEXT_RANGE = range(TEXT_IDS[0], TEXT_IDS[-1] + 1)
VISION_RANGE = range(VISION_IDS[0], VISION_IDS[-1] + 1)


def vocab_hash() -> str:
    return hashlib.sha256(json.dumps(TOKEN_ID, sort_keys=False).encode()).hexdigest()[:16]


def write_vocab(path) -> None:
    Path(path).write_text(json.dumps(TOKEN_ID, indent=2) + "\n")


Triple = tuple[str, str, str]


@dataclass(frozen=True)
class Scene:
    """Nine cells in raster order; each is ``None`` or ``(color, shape)``."""

    cells: tuple

    def __post_init__(self):
        if len(self.cells) != GRID_CELLS:
            raise ValueError(f"scene needs {GRID_CELLS} cells, got {len(self.cells)}")
        n = sum(c is not None for c in self.cells)
        if not 1 <= n <= MAX_OBJECTS:
            raise ValueError(f"scene must hold 1..{MAX_OBJECTS} objects, got {n}")
        for c in self.cells:
            if c is not None and (c[0] not in COLORS or c[1] not in SHAPES):
                raise ValueError(f"bad object {c!r}")

    @property
    def objects(self) -> list[tuple[int, str, str]]:
        return [(i, c[0], c[1]) for i, c in enumerate(self.cells) if c is not None]

    def triples(self) -> set[Triple]:
        return {(color, shape, POSITION_NAMES[i]) for i, color, shape in self.objects}

    def ascii(self) -> str:
        return render_grid(tokenize_image(self))


@dataclass(frozen=True)
class Caption:
    clauses: tuple[Triple, ...]

    def text(self) -> str:
        return " and ".join(f"{c} {s} at {p}" for c, s, p in self.clauses)

    def triples(self) -> set[Triple]:
        return set(self.clauses)


class ParseFailure(ValueError):
    def __init__(self, index: int, reason: str):
        super().__init__(f"parse failure at token {index}: {reason}")
        self.index = index


@dataclass(frozen=True)
class AlignmentScore:
    precision: float
    recall: float
    f1: float
    hallucinated: int


# ------------------------------------------------------------------ scenes

def generate_scene(seed) -> Scene:
    """Random scene: 1-3 objects in distinct cells, colors and shapes uniform."""
    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    n = rng.randint(1, MAX_OBJECTS)
    cells: list = [None] * GRID_CELLS
    for pos in rng.sample(range(GRID_CELLS), n):
        cells[pos] = (rng.choice(COLORS), rng.choice(SHAPES))
    return Scene(tuple(cells))


def tokenize_image(scene: Scene) -> list[int]:
    return [EMPTY if c is None else TOKEN_ID[f"<{c[0]}_{c[1]}>"] for c in scene.cells]


def detokenize_image(tokens) -> Scene:
    """Inverse of ``tokenize_image``; raises ValueError on an invalid grid."""
    if len(tokens) != GRID_CELLS:
        raise ValueError(f"image needs {GRID_CELLS} tokens, got {len(tokens)}")
    cells = []
    for t in tokens:
        if t == EMPTY:
            cells.append(None)
        elif t in VISION_RANGE:
            color, shape = TOKENS[t][1:-1].split("_")
            cells.append((color, shape))
        else:
            raise ValueError(f"token {t} is not a vision token")
    return Scene(tuple(cells))


def image_triples(tokens) -> list[Triple]:
    """Triples for any 9-token grid, including empty or over-full ones."""
    out = []
    for i, t in enumerate(tokens):
        if t != EMPTY and t in VISION_RANGE:
            color, shape = TOKENS[t][1:-1].split("_")
            out.append((color, shape, POSITION_NAMES[i]))
    return out


def render_grid(tokens) -> str:
    """3x3 text grid for any image tokens; ``Rc`` is a red circle, ``..`` empty."""
    cells = []
    for t in tokens:
        if t == EMPTY:
            cells.append("..")
        elif t in VISION_RANGE:
            color, shape = TOKENS[t][1:-1].split("_")
            cells.append(color[0].upper() + shape[0])
        else:
            cells.append("??")
    return "\n".join(" ".join(cells[3 * r:3 * r + 3]) for r in range(3))


# ---------------------------------------------------------------- captions

def render_caption(caption: Caption) -> list[int]:
    return [TOKEN_ID[w] for w in caption.text().split()]


def parse_caption(tokens) -> Caption:
    """Strict parser for rendered captions; raises ParseFailure."""
    words = []
    for i, t in enumerate(tokens):
        if t not in TEXT_RANGE:
            raise ParseFailure(i, f"token {t} is not a text token")
        words.append(TOKENS[t])
    if not words:
        raise ParseFailure(0, "empty caption")
    clauses = []
    i = 0
    while True:
        if len(clauses) == MAX_OBJECTS:
            raise ParseFailure(i, "too many clauses")
        if i >= len(words) or words[i] not in COLORS:
            raise ParseFailure(i, "expected a color")
        if i + 1 >= len(words) or words[i + 1] not in SHAPES:
            raise ParseFailure(i + 1, "expected a shape")
        if i + 2 >= len(words) or words[i + 2] != "at":
            raise ParseFailure(i + 2, "expected 'at'")
        j = i + 3
        for pos in POSITIONS:
            if tuple(words[j:j + len(pos)]) == pos:
                break
        else:
            raise ParseFailure(j, "expected a position")
        clauses.append((words[i], words[i + 1], " ".join(pos)))
        i = j + len(pos)
        if i == len(words):
            return Caption(tuple(clauses))
        if words[i] != "and":
            raise ParseFailure(i, "expected 'and' or end of caption")
        i += 1


def try_parse(tokens) -> Caption | None:
    try:
        return parse_caption(tokens)
    except ParseFailure:
        return None


def oracle_caption(scene: Scene) -> Caption:
    return Caption(tuple((c, s, POSITION_NAMES[i]) for i, c, s in scene.objects))


def f1_from_counts(matched: int, n_asserted: int, n_truth: int) -> tuple[float, float, float]:
    p = matched / n_asserted if n_asserted else 0.0
    r = matched / n_truth if n_truth else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def score_triples(asserted: set[Triple], truth: set[Triple]) -> AlignmentScore:
    matched = len(asserted & truth)
    p, r, f1 = f1_from_counts(matched, len(asserted), len(truth))
    return AlignmentScore(p, r, f1, len(asserted - truth))


def oracle_score(caption_tokens, scene: Scene) -> AlignmentScore:
    caption = try_parse(caption_tokens)
    if caption is None:
        return AlignmentScore(0.0, 0.0, 0.0, 0)
    return score_triples(caption.triples(), scene.triples())


# ---------------------------------------------------------------- datasets

@dataclass
class DataConfig:
    n_pretrain: int = 2000
    n_dsr_prompts: int = 512
    n_dsr_images: int = 512
    n_eval_prompts: int = 128
    n_eval_scenes: int = 128
    p_corrupt: float = 0.3
    seed: int = 0
    # width of each split's private seed block
    seed_stride: int = 1_000_000

    def __post_init__(self):
        if min(self.n_pretrain, self.n_dsr_prompts, self.n_dsr_images, self.n_eval_prompts, self.n_eval_scenes) < 1:
            raise ValueError("every dataset split needs at least one item")
        if not 0.0 <= self.p_corrupt <= 1.0:
            raise ValueError("p_corrupt must lie in [0, 1]")
        if self.seed_stride < 1 or self.seed < 0:
            raise ValueError("seed must be non-negative and seed_stride positive")


SPLITS = ("pretrain", "dsr_prompts", "dsr_images", "eval_prompts", "eval_scenes")


def corrupt_caption(scene: Scene, rng: random.Random) -> Caption:
    """Oracle caption with one clause's color or position changed."""
    clauses = list(oracle_caption(scene).clauses)
    k = rng.randrange(len(clauses))
    color, shape, pos = clauses[k]
    if rng.random() < 0.5:
        color = rng.choice([c for c in COLORS if c != color])
    else:
        pos = rng.choice([p for p in POSITION_NAMES if p != pos])
    clauses[k] = (color, shape, pos)
    return Caption(tuple(clauses))


def _split_seeds(cfg: DataConfig) -> dict[str, range]:
    """Disjoint seed block per split."""
    ranges = {}
    for k, name in enumerate(SPLITS):
        start = cfg.seed * len(SPLITS) * cfg.seed_stride + k * cfg.seed_stride
        ranges[name] = range(start, start + cfg.seed_stride)
    names = list(ranges)
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            ra, rb = ranges[names[a]], ranges[names[b]]
            if ra.start < rb.stop and rb.start < ra.stop:
                raise ValueError(f"seed ranges of {names[a]!r} and {names[b]!r} overlap")
    return ranges


def _draw(seeds: range, n: int, make, exclude=frozenset()) -> list:
    out = []
    for s in seeds:
        if len(out) == n:
            return out
        item = make(s)
        key = tuple(item) if isinstance(item, list) else item
        if key not in exclude:
            out.append(item)
    if len(out) < n:
        raise ValueError(f"seed block exhausted after {len(out)} of {n} items")
    return out


@dataclass
class Datasets:
    pretrain_pairs: list[tuple[Scene, list[int]]]
    dsr_prompts: list[list[int]]
    dsr_images: list[Scene]
    eval_prompts: list[list[int]]
    eval_scenes: list[Scene]


def make_datasets(cfg: DataConfig) -> Datasets:
    """Generate all splits; the DSR prompt and image sets never share a seed."""
    if not 0.0 <= cfg.p_corrupt <= 1.0:
        raise ValueError("p_corrupt must lie in [0, 1]")
    seeds = _split_seeds(cfg)
    pairs = []
    for s in seeds["pretrain"][: cfg.n_pretrain]:
        rng = random.Random(s)
        scene = generate_scene(rng)
        cap = corrupt_caption(scene, rng) if rng.random() < cfg.p_corrupt else oracle_caption(scene)
        pairs.append((scene, render_caption(cap)))

    def prompt(s):
        return render_caption(oracle_caption(generate_scene(s)))

    eval_prompts = _draw(seeds["eval_prompts"], cfg.n_eval_prompts, prompt)
    eval_scenes = _draw(seeds["eval_scenes"], cfg.n_eval_scenes, generate_scene)
    # held-out: DSR inputs never repeat an eval item
    prompts = _draw(seeds["dsr_prompts"], cfg.n_dsr_prompts, prompt, {tuple(p) for p in eval_prompts})
    images = _draw(seeds["dsr_images"], cfg.n_dsr_images, generate_scene, set(eval_scenes))
    return Datasets(pairs, prompts, images, eval_prompts, eval_scenes)


DATASET_FILES = {
    "pretrain_pairs": "pretrain.jsonl",
    "dsr_prompts": "dsr_prompts.jsonl",
    "dsr_images": "dsr_images.jsonl",
    "eval_prompts": "eval_prompts.jsonl",
    "eval_scenes": "eval_scenes.jsonl",
}
VOCAB_FILE = "vocab.json"


def _dump_lines(path: Path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def save_datasets(ds: Datasets, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / v for k, v in DATASET_FILES.items()}
    _dump_lines(paths["pretrain_pairs"], ({"scene": tokenize_image(s), "caption": c} for s, c in ds.pretrain_pairs))
    _dump_lines(paths["dsr_prompts"], ({"caption": c} for c in ds.dsr_prompts))
    _dump_lines(paths["dsr_images"], ({"scene": tokenize_image(s)} for s in ds.dsr_images))
    _dump_lines(paths["eval_prompts"], ({"caption": c} for c in ds.eval_prompts))
    _dump_lines(paths["eval_scenes"], ({"scene": tokenize_image(s)} for s in ds.eval_scenes))
    write_vocab(out / VOCAB_FILE)
    return paths


def _load_lines(path: Path) -> list[dict]:
    if not path.exists():
        raise FileNotFoundError(f"missing dataset file: {path}")
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_datasets(data_dir) -> Datasets:
    d = Path(data_dir)
    vocab_path = d / VOCAB_FILE
    if not vocab_path.exists():
        raise FileNotFoundError(f"missing vocab file: {vocab_path}")
    if json.loads(vocab_path.read_text()) != TOKEN_ID:
        raise ValueError(f"vocabulary in {vocab_path} does not match this build")
    rows = {k: _load_lines(d / v) for k, v in DATASET_FILES.items()}
    return Datasets(
        pretrain_pairs=[(detokenize_image(r["scene"]), r["caption"]) for r in rows["pretrain_pairs"]],
        dsr_prompts=[r["caption"] for r in rows["dsr_prompts"]],
        dsr_images=[detokenize_image(r["scene"]) for r in rows["dsr_images"]],
        eval_prompts=[r["caption"] for r in rows["eval_prompts"]],
        eval_scenes=[detokenize_image(r["scene"]) for r in rows["eval_scenes"]],
    )
