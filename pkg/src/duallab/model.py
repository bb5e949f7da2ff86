"""Decoder-only transformer shared by both task directions.

Sequence layouts::

    T2I: BOS_T2I <prompt> BOI <9 vision tokens> EOI     target = vision + EOI
    I2T: BOS_I2T <9 vision tokens> BOT <caption> EOS    target = caption + EOS

Batches are right-padded with PAD; causal attention means padding never
influences earlier positions, so per-token losses only need masking.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import microworld as mw
from .tensor import (
    Tensor,
    embedding,
    gelu,
    layer_norm,
    log_softmax,
    no_grad,
    pick,
    softmax_rows,
)

MAX_CAPTION_TOKENS = 20


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 48
    vocab_size: int = mw.VOCAB_SIZE
    tie_embeddings: bool = True
    init_scale: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.max_seq_len < 26:
            raise ValueError("max_seq_len must fit the longest T2I sequence (26 tokens)")
        if not self.tie_embeddings:
            raise ValueError("only tied embeddings are supported")


class Task(str, Enum):
    T2I = "t2i"
    I2T = "i2t"


@dataclass(frozen=True)
class TaskSequence:
    tokens: tuple[int, ...]
    condition_len: int
    task: Task

    @property
    def target_mask(self) -> list[bool]:
        return [i >= self.condition_len for i in range(len(self.tokens))]

    @property
    def condition(self) -> tuple[int, ...]:
        return self.tokens[: self.condition_len]

    @property
    def target(self) -> tuple[int, ...]:
        return self.tokens[self.condition_len:]

    @property
    def payload(self) -> tuple[int, ...]:
        """Target without its closing EOI/EOS."""
        return self.tokens[self.condition_len:-1]


def t2i_condition(prompt) -> tuple[int, ...]:
    return (mw.BOS_T2I, *prompt, mw.BOI)


def i2t_condition(image) -> tuple[int, ...]:
    return (mw.BOS_I2T, *image, mw.BOT)


def t2i_sequence(prompt, image) -> TaskSequence:
    if len(image) != mw.GRID_CELLS:
        raise ValueError(f"image must have {mw.GRID_CELLS} tokens")
    cond = t2i_condition(prompt)
    return TaskSequence((*cond, *image, mw.EOI), len(cond), Task.T2I)


def i2t_sequence(image, caption) -> TaskSequence:
    if len(image) != mw.GRID_CELLS:
        raise ValueError(f"image must have {mw.GRID_CELLS} tokens")
    cond = i2t_condition(image)
    return TaskSequence((*cond, *caption, mw.EOS), len(cond), Task.I2T)


def condition_for(task: Task, source) -> tuple[int, ...]:
    return t2i_condition(source) if task is Task.T2I else i2t_condition(source)


# ---------------------------------------------------------------- transformer

class Transformer:
    """Pre-norm GPT with learned positions and tied input/output embeddings."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.params = self._init_params(np.random.default_rng(seed))
        self._masks: dict[int, Tensor] = {}

    def _init_params(self, rng) -> dict[str, Tensor]:
        c = self.config
        s = c.init_scale

        def normal(*shape):
            return Tensor(rng.normal(0.0, s, size=shape), requires_grad=True)

        def const(v, n):
            return Tensor(np.full(n, v, dtype=np.float64), requires_grad=True)

        p = {"tok_emb": normal(c.vocab_size, c.d_model), "pos_emb": normal(c.max_seq_len, c.d_model)}
        for l in range(c.n_layers):
            p[f"h{l}.ln1.g"] = const(1.0, c.d_model)
            p[f"h{l}.ln1.b"] = const(0.0, c.d_model)
            for name in ("q", "k", "v", "o"):
                p[f"h{l}.attn.w{name}"] = normal(c.d_model, c.d_model)
                # a key bias shifts every score in a row equally and softmax cancels it
                if name != "k":
                    p[f"h{l}.attn.b{name}"] = const(0.0, c.d_model)
            p[f"h{l}.ln2.g"] = const(1.0, c.d_model)
            p[f"h{l}.ln2.b"] = const(0.0, c.d_model)
            p[f"h{l}.mlp.w1"] = normal(c.d_model, c.d_ff)
            p[f"h{l}.mlp.b1"] = const(0.0, c.d_ff)
            p[f"h{l}.mlp.w2"] = normal(c.d_ff, c.d_model)
            p[f"h{l}.mlp.b2"] = const(0.0, c.d_model)
        p["lnf.g"] = const(1.0, c.d_model)
        p["lnf.b"] = const(0.0, c.d_model)
        return p

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def clone(self) -> Transformer:
        other = Transformer.__new__(Transformer)
        other.config = ModelConfig(**asdict(self.config))
        other.params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        other._masks = {}
        return other

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def _causal_mask(self, T: int) -> Tensor:
        if T not in self._masks:
            m = np.triu(np.full((T, T), -np.inf), k=1)
            self._masks[T] = Tensor(m)
        return self._masks[T]

    def forward(self, tokens) -> Tensor:
        """Logits of shape (B, T, V); ``logits[:, t]`` predicts token t+1."""
        tokens = np.asarray(tokens, dtype=np.int64)
        squeeze = tokens.ndim == 1
        tokens = np.atleast_2d(tokens)
        c, p = self.config, self.params
        B, T = tokens.shape
        if T > c.max_seq_len:
            raise ValueError(f"sequence length {T} exceeds max_seq_len {c.max_seq_len}")
        H, dh = c.n_heads, c.d_model // c.n_heads
        x = embedding(p["tok_emb"], tokens) + p["pos_emb"][:T]
        mask = self._causal_mask(T)
        scale = 1.0 / math.sqrt(dh)

        def linear(h, w, b=None):
            y = h.reshape(B * T, h.shape[-1]) @ p[w]
            if b is not None:
                y = y + p[b]
            return y.reshape(B, T, p[w].shape[1])

        def heads(h):
            return h.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        for l in range(c.n_layers):
            h = layer_norm(x, p[f"h{l}.ln1.g"], p[f"h{l}.ln1.b"])
            q = heads(linear(h, f"h{l}.attn.wq", f"h{l}.attn.bq"))
            k = heads(linear(h, f"h{l}.attn.wk"))
            v = heads(linear(h, f"h{l}.attn.wv", f"h{l}.attn.bv"))
            att = softmax_rows((q @ k.transpose(0, 1, 3, 2)) * scale + mask)
            y = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, c.d_model)
            x = x + linear(y, f"h{l}.attn.wo", f"h{l}.attn.bo")
            h = layer_norm(x, p[f"h{l}.ln2.g"], p[f"h{l}.ln2.b"])
            x = x + linear(gelu(linear(h, f"h{l}.mlp.w1", f"h{l}.mlp.b1")), f"h{l}.mlp.w2", f"h{l}.mlp.b2")
        x = layer_norm(x, p["lnf.g"], p["lnf.b"])
        logits = (x.reshape(B * T, c.d_model) @ p["tok_emb"].transpose()).reshape(B, T, c.vocab_size)
        return logits[0] if squeeze else logits


def forward_logits(model: Transformer, tokens) -> Tensor:
    return model.forward(tokens)


# ------------------------------------------------------------- likelihoods

def pad_batch(seqs: list[TaskSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Right-padded token matrix and next-token target mask.

    ``mask[b, t]`` is True when ``tokens[b, t + 1]`` is a target token.
    """
    L = max(len(s.tokens) for s in seqs)
    tokens = np.full((len(seqs), L), mw.PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), L - 1), dtype=bool)
    for b, s in enumerate(seqs):
        if s.condition_len >= len(s.tokens):
            raise ValueError("sequence has an empty target")
        if s.condition_len < 1:
            raise ValueError("sequence needs at least one condition token")
        tokens[b, : len(s.tokens)] = s.tokens
        mask[b, s.condition_len - 1: len(s.tokens) - 1] = True
    return tokens, mask


def token_logprobs(model: Transformer, seqs: list[TaskSequence]) -> tuple[Tensor, np.ndarray]:
    """Log-probabilities of every next token, shape (B, L-1), plus the target mask."""
    tokens, mask = pad_batch(seqs)
    logits = model.forward(tokens)[:, :-1]
    logp = pick(log_softmax(logits), tokens[:, 1:])
    return logp, mask


def avg_log_likelihoods(model: Transformer, seqs: list[TaskSequence]) -> Tensor:
    """Mean target log-probability per sequence, shape (B,); differentiable."""
    logp, mask = token_logprobs(model, seqs)
    m = mask.astype(np.float64)
    return (logp * m).sum(axis=1) * (1.0 / m.sum(axis=1))


def avg_log_likelihood(model: Transformer, seq: TaskSequence) -> float:
    with no_grad():
        return avg_log_likelihoods(model, [seq]).item()


def batched_avg_log_likelihood(model: Transformer, seqs: list[TaskSequence], chunk: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(seqs), chunk):
            out.append(avg_log_likelihoods(model, seqs[i:i + chunk]).data)
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------- sampling

def _legal_mask(task: Task, vocab_size: int) -> np.ndarray:
    legal = np.zeros(vocab_size, dtype=bool)
    if task is Task.T2I:
        legal[list(mw.VISION_IDS)] = True
    else:
        legal[list(mw.TEXT_IDS)] = True
        legal[mw.EOS] = True
    return legal


def _draw(logits: np.ndarray, legal: np.ndarray, temperature: float, uniforms: np.ndarray) -> np.ndarray:
    z = np.where(legal, logits / temperature, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    cdf = np.cumsum(p, axis=-1)
    idx = (cdf < uniforms[:, None]).sum(axis=-1)
    last_legal = np.flatnonzero(legal)[-1]
    idx = np.minimum(idx, last_legal)
    # guard against a zero-probability legal slot at the cdf edge
    bad = ~legal[idx] | (p[np.arange(len(idx)), idx] == 0)
    if bad.any():
        idx[bad] = np.argmax(p[bad], axis=-1)
    return idx


def sample_targets(
    model: Transformer,
    conditions: list[tuple[int, ...]],
    task: Task,
    temperature: float,
    rngs: list[np.random.Generator],
) -> list[TaskSequence]:
    """Ancestral sampling, one independent generator per row.

    T2I rows get exactly nine vision tokens and a structural EOI. I2T rows
    stop at EOS or after MAX_CAPTION_TOKENS caption tokens (EOS appended).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if len(conditions) != len(rngs):
        raise ValueError("need one generator per condition")
    out: list[TaskSequence | None] = [None] * len(conditions)
    by_len: dict[int, list[int]] = {}
    for i, c in enumerate(conditions):
        by_len.setdefault(len(c), []).append(i)
    legal = _legal_mask(task, model.config.vocab_size)
    for n_cond, rows in sorted(by_len.items()):
        seqs = np.array([conditions[i] for i in rows], dtype=np.int64)
        active = np.arange(len(rows))
        finished: dict[int, list[int]] = {}
        steps = mw.GRID_CELLS if task is Task.T2I else MAX_CAPTION_TOKENS
        gen = np.zeros((len(rows), 0), dtype=np.int64)
        for _ in range(steps):
            ctx = np.concatenate([seqs[active], gen[active]], axis=1)
            with no_grad():
                logits = model.forward(ctx).data[:, -1]
            u = np.array([rngs[rows[a]].random() for a in active])
            nxt = np.full(len(rows), mw.PAD, dtype=np.int64)
            nxt[active] = _draw(logits, legal, temperature, u)
            gen = np.concatenate([gen, nxt[:, None]], axis=1)
            if task is Task.I2T:
                done = active[nxt[active] == mw.EOS]
                for a in done:
                    finished[a] = gen[a, :-1].tolist()
                active = active[nxt[active] != mw.EOS]
                if not len(active):
                    break
        for a in range(len(rows)):
            cond = conditions[rows[a]]
            if task is Task.T2I:
                target = (*gen[a].tolist(), mw.EOI)
            else:
                caption = finished.get(a, gen[a].tolist())
                target = (*caption, mw.EOS)
            out[rows[a]] = TaskSequence((*cond, *target), n_cond, task)
    return out


def sample_target(model: Transformer, condition, task: Task, temperature: float, rng) -> TaskSequence:
    return sample_targets(model, [tuple(condition)], task, temperature, [rng])[0]


def greedy_target(model: Transformer, condition, task: Task) -> TaskSequence:
    """Argmax decoding under the same segment constraints as sampling."""
    legal = _legal_mask(task, model.config.vocab_size)
    seq = list(condition)
    n_cond = len(seq)
    steps = mw.GRID_CELLS if task is Task.T2I else MAX_CAPTION_TOKENS
    for _ in range(steps):
        with no_grad():
            logits = model.forward(np.array(seq)).data[-1]
        tok = int(np.argmax(np.where(legal, logits, -np.inf)))
        if task is Task.I2T and tok == mw.EOS:
            break
        seq.append(tok)
    seq.append(mw.EOI if task is Task.T2I else mw.EOS)
    return TaskSequence(tuple(seq), n_cond, task)


# -------------------------------------------------------------- checkpoints

MAGIC = b"DSR1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Transformer, path, rng_state=None) -> None:
    header = {
        "tensors": {name: list(t.shape) for name, t in model.params.items()},
        "model_config": asdict(model.config),
        "vocab_hash": mw.vocab_hash(),
        "rng_state": rng_state,
    }
    hb = json.dumps(header, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in model.params.values())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hb)))
        fh.write(hb)
        fh.write(payload)


def load_checkpoint(path) -> tuple[Transformer, object]:
    """Returns the model and the stored rng state."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[12:12 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header") from e
    if header.get("vocab_hash") != mw.vocab_hash():
        raise CheckpointError(f"{path}: vocabulary hash mismatch")
    payload = raw[12 + hlen:]
    shapes = header["tensors"]
    expected = 8 * sum(int(np.prod(s)) for s in shapes.values())
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, header shapes need {expected}")
    model = Transformer.__new__(Transformer)
    model.config = ModelConfig(**header["model_config"])
    model._masks = {}
    reference = Transformer(model.config, seed=0).params
    if list(shapes) != list(reference) or any(tuple(shapes[k]) != reference[k].shape for k in shapes):
        raise CheckpointError(f"{path}: tensor layout does not match model_config")
    model.params = {}
    off = 0
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        model.params[name] = Tensor(arr, requires_grad=True)
        off += 8 * n
    return model, header.get("rng_state")
