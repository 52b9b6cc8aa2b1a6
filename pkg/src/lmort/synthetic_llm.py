"""Deterministic frozen toy causal transformer and synthetic retrieval tasks.

The emulator stands in for a large frozen backbone at desk scale: seeded
Gaussian weights (sigma 0.02), pre-layer-norm causal blocks, GELU feed-forward,
and hidden-state emission points at the embedding output (layer 0) and after
every block (layers 1..n_layers). It exposes no mutation API; all weight
arrays are write-protected.

encode_layers computes each position with vector ops whose inputs depend only
on that position's prefix, so appending tokens leaves earlier positions
bitwise unchanged (exact causality, not just approximate).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DataError
from .hidden_states import LayeredStates, Qrels, TrainExample

_INIT_SIGMA = 0.02


@dataclass(frozen=True)
class EmulatorConfig:
    seed: int = 0
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 8
    n_heads: int = 4
    max_seq_len: int = 64

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")

    @property
    def emission_points(self) -> int:
        """Hidden-state emission points: embedding output + one per block."""
        return self.n_layers + 1


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Emulator:
    """Frozen weights; built once from a config, never mutated."""

    config: EmulatorConfig
    tok_emb: np.ndarray = field(repr=False)
    pos_emb: np.ndarray = field(repr=False)
    blocks: tuple = field(repr=False)  # per block: dict of weight arrays


def build_emulator(config: EmulatorConfig) -> Emulator:
    """Deterministically materialize frozen weights from config.seed."""
    rng = np.random.default_rng(config.seed)
    d = config.d_model

    def gauss(*shape):
        return _freeze(rng.normal(0.0, _INIT_SIGMA, size=shape))

    tok_emb = gauss(config.vocab_size, d)
    pos_emb = gauss(config.max_seq_len, d)
    blocks = []
    for _ in range(config.n_layers):
        blocks.append(
            {
                "ln1_g": _freeze(np.ones(d)),
                "ln1_b": _freeze(np.zeros(d)),
                "wq": gauss(d, d),
                "wk": gauss(d, d),
                "wv": gauss(d, d),
                "wo": gauss(d, d),
                "ln2_g": _freeze(np.ones(d)),
                "ln2_b": _freeze(np.zeros(d)),
                "w_in": gauss(d, 4 * d),
                "w_out": gauss(4 * d, d),
            }
        )
    return Emulator(config, tok_emb, pos_emb, tuple(blocks))


def _layer_norm_row(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return g * (x - mu) / math.sqrt(var + eps) + b


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def encode_layers(emulator: Emulator, tokens: Sequence[int], layer_indices: Sequence[int],
                  sequence_id: str = "seq") -> LayeredStates:
    """Run the frozen forward pass and keep the requested emission points.

    State at position t is a function of tokens <= t only; the per-position
    arithmetic does not depend on total sequence length, so prefixes are
    bitwise invariant under appends.
    """
    cfg = emulator.config
    tokens = list(tokens)
    if not tokens:
        raise DataError("empty token sequence")
    if len(tokens) > cfg.max_seq_len:
        raise DataError(f"sequence length {len(tokens)} exceeds max_seq_len {cfg.max_seq_len}")
    for t in tokens:
        if not (0 <= t < cfg.vocab_size):
            raise DataError(f"token id {t} out of vocabulary (size {cfg.vocab_size})")
    wanted = sorted(set(int(l) for l in layer_indices))
    if not wanted:
        raise DataError("layer_indices must be non-empty")
    for l in wanted:
        if not (0 <= l < cfg.emission_points):
            raise DataError(f"layer index {l} outside [0, {cfg.emission_points})")

    n, d, h = len(tokens), cfg.d_model, cfg.n_heads
    dk = d // h
    scale = 1.0 / math.sqrt(dk)

    stored = {}
    x = [emulator.tok_emb[tok] + emulator.pos_emb[t] for t, tok in enumerate(tokens)]
    if 0 in wanted:
        stored[0] = np.stack(x)

    for li, blk in enumerate(emulator.blocks, start=1):
        normed = [_layer_norm_row(row, blk["ln1_g"], blk["ln1_b"]) for row in x]
        qs = [nr @ blk["wq"] for nr in normed]
        ks = [nr @ blk["wk"] for nr in normed]
        vs = [nr @ blk["wv"] for nr in normed]
        attn_out = []
        for t in range(n):
            q_heads = qs[t].reshape(h, dk)
            k_prefix = np.stack(ks[: t + 1]).reshape(t + 1, h, dk)
            v_prefix = np.stack(vs[: t + 1]).reshape(t + 1, h, dk)
            ctx = np.empty((h, dk))
            for hi in range(h):
                logits = k_prefix[:, hi, :] @ q_heads[hi] * scale
                logits -= logits.max()
                w = np.exp(logits)
                w /= w.sum()
                ctx[hi] = w @ v_prefix[:, hi, :]
            attn_out.append(ctx.reshape(d) @ blk["wo"])
        x = [x[t] + attn_out[t] for t in range(n)]
        normed = [_layer_norm_row(row, blk["ln2_g"], blk["ln2_b"]) for row in x]
        x = [x[t] + _gelu(normed[t] @ blk["w_in"]) @ blk["w_out"] for t in range(n)]
        if li in wanted:
            stored[li] = np.stack(x)

    states = {l: stored[l].astype(np.float32) for l in wanted}
    return LayeredStates(sequence_id, states, np.ones(n, dtype=bool))


# ---------------------------------------------------------------------------
# Synthetic retrieval task
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTask:
    """Desk-scale retrieval task: token-id queries/corpus, qrels, train examples."""

    queries: tuple  # of (id, tuple of token ids)
    corpus: tuple
    qrels: Qrels
    train_examples: tuple

    def __post_init__(self):
        known = {i for i, _ in self.queries} | {i for i, _ in self.corpus}
        corpus_ids = {i for i, _ in self.corpus}
        for qid, judged in self.qrels.items():
            if qid not in known:
                raise DataError(f"qrels references unknown query {qid}")
            for pid in judged:
                if pid not in corpus_ids:
                    raise DataError(f"qrels references unknown passage {pid}")
        for ex in self.train_examples:
            for pid in ex.positive_ids:
                if self.qrels.get(ex.query_id, {}).get(pid, 0) < 1:
                    raise DataError(f"positive {pid} of {ex.query_id} not judged relevant")


def make_synthetic_task(seed: int, n_queries: int, n_passages: int, positives_per_query: int,
                        negatives_per_query: int, noise_level: float, *,
                        alphabet_size: int = 4, min_len: int = 12, max_len: int = 24) -> SyntheticTask:
    """Generate a seeded task: random token passages, queries as noisy copies.

    Each query copies its positive passage(s) and substitutes each token with
    probability noise_level by a different symbol from the alphabet; negatives
    are sampled uniformly from the rest of the corpus.
    """
    if n_queries < 1 or n_passages < 1:
        raise ConfigError("n_queries and n_passages must be >= 1")
    if positives_per_query < 1:
        raise ConfigError("positives_per_query must be >= 1")
    if negatives_per_query < 0:
        raise ConfigError("negatives_per_query must be >= 0")
    if not (0.0 <= noise_level <= 1.0):
        raise ConfigError(f"noise_level must be in [0,1], got {noise_level}")
    if n_passages < positives_per_query + negatives_per_query:
        raise ConfigError(
            f"n_passages={n_passages} < positives+negatives={positives_per_query + negatives_per_query}"
        )
    if alphabet_size < 2 or min_len < 1 or max_len < min_len:
        raise ConfigError("need alphabet_size >= 2 and 1 <= min_len <= max_len")

    rng = np.random.default_rng(seed)
    width = max(len(str(n_passages - 1)), len(str(n_queries - 1)))
    corpus = []
    for i in range(n_passages):
        length = int(rng.integers(min_len, max_len + 1))
        toks = tuple(int(t) for t in rng.integers(0, alphabet_size, size=length))
        corpus.append((f"p{i:0{width}d}", toks))

    need = n_queries * positives_per_query
    if need <= n_passages:
        assigned = rng.choice(n_passages, size=need, replace=False)
    else:
        assigned = rng.integers(0, n_passages, size=need)

    queries, qrels, examples = [], {}, []
    for qi in range(n_queries):
        qid = f"q{qi:0{width}d}"
        pos_idx = [int(assigned[qi * positives_per_query + j]) for j in range(positives_per_query)]
        pos_ids = [corpus[i][0] for i in pos_idx]
        src = list(corpus[pos_idx[0]][1])
        for t in range(len(src)):
            if rng.random() < noise_level:
                repl = int(rng.integers(0, alphabet_size - 1))
                src[t] = repl if repl < src[t] else repl + 1  # substitution always changes the token
        queries.append((qid, tuple(src)))
        qrels[qid] = {pid: 1 for pid in pos_ids}
        pool = np.array([i for i in range(n_passages) if i not in pos_idx])
        neg_idx = rng.choice(pool, size=negatives_per_query, replace=False) if negatives_per_query else []
        neg_ids = [corpus[int(i)][0] for i in neg_idx]
        examples.append(TrainExample(qid, tuple(pos_ids), tuple(neg_ids)))

    return SyntheticTask(tuple(queries), tuple(corpus), qrels, tuple(examples))


def tokens_to_text(tokens: Sequence[int]) -> str:
    """Serialize a raw token-id sequence for the {id, text} JSONL interchange."""
    return " ".join(str(t) for t in tokens)


def text_to_tokens(text: str) -> tuple:
    try:
        return tuple(int(t) for t in text.split())
    except ValueError as exc:
        raise DataError(f"not a token-id string: {text!r}") from exc


def bytes_tokenize(text: str, max_len: int | None = None) -> tuple:
    """Byte-level tokenization over UTF-8 for real-text paths through the emulator."""
    ids = tuple(text.encode("utf-8"))
    if max_len is not None:
        ids = ids[:max_len]
    return ids
