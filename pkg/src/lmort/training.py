"""Contrastive fine-tuning of the tuner over cached frozen hidden states.

Each query is scored against its positives and explicit hard negatives
(optionally the other in-batch passages); the per-query softmax losses are
summed into one Adam update per batch. Backbone states are consumed strictly
read-only: the state cache is write-protected and the backward pass cannot
express gradients for it.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError, NumericError
from .hidden_states import LayeredStates, TrainExample
from .lmort_core import (
    TunerConfig,
    TunerParams,
    init_params,
    load_checkpoint,
    save_checkpoint,
    tuner_backward,
    tuner_forward,
)
from .space_analysis import RepVector

log = logging.getLogger(__name__)

DOT = "dot"
COSINE = "cosine"

OPTIMIZER_MAGIC = b"OPT1"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 5e-6
    epochs: int = 3
    negatives_per_query: int = 4
    use_in_batch_negatives: bool = False
    similarity: str = COSINE
    temperature: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: Optional[float] = None
    seed: int = 0
    dtype: str = "float32"  # float32 checkpoints resume bit-exactly

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.similarity not in (DOT, COSINE):
            raise ConfigError(f"similarity must be '{DOT}' or '{COSINE}'")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be 'float32' or 'float64'")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class OptimizerState:
    """Adam first/second moments mirroring the parameter tensors."""

    m: dict
    v: dict
    step: int = 0


def init_optimizer(params: TunerParams) -> OptimizerState:
    return OptimizerState(params.zeros_like(), params.zeros_like(), 0)


# ---------------------------------------------------------------------------
# Similarities and the contrastive objective
# ---------------------------------------------------------------------------


def similarity(x_q: RepVector, x_p: RepVector, kind: str = COSINE) -> float:
    """Dot product or cosine between two representation vectors."""
    s, _, _ = _similarity_and_grads(np.asarray(x_q.values, dtype=np.float64),
                                    np.asarray(x_p.values, dtype=np.float64), kind)
    return s


def _similarity_and_grads(xq: np.ndarray, xp: np.ndarray, kind: str):
    if xq.shape != xp.shape:
        raise DataError(f"similarity dimension mismatch: {xq.shape} vs {xp.shape}")
    if kind == DOT:
        return float(xq @ xp), xp.copy(), xq.copy()
    if kind != COSINE:
        raise ConfigError(f"unknown similarity kind {kind!r}")
    nq = float(np.linalg.norm(xq))
    np_ = float(np.linalg.norm(xp))
    if nq == 0.0 or np_ == 0.0:
        raise DataError("cosine similarity undefined for a zero vector")
    s = float(xq @ xp) / (nq * np_)
    dxq = xp / (nq * np_) - s * xq / (nq * nq)
    dxp = xq / (nq * np_) - s * xp / (np_ * np_)
    return s, dxq, dxp


def contrastive_loss(sim_pos: float, sim_negs: Sequence[float], temperature: float = 1.0):
    """Softmax cross-entropy of the positive against the negatives.

    loss = -log( e^{s+ / t} / (e^{s+ / t} + sum e^{s- / t}) ), computed via
    log-sum-exp. Returns (loss, dloss/dsim_pos, [dloss/dsim_neg ...]).
    """
    sims = np.array([sim_pos, *sim_negs], dtype=np.float64) / temperature
    if not np.isfinite(sims).all():
        raise NumericError(f"non-finite similarity among {sims.tolist()}")
    m = sims.max()
    exps = np.exp(sims - m)
    lse = m + math.log(exps.sum())
    loss = lse - sims[0]
    probs = exps / exps.sum()
    grad = probs.copy()
    grad[0] -= 1.0
    grad /= temperature
    return float(loss), float(grad[0]), [float(g) for g in grad[1:]]


# ---------------------------------------------------------------------------
# Cached frozen states
# ---------------------------------------------------------------------------


def build_state_cache(records: Sequence[LayeredStates], layer_a: int, layer_u: int,
                      dtype=np.float32) -> dict:
    """id -> (align states, uniform states, mask), all write-protected."""
    cache = {}
    for rec in records:
        for layer in (layer_a, layer_u):
            if layer not in rec.states:
                raise DataError(f"layer {layer} missing from record {rec.sequence_id}")
        h_a = rec.states[layer_a].astype(dtype)
        h_u = rec.states[layer_u].astype(dtype)
        mask = rec.attention_mask.copy()
        for arr in (h_a, h_u, mask):
            arr.flags.writeable = False
        cache[rec.sequence_id] = (h_a, h_u, mask)
    return cache


def _encode_with_tape(seq_id: str, cache: dict, params: TunerParams, config: TunerConfig):
    try:
        h_a, h_u, mask = cache[seq_id]
    except KeyError:
        raise DataError(f"no cached states for id {seq_id}") from None
    out, tape = tuner_forward(h_a, h_u, mask, params, config)
    pooled = out[tape.mask].mean(axis=0)
    return pooled, tape


# ---------------------------------------------------------------------------
# One optimizer step / the loop
# ---------------------------------------------------------------------------


def adam_step(params: TunerParams, grads: dict, state: OptimizerState,
              cfg: TrainConfig) -> tuple:
    """One bias-corrected Adam update; functional (inputs untouched)."""
    if cfg.grad_clip is not None:
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > cfg.grad_clip:
            factor = cfg.grad_clip / total
            grads = {k: g * factor for k, g in grads.items()}
    t = state.step + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.named():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        new_p[name] = (p - update).astype(p.dtype)
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    return TunerParams(params.d_llm, new_p), OptimizerState(new_m, new_v, t)


def train_step(batch: Sequence[TrainExample], cache: dict, params: TunerParams,
               opt_state: OptimizerState, tuner_config: TunerConfig,
               train_config: TrainConfig) -> tuple:
    """Encode the batch, sum per-query contrastive losses, apply one Adam update.

    Returns (new params, new optimizer state, batch loss). Cached states are
    never modified.
    """
    batch_passages = set()
    for ex in batch:
        batch_passages.update(ex.positive_ids)
        batch_passages.update(ex.negative_ids[: train_config.negatives_per_query])

    needed = set()
    groups = []  # (query_id, positive_id, [negative ids])
    for ex in batch:
        negs = list(ex.negative_ids[: train_config.negatives_per_query])
        if train_config.use_in_batch_negatives:
            extra = sorted(batch_passages - set(ex.positive_ids) - set(negs))
            negs.extend(extra)
        needed.add(ex.query_id)
        needed.update(ex.positive_ids)
        needed.update(negs)
        for pos in ex.positive_ids:
            groups.append((ex.query_id, pos, negs))

    encoded, tapes = {}, {}
    for seq_id in sorted(needed):
        encoded[seq_id], tapes[seq_id] = _encode_with_tape(seq_id, cache, params, tuner_config)

    vec_grads = {seq_id: np.zeros_like(vec) for seq_id, vec in encoded.items()}
    total_loss = 0.0
    for qid, pid, negs in groups:
        xq = encoded[qid].astype(np.float64)
        s_pos, dq_pos, dp_pos = _similarity_and_grads(xq, encoded[pid].astype(np.float64),
                                                      train_config.similarity)
        neg_grads = []
        s_negs = []
        for nid in negs:
            s, dq, dn = _similarity_and_grads(xq, encoded[nid].astype(np.float64),
                                              train_config.similarity)
            s_negs.append(s)
            neg_grads.append((dq, dn))
        loss, g_pos, g_negs = contrastive_loss(s_pos, s_negs, train_config.temperature)
        total_loss += loss
        vec_grads[qid] += g_pos * dq_pos
        vec_grads[pid] += g_pos * dp_pos
        for (dq, dn), g, nid in zip(neg_grads, g_negs, negs):
            vec_grads[qid] += g * dq
            vec_grads[nid] += g * dn

    if not math.isfinite(total_loss):
        raise NumericError(f"non-finite batch loss {total_loss} over queries "
                           f"{sorted({g[0] for g in groups})}")

    param_grads = params.zeros_like()
    for seq_id in sorted(needed):
        g_vec = vec_grads[seq_id]
        if not g_vec.any():
            continue
        for name, g in tuner_backward(tapes[seq_id], g_vec).items():
            param_grads[name] += g

    new_params, new_state = adam_step(params, param_grads, opt_state, train_config)
    return new_params, new_state, total_loss


def train_loop(examples: Sequence[TrainExample], records: Sequence[LayeredStates],
               layer_a: int, layer_u: int, tuner_config: TunerConfig,
               train_config: TrainConfig, checkpoint_dir=None, resume: bool = False):
    """Full training run with per-epoch checkpoints and a (step, loss) log.

    The final checkpoint is the one from the last training step; no
    selection against evaluation data. With resume=True the latest epoch
    checkpoint in checkpoint_dir is loaded and the remaining epochs run;
    in float32 mode this reproduces the uninterrupted run bit-exactly.
    """
    cache = build_state_cache(records, layer_a, layer_u, train_config.np_dtype)
    missing = set()
    for ex in examples:
        for seq_id in (ex.query_id, *ex.positive_ids, *ex.negative_ids):
            if seq_id not in cache:
                missing.add(seq_id)
    if missing:
        raise DataError(f"dump does not cover train ids: {sorted(missing)[:5]}...")
    d_llm = next(iter(cache.values()))[0].shape[1]

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    meta_base = {"layer_a": layer_a, "layer_u": layer_u}
    start_epoch, step = 0, 0
    loss_rows = []
    params, opt_state = None, None
    if resume:
        if ckpt_dir is None:
            raise ConfigError("resume requires a checkpoint directory")
        params, opt_state, start_epoch, step = _load_latest_epoch(ckpt_dir, train_config)
        loss_rows = [r for r in _read_loss_log(ckpt_dir / "loss_log.csv") if r[0] <= step]
    if params is None:
        params = init_params(tuner_config, d_llm, train_config.np_dtype)
        opt_state = init_optimizer(params)

    examples = list(examples)
    for epoch in range(start_epoch, train_config.epochs):
        order = np.random.default_rng((train_config.seed, epoch)).permutation(len(examples))
        for lo in range(0, len(examples), train_config.batch_size):
            batch = [examples[int(i)] for i in order[lo : lo + train_config.batch_size]]
            params, opt_state, loss = train_step(batch, cache, params, opt_state,
                                                 tuner_config, train_config)
            step += 1
            loss_rows.append((step, loss))
        if ckpt_dir is not None:
            tag = f"epoch_{epoch + 1}"
            meta = dict(meta_base, epoch=epoch + 1, step=step)
            save_checkpoint(ckpt_dir / f"{tag}.lmt", params, tuner_config, meta)
            save_optimizer(ckpt_dir / f"{tag}.opt", opt_state)
            _write_loss_log(loss_rows, ckpt_dir / "loss_log.csv")

    if ckpt_dir is not None:
        meta = dict(meta_base, epoch=train_config.epochs, step=step)
        save_checkpoint(ckpt_dir / "final.lmt", params, tuner_config, meta)
        save_optimizer(ckpt_dir / "final.opt", opt_state)
        _write_loss_log(loss_rows, ckpt_dir / "loss_log.csv")
    return params, loss_rows


def _load_latest_epoch(ckpt_dir: Path, train_config: TrainConfig):
    candidates = sorted(ckpt_dir.glob("epoch_*.lmt"),
                        key=lambda p: int(p.stem.split("_")[1]))
    if not candidates:
        return None, None, 0, 0
    latest = candidates[-1]
    params, _, meta = load_checkpoint(latest)
    params = params.astype(train_config.np_dtype)
    opt_state = load_optimizer(latest.with_suffix(".opt"), dtype=train_config.np_dtype)
    return params, opt_state, int(meta["epoch"]), int(meta["step"])


def _write_loss_log(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for step, loss in rows:
            fh.write(f"{step},{loss!r}\n")  # shortest exact round-trip form


def _read_loss_log(path) -> list:
    if not Path(path).exists():
        return []
    rows = []
    for ln in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        if ln:
            step_s, loss_s = ln.split(",")
            rows.append((int(step_s), float(loss_s)))
    return rows


# ---------------------------------------------------------------------------
# Optimizer sidecar (OPT1)
# ---------------------------------------------------------------------------


def save_optimizer(path, state: OptimizerState) -> int:
    header = json.dumps({"step": state.step}, sort_keys=True).encode("utf-8")
    parts = [OPTIMIZER_MAGIC, struct.pack("<I", len(header)), header]
    names = list(state.m)
    parts.append(struct.pack("<I", len(names)))
    for kind, tensors in (("m", state.m), ("v", state.v)):
        for name in names:
            t = tensors[name]
            nb = f"{kind}.{name}".encode("utf-8")
            parts.append(struct.pack("<H", len(nb)))
            parts.append(nb)
            parts.append(struct.pack("<B", t.ndim))
            parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
            parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    blob = b"".join(parts)
    Path(path).write_bytes(blob)
    return len(blob)


def load_optimizer(path, dtype=np.float32) -> OptimizerState:
    blob = Path(path).read_bytes()
    pos = 0

    def take(count):
        nonlocal pos
        if pos + count > len(blob):
            raise FormatError(f"{path}: unexpected end of optimizer state")
        out = blob[pos : pos + count]
        pos += count
        return out

    if take(4) != OPTIMIZER_MAGIC:
        raise FormatError(f"{path}: not an OPT1 file")
    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    m, v = {}, {}
    for _ in range(2 * count):
        (nlen,) = struct.unpack("<H", take(2))
        full = take(nlen).decode("utf-8")
        kind, name = full.split(".", 1)
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n_items = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * n_items), dtype="<f4").reshape(shape).astype(dtype)
        (m if kind == "m" else v)[name] = arr
    return OptimizerState(m, v, int(header["step"]))
