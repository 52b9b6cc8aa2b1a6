"""Trainable retrieval tuner over two frozen backbone layers.

Each block applies, in post-norm residual order:
  1. self bi-attention over the running stream (block 1 reads the primary
     input layer, deeper blocks chain from the previous block's output),
  2. cross bi-attention whose keys/values come from the secondary input
     layer (the same frozen tensor at every block),
  3. a GELU feed-forward.
connection_mode picks which of the two input layers is primary (self) vs
secondary (cross): "a2u" means self over the alignment layer and cross into
the uniformity layer; "u2a" swaps them. An optional two-layer ReLU MLP
(shared between both streams) reduces the backbone width before the blocks.

The backward pass is fully analytic over a recorded tape and produces
gradients for tuner parameters only; gradients with respect to the frozen
input states are never emitted.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DataError, FormatError, NumericError
from .space_analysis import RepVector

A_TO_U = "a2u"
U_TO_A = "u2a"

CHECKPOINT_MAGIC = b"LMT1"

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class TunerConfig:
    n_blocks: int = 3
    d_model: int = 64
    n_heads: int = 4
    ffn_multiplier: int = 4
    connection_mode: str = A_TO_U
    reduction: Optional[tuple] = None  # (hidden_dim, out_dim)
    layer_norm_eps: float = 1e-5
    seed: int = 0
    use_cross: bool = True  # False drops the cross sub-layer (ablations)
    reattend_input: bool = False  # deeper blocks re-attend to the primary input

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ConfigError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.connection_mode not in (A_TO_U, U_TO_A):
            raise ConfigError(f"connection_mode must be '{A_TO_U}' or '{U_TO_A}'")
        if self.reduction is not None:
            hidden, out = self.reduction
            if hidden < 1 or out < 1:
                raise ConfigError(f"bad reduction dims {self.reduction}")
            object.__setattr__(self, "reduction", (int(hidden), int(out)))
        if self.block_width % self.n_heads != 0:
            raise ConfigError(
                f"block width {self.block_width} not divisible by n_heads={self.n_heads}"
            )
        if self.ffn_multiplier < 1:
            raise ConfigError("ffn_multiplier must be >= 1")
        if self.layer_norm_eps <= 0:
            raise ConfigError("layer_norm_eps must be positive")

    @property
    def block_width(self) -> int:
        """Width used by all block arithmetic: reduction output if configured."""
        return self.reduction[1] if self.reduction is not None else self.d_model


@dataclass
class TunerParams:
    """All trainable tensors, addressable by dotted names (stable order)."""

    d_llm: int
    tensors: dict  # name -> np.ndarray

    def named(self):
        return self.tensors.items()

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def clone(self) -> "TunerParams":
        return TunerParams(self.d_llm, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "TunerParams":
        return TunerParams(self.d_llm, {k: v.astype(dtype) for k, v in self.tensors.items()})

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    @property
    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


def _tensor_shapes(config: TunerConfig, d_llm: int) -> dict:
    """Canonical (name -> shape) map; also fixes serialization order."""
    if config.reduction is None and config.d_model != d_llm:
        raise ConfigError(
            f"without reduction, config d_model ({config.d_model}) must equal d_llm ({d_llm})"
        )
    d = config.block_width
    f = config.ffn_multiplier * d
    shapes = {}
    if config.reduction is not None:
        hidden, out = config.reduction
        shapes["reduction.w1"] = (d_llm, hidden)
        shapes["reduction.b1"] = (hidden,)
        shapes["reduction.w2"] = (hidden, out)
        shapes["reduction.b2"] = (out,)
    for i in range(config.n_blocks):
        p = f"blocks.{i}."
        for attn in ("self_attn",) + (("cross_attn",) if config.use_cross else ()):
            for w in ("wq", "wk", "wv", "wo"):
                shapes[p + f"{attn}.{w}"] = (d, d)
            for b in ("bq", "bk", "bv", "bo"):
                shapes[p + f"{attn}.{b}"] = (d,)
        shapes[p + "ffn.w_in"] = (d, f)
        shapes[p + "ffn.b_in"] = (f,)
        shapes[p + "ffn.w_out"] = (f, d)
        shapes[p + "ffn.b_out"] = (d,)
        norms = ("ln_self", "ln_cross", "ln_ffn") if config.use_cross else ("ln_self", "ln_ffn")
        for ln in norms:
            shapes[p + f"{ln}.gain"] = (d,)
            shapes[p + f"{ln}.bias"] = (d,)
    return shapes


def init_params(config: TunerConfig, d_llm: int, dtype=np.float64) -> TunerParams:
    """Xavier-uniform weights, zero biases, unit layer-norm gains; seed-deterministic."""
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in _tensor_shapes(config, d_llm).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("w"):
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
        elif leaf == "gain":
            tensors[name] = np.ones(shape, dtype=dtype)
        else:  # bias / b*
            tensors[name] = np.zeros(shape, dtype=dtype)
    return TunerParams(d_llm, tensors)


def count_params(config: TunerConfig, d_llm: int) -> int:
    """Closed-form trainable-scalar count; matches init_params allocation.

    With block width d, heads sharing the d x d projections (with biases),
    FFN multiplier F, and three layer norms per block:
        attn(d)  = 4 (d^2 + d)
        ffn(d)   = 2 F d^2 + F d + d
        block(d) = 2 attn(d) + ffn(d) + 3 * 2d      (one attn and 2 norms if cross is off)
        total    = L * block(d) [+ d_llm*h + h + h*o + o with reduction (h, o)]
    """
    d = config.block_width
    f = config.ffn_multiplier * d
    attn = 4 * (d * d + d)
    ffn = d * f + f + f * d + d
    ln = 2 * d
    if config.use_cross:
        block = 2 * attn + ffn + 3 * ln
    else:
        block = attn + ffn + 2 * ln
    total = config.n_blocks * block
    if config.reduction is not None:
        hidden, out = config.reduction
        total += d_llm * hidden + hidden + hidden * out + out
    return total


# ---------------------------------------------------------------------------
# Differentiable primitives (forward returns a cache for the analytic backward)
# ---------------------------------------------------------------------------


def _linear_fwd(x, w, b):
    return x @ w + b


def _linear_bwd(dy, x, w):
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def _layer_norm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return gain * xhat + bias, (xhat, inv)


def _layer_norm_bwd(dy, cache, gain):
    xhat, inv = cache
    dxhat = dy * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def _gelu_fwd(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _split_heads(x, n_heads):
    n, d = x.shape
    return x.reshape(n, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, n, dk = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dk)


def _attention_fwd(x_q, x_kv, key_mask, p: dict, n_heads: int):
    """Bidirectional multi-head attention; masked keys are excluded via -inf logits."""
    key_mask = np.asarray(key_mask, dtype=bool)
    if not key_mask.any():
        raise DataError("attention requires at least one unmasked key")
    q = _split_heads(_linear_fwd(x_q, p["wq"], p["bq"]), n_heads)
    k = _split_heads(_linear_fwd(x_kv, p["wk"], p["bk"]), n_heads)
    v = _split_heads(_linear_fwd(x_kv, p["wv"], p["bv"]), n_heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = (q @ k.transpose(0, 2, 1)) * scale
    logits[:, :, ~key_mask] = -np.inf
    logits -= logits.max(axis=-1, keepdims=True)
    expl = np.exp(logits)
    probs = expl / expl.sum(axis=-1, keepdims=True)
    ctx = _merge_heads(probs @ v)
    out = _linear_fwd(ctx, p["wo"], p["bo"])
    cache = (x_q, x_kv, q, k, v, probs, ctx, scale)
    return out, cache


def _attention_bwd(dout, cache, p: dict):
    x_q, x_kv, q, k, v, probs, ctx, scale = cache
    dctx, dwo, dbo = _linear_bwd(dout, ctx, p["wo"])
    n_heads = q.shape[0]
    dctx = _split_heads(dctx, n_heads)
    dprobs = dctx @ v.transpose(0, 2, 1)
    dv = probs.transpose(0, 2, 1) @ dctx
    # softmax rows; masked keys have probs == 0, so their logit grads vanish
    dlogits = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dq = (dlogits @ k) * scale
    dk = (dlogits.transpose(0, 2, 1) @ q) * scale
    dx_q, dwq, dbq = _linear_bwd(_merge_heads(dq), x_q, p["wq"])
    dxk, dwk, dbk = _linear_bwd(_merge_heads(dk), x_kv, p["wk"])
    dxv, dwv, dbv = _linear_bwd(_merge_heads(dv), x_kv, p["wv"])
    grads = {"wq": dwq, "bq": dbq, "wk": dwk, "bk": dbk,
             "wv": dwv, "bv": dbv, "wo": dwo, "bo": dbo}
    return dx_q, dxk + dxv, grads


def self_bi_attention(x, mask, block_params: dict, n_heads: int):
    """Self attention (Q, K, V all from x); returns the projected output."""
    out, _ = _attention_fwd(x, x, _full_mask(mask, x.shape[0]), block_params, n_heads)
    return out


def cross_bi_attention(x_q, x_kv, mask_q, mask_kv, block_params: dict, n_heads: int):
    """Cross attention: queries from x_q, keys/values from x_kv."""
    del mask_q  # query rows are computed regardless; pooling enforces the mask
    out, _ = _attention_fwd(x_q, x_kv, _full_mask(mask_kv, x_kv.shape[0]), block_params, n_heads)
    return out


def _full_mask(mask, n):
    if mask is None:
        return np.ones(n, dtype=bool)
    return np.asarray(mask, dtype=bool)


def reduce_dims(states: np.ndarray, params: TunerParams) -> np.ndarray:
    """Per-token affine -> ReLU -> affine width reduction."""
    if "reduction.w1" not in params.tensors:
        raise ConfigError("reduce_dims called but no reduction is configured")
    out, _ = _reduction_fwd(np.asarray(states), params)
    return out


def _reduction_fwd(x, params: TunerParams):
    pre = _linear_fwd(x, params["reduction.w1"], params["reduction.b1"])
    hid = np.maximum(pre, 0.0)
    out = _linear_fwd(hid, params["reduction.w2"], params["reduction.b2"])
    return out, (x, pre, hid)


def _reduction_bwd(dout, cache, params: TunerParams, grads: dict):
    x, pre, hid = cache
    dhid, dw2, db2 = _linear_bwd(dout, hid, params["reduction.w2"])
    dpre = dhid * (pre > 0)
    _, dw1, db1 = _linear_bwd(dpre, x, params["reduction.w1"])
    grads["reduction.w1"] += dw1
    grads["reduction.b1"] += db1
    grads["reduction.w2"] += dw2
    grads["reduction.b2"] += db2
    # input gradients stop here: the backbone states stay frozen


@dataclass
class ForwardTape:
    """Every intermediate needed to replay the forward and run the backward."""

    config: TunerConfig
    params: TunerParams = field(repr=False)
    mask: np.ndarray = field(repr=False)
    primary_cache: Optional[tuple] = field(repr=False, default=None)
    secondary_cache: Optional[tuple] = field(repr=False, default=None)
    primary: np.ndarray = field(repr=False, default=None)
    secondary: np.ndarray = field(repr=False, default=None)
    block_caches: list = field(repr=False, default_factory=list)
    output: np.ndarray = field(repr=False, default=None)


def _attn_params(params: TunerParams, prefix: str) -> dict:
    return {w: params[f"{prefix}.{w}"] for w in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}


def _check_finite(arr, where):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {where}")


def tuner_forward(align_states, uniform_states, mask, params: TunerParams,
                  config: TunerConfig):
    """Run the block stack; returns (output states n x d, tape for backward)."""
    h_a = np.asarray(align_states)
    h_u = np.asarray(uniform_states)
    if h_a.ndim != 2 or h_a.shape != h_u.shape:
        raise DataError(f"input shapes differ or are not 2-D: {h_a.shape} vs {h_u.shape}")
    if h_a.shape[1] != params.d_llm:
        raise DataError(f"input width {h_a.shape[1]} != d_llm {params.d_llm}")
    n = h_a.shape[0]
    mask = _full_mask(mask, n)
    if mask.shape != (n,):
        raise DataError(f"mask shape {mask.shape} does not match {n} tokens")
    if not mask.any():
        raise DataError("all tokens masked")

    dtype = params.dtype
    h_a = h_a.astype(dtype, copy=False)
    h_u = h_u.astype(dtype, copy=False)
    primary, secondary = (h_a, h_u) if config.connection_mode == A_TO_U else (h_u, h_a)

    tape = ForwardTape(config=config, params=params, mask=mask)
    if config.reduction is not None:
        primary, tape.primary_cache = _reduction_fwd(primary, params)
        secondary, tape.secondary_cache = _reduction_fwd(secondary, params)
        _check_finite(primary, "reduction (primary stream)")
        _check_finite(secondary, "reduction (secondary stream)")
    elif primary.shape[1] != config.block_width:
        raise DataError(f"input width {primary.shape[1]} != block width {config.block_width}")
    tape.primary = primary
    tape.secondary = secondary

    x = primary
    for i in range(config.n_blocks):
        prefix = f"blocks.{i}"
        cache = {}
        qkv_src = primary if (config.reattend_input and i > 0) else x
        cache["qkv_src_is_primary"] = config.reattend_input and i > 0
        cache["x_in"] = x
        attn, cache["self"] = _attention_fwd(qkv_src, qkv_src, mask,
                                             _attn_params(params, f"{prefix}.self_attn"),
                                             config.n_heads)
        _check_finite(attn, f"block {i} self bi-attention")
        x1, cache["ln_self"] = _layer_norm_fwd(x + attn, params[f"{prefix}.ln_self.gain"],
                                               params[f"{prefix}.ln_self.bias"],
                                               config.layer_norm_eps)
        if config.use_cross:
            cross, cache["cross"] = _attention_fwd(x1, secondary, mask,
                                                   _attn_params(params, f"{prefix}.cross_attn"),
                                                   config.n_heads)
            _check_finite(cross, f"block {i} cross bi-attention")
            x2, cache["ln_cross"] = _layer_norm_fwd(x1 + cross, params[f"{prefix}.ln_cross.gain"],
                                                    params[f"{prefix}.ln_cross.bias"],
                                                    config.layer_norm_eps)
        else:
            x2 = x1
        pre = _linear_fwd(x2, params[f"{prefix}.ffn.w_in"], params[f"{prefix}.ffn.b_in"])
        hid = _gelu_fwd(pre)
        ff = _linear_fwd(hid, params[f"{prefix}.ffn.w_out"], params[f"{prefix}.ffn.b_out"])
        _check_finite(ff, f"block {i} feed-forward")
        cache["ffn"] = (x2, pre, hid)
        x3, cache["ln_ffn"] = _layer_norm_fwd(x2 + ff, params[f"{prefix}.ln_ffn.gain"],
                                              params[f"{prefix}.ln_ffn.bias"],
                                              config.layer_norm_eps)
        tape.block_caches.append(cache)
        x = x3
    tape.output = x
    return x, tape


def encode(align_states, uniform_states, mask, params: TunerParams,
           config: TunerConfig) -> RepVector:
    """Mean of the output states over unmasked positions (not normalized)."""
    out, tape = tuner_forward(align_states, uniform_states, mask, params, config)
    return RepVector(out[tape.mask].mean(axis=0).astype(np.float64), normalized=False)


def tuner_backward(tape: ForwardTape, grad_output, params: TunerParams = None) -> dict:
    """Analytic gradients for every tuner tensor given dL/d(output).

    grad_output is either (n, d) with respect to the output states, or (d,)
    with respect to the pooled mean vector. Only parameter gradients are
    returned; the frozen inputs receive none.
    """
    if params is not None and params is not tape.params:
        if set(params.tensors) != set(tape.params.tensors):
            raise DataError("tape/params mismatch: tensor sets differ")
        for name, t in params.named():
            if tape.params[name].shape != t.shape:
                raise DataError(f"tape/params mismatch on {name}")
    params = tape.params
    config = tape.config
    mask = tape.mask
    n, d = tape.output.shape

    g = np.asarray(grad_output, dtype=params.dtype)
    if g.ndim == 1:
        if g.shape != (d,):
            raise DataError(f"pooled gradient must have {d} entries, got {g.shape}")
        dx = np.zeros((n, d), dtype=params.dtype)
        dx[mask] = g / mask.sum()
    elif g.shape == (n, d):
        dx = g.copy()
    else:
        raise DataError(f"grad_output shape {g.shape} matches neither ({n},{d}) nor ({d},)")

    grads = {name: np.zeros_like(t) for name, t in params.named()}
    d_primary = np.zeros_like(tape.primary)
    d_secondary = np.zeros_like(tape.secondary)

    for i in reversed(range(config.n_blocks)):
        prefix = f"blocks.{i}"
        cache = tape.block_caches[i]

        dsum, dgain, dbias = _layer_norm_bwd(dx, cache["ln_ffn"], params[f"{prefix}.ln_ffn.gain"])
        grads[f"{prefix}.ln_ffn.gain"] += dgain
        grads[f"{prefix}.ln_ffn.bias"] += dbias
        x2, pre, hid = cache["ffn"]
        dhid, dw_out, db_out = _linear_bwd(dsum, hid, params[f"{prefix}.ffn.w_out"])
        dpre = dhid * _gelu_grad(pre)
        dx2_ffn, dw_in, db_in = _linear_bwd(dpre, x2, params[f"{prefix}.ffn.w_in"])
        grads[f"{prefix}.ffn.w_out"] += dw_out
        grads[f"{prefix}.ffn.b_out"] += db_out
        grads[f"{prefix}.ffn.w_in"] += dw_in
        grads[f"{prefix}.ffn.b_in"] += db_in
        dx2 = dsum + dx2_ffn

        if config.use_cross:
            dsum, dgain, dbias = _layer_norm_bwd(dx2, cache["ln_cross"],
                                                 params[f"{prefix}.ln_cross.gain"])
            grads[f"{prefix}.ln_cross.gain"] += dgain
            grads[f"{prefix}.ln_cross.bias"] += dbias
            dq_in, dkv_in, attn_grads = _attention_bwd(dsum, cache["cross"],
                                                       _attn_params(params, f"{prefix}.cross_attn"))
            for w, val in attn_grads.items():
                grads[f"{prefix}.cross_attn.{w}"] += val
            d_secondary += dkv_in
            dx1 = dsum + dq_in
        else:
            dx1 = dx2

        dsum, dgain, dbias = _layer_norm_bwd(dx1, cache["ln_self"], params[f"{prefix}.ln_self.gain"])
        grads[f"{prefix}.ln_self.gain"] += dgain
        grads[f"{prefix}.ln_self.bias"] += dbias
        dq_in, dkv_in, attn_grads = _attention_bwd(dsum, cache["self"],
                                                   _attn_params(params, f"{prefix}.self_attn"))
        for w, val in attn_grads.items():
            grads[f"{prefix}.self_attn.{w}"] += val
        dsrc = dq_in + dkv_in
        dx = dsum  # residual path into the previous stream
        if cache["qkv_src_is_primary"]:
            d_primary += dsrc
        else:
            dx = dx + dsrc

    d_primary += dx  # block 1 read the (reduced) primary stream directly
    if config.reduction is not None:
        _reduction_bwd(d_primary, tape.primary_cache, params, grads)
        _reduction_bwd(d_secondary, tape.secondary_cache, params, grads)
    return grads


# ---------------------------------------------------------------------------
# Checkpoint format (LMT1)
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: TunerParams, config: TunerConfig, meta: dict = None) -> int:
    """Write config + f32 tensors; byte-stable for identical inputs."""
    header = {
        "config": asdict(config),
        "d_llm": params.d_llm,
        "meta": dict(meta or {}),
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(hjson)), hjson]
    names = list(params.tensors)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        t = params[name]
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    blob = b"".join(parts)
    Path(path).write_bytes(blob)
    return len(blob)


def load_checkpoint(path):
    """Read (params, config, meta); tensors come back float32."""
    blob = Path(path).read_bytes()
    pos = 0

    def take(count):
        nonlocal pos
        if pos + count > len(blob):
            raise FormatError(f"{path}: unexpected end of checkpoint")
        out = blob[pos : pos + count]
        pos += count
        return out

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an LMT1 checkpoint")
    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen).decode("utf-8"))
    cfg_dict = dict(header["config"])
    if cfg_dict.get("reduction") is not None:
        cfg_dict["reduction"] = tuple(cfg_dict["reduction"])
    config = TunerConfig(**cfg_dict)
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n_items = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(take(4 * n_items), dtype="<f4").reshape(shape).copy()
    if pos != len(blob):
        raise FormatError(f"{path}: trailing bytes after tensors")
    params = TunerParams(int(header["d_llm"]), tensors)
    expected = _tensor_shapes(config, params.d_llm)
    if set(expected) != set(tensors) or any(tensors[k].shape != expected[k] for k in expected):
        raise FormatError(f"{path}: tensor set does not match its config")
    return params, config, header.get("meta", {})
