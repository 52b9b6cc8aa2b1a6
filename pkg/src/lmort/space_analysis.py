"""Per-layer alignment/uniformity diagnostics over pooled representations.

Alignment loss is the mean squared L2 distance between normalized positive
pairs; uniformity loss is the log mean Gaussian potential exp(-2 d^2) over
ordered i.i.d. sample pairs. The analysis representation is mean pooling over
unmasked tokens followed by L2 normalization. All expectation arithmetic runs
in float64 regardless of on-disk precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, FormatError
from .hidden_states import LayeredStates

#: Sentinel for exhaustive enumeration; any budget >= n^2 also routes there.
ALL = None

#: Default auto-budget policy: exhaustive up to this many samples, else subsample.
EXHAUSTIVE_SAMPLE_LIMIT = 2048
DEFAULT_PAIR_BUDGET = 100_000

_NORM_TOL = 1e-6


@dataclass(frozen=True)
class RepVector:
    """A pooled dense representation; ``normalized`` asserts unit L2 norm."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 1 or v.size < 1:
            raise DataError("RepVector values must be a non-empty vector")
        if self.normalized and abs(np.linalg.norm(v) - 1.0) > _NORM_TOL:
            raise DataError(f"normalized flag set but ||v|| = {np.linalg.norm(v):.9g}")


@dataclass(frozen=True)
class LayerRow:
    align_loss: float
    uniform_loss: float
    pair_count: int
    sample_count: int


@dataclass(frozen=True)
class LayerDiagnostics:
    """Per-layer (alignment, uniformity) losses plus argmin selections.

    selected_a / selected_u are the layers with the lowest alignment /
    uniformity loss; ties break toward the lowest layer index.
    """

    rows: dict  # layer index -> LayerRow
    selected_a: int
    selected_u: int

    def __post_init__(self):
        if not self.rows:
            raise DataError("LayerDiagnostics needs at least one layer row")
        if self.selected_a != argmin_layer({l: r.align_loss for l, r in self.rows.items()}):
            raise DataError("selected_a is not the alignment-loss argmin")
        if self.selected_u != argmin_layer({l: r.uniform_loss for l, r in self.rows.items()}):
            raise DataError("selected_u is not the uniformity-loss argmin")

    @classmethod
    def from_rows(cls, rows: dict) -> "LayerDiagnostics":
        return cls(
            rows=dict(rows),
            selected_a=argmin_layer({l: r.align_loss for l, r in rows.items()}),
            selected_u=argmin_layer({l: r.uniform_loss for l, r in rows.items()}),
        )

    def worst_a(self) -> int:
        return _argbest_layer({l: r.align_loss for l, r in self.rows.items()}, max)

    def worst_u(self) -> int:
        return _argbest_layer({l: r.uniform_loss for l, r in self.rows.items()}, max)


def _argbest_layer(losses: dict, best) -> int:
    target = best(losses.values())
    return min(l for l, v in losses.items() if v == target)


def argmin_layer(losses: dict) -> int:
    """Lowest-loss layer; deterministic tie-break toward the lowest index."""
    return _argbest_layer(losses, min)


def pooled_rep(states: np.ndarray, mask, normalize: bool) -> RepVector:
    """Mean over unmasked token states, optionally L2-normalized.

    ``states`` is one stored layer (n x d); ``mask`` may be None for all-real.
    """
    m = np.asarray(states, dtype=np.float64)
    if m.ndim != 2:
        raise DataError(f"states must be 2-D, got shape {m.shape}")
    if mask is None:
        mask = np.ones(m.shape[0], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (m.shape[0],):
        raise DataError(f"mask shape {mask.shape} does not match {m.shape[0]} tokens")
    if not mask.any():
        raise DataError("all tokens masked; nothing to pool")
    vec = m[mask].mean(axis=0)
    if normalize:
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            raise DataError("cannot normalize a zero vector")
        vec = vec / norm
    return RepVector(vec, normalized=normalize)


def _require_normalized(vecs: Iterable, what: str) -> np.ndarray:
    rows = []
    for v in vecs:
        if not isinstance(v, RepVector):
            v = RepVector(np.asarray(v), normalized=True)
        if not v.normalized:
            raise DataError(f"{what} must be normalized")
        rows.append(v.values)
    return np.stack(rows)


def alignment_loss(pairs: Sequence) -> float:
    """Mean squared L2 distance over normalized positive pairs; in [0, 4]."""
    if not pairs:
        raise DataError("alignment_loss needs at least one pair")
    left = _require_normalized((p[0] for p in pairs), "alignment pair members")
    right = _require_normalized((p[1] for p in pairs), "alignment pair members")
    diff = left - right
    return float(np.einsum("ij,ij->i", diff, diff).mean())


def uniformity_loss(samples: Sequence, pair_budget=ALL, seed: int = 0) -> float:
    """log mean exp(-2 ||x - y||^2) over ordered i.i.d. pairs.

    pair_budget=ALL (or any budget >= n^2) enumerates all n^2 ordered pairs,
    self-pairs included; otherwise pairs are subsampled with replacement from
    a seeded generator. Result is <= 0, with 0 only when all points coincide.
    """
    if len(samples) == 0:
        raise DataError("uniformity_loss needs at least one sample")
    mat = _require_normalized(samples, "uniformity samples")
    return _uniformity_from_matrix(mat, pair_budget, seed)


def _uniformity_from_matrix(mat: np.ndarray, pair_budget, seed: int) -> float:
    n = mat.shape[0]
    if pair_budget is not ALL and pair_budget < 1:
        raise DataError(f"pair_budget must be >= 1, got {pair_budget}")
    if pair_budget is ALL or pair_budget >= n * n:
        sq = np.einsum("ij,ij->i", mat, mat)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (mat @ mat.T)
        np.maximum(d2, 0.0, out=d2)
        return float(np.log(np.exp(-2.0 * d2).mean()))
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, size=pair_budget)
    j = rng.integers(0, n, size=pair_budget)
    diff = mat[i] - mat[j]
    d2 = np.einsum("ij,ij->i", diff, diff)
    return float(np.log(np.exp(-2.0 * d2).mean()))


def sweep_layers(records: Sequence[LayeredStates], pairs: Sequence, layer_indices: Sequence[int],
                 align_pair_budget=ALL, uniform_pair_budget="auto", seed: int = 0) -> LayerDiagnostics:
    """One (alignment, uniformity) row per layer over a dump, plus selections.

    ``pairs`` lists (query_id, passage_id) positive pairs; the uniformity
    sample set pools every record in the dump. uniform_pair_budget="auto"
    applies the default policy (exhaustive up to 2048 samples, else 100k
    seeded pairs).
    """
    if not records:
        raise DataError("sweep needs a non-empty dump")
    if not pairs:
        raise DataError("sweep needs at least one positive pair")
    layer_indices = sorted(set(int(l) for l in layer_indices))
    by_id = {}
    for rec in records:
        by_id[rec.sequence_id] = rec
        for l in layer_indices:
            if l not in rec.states:
                raise DataError(f"layer {l} missing from record {rec.sequence_id}")
    for qid, pid in pairs:
        if qid not in by_id:
            raise DataError(f"pair references unknown id {qid}")
        if pid not in by_id:
            raise DataError(f"pair references unknown id {pid}")

    if align_pair_budget is not ALL and align_pair_budget < len(pairs):
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(pairs), size=align_pair_budget, replace=False)
        pairs = [pairs[int(k)] for k in chosen]

    n_samples = len(records)
    if uniform_pair_budget == "auto":
        uniform_pair_budget = ALL if n_samples <= EXHAUSTIVE_SAMPLE_LIMIT else DEFAULT_PAIR_BUDGET

    rows = {}
    for l in layer_indices:
        reps = {rec.sequence_id: pooled_rep(rec.states[l], rec.attention_mask, normalize=True)
                for rec in records}
        align = alignment_loss([(reps[q], reps[p]) for q, p in pairs])
        sample_mat = np.stack([reps[rec.sequence_id].values for rec in records])
        uniform = _uniformity_from_matrix(sample_mat, uniform_pair_budget, seed)
        rows[l] = LayerRow(align, uniform, len(pairs), n_samples)
    return LayerDiagnostics.from_rows(rows)


# ---------------------------------------------------------------------------
# Heatmap CSV
# ---------------------------------------------------------------------------

_CSV_HEADER = "layer,align_loss,uniform_loss"


def export_heatmap_csv(diag: LayerDiagnostics, path) -> None:
    """CSV with one row per layer, losses at 9 significant digits."""
    lines = [_CSV_HEADER]
    for l in sorted(diag.rows):
        row = diag.rows[l]
        lines.append(f"{l},{row.align_loss:.9g},{row.uniform_loss:.9g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_heatmap_csv(path) -> LayerDiagnostics:
    """Re-import an exported heatmap (pair/sample counts are not stored)."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or lines[0] != _CSV_HEADER:
        raise FormatError(f"{path}: expected header {_CSV_HEADER!r}")
    rows = {}
    for lineno, ln in enumerate(lines[1:], start=2):
        cols = ln.split(",")
        if len(cols) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 columns")
        try:
            rows[int(cols[0])] = LayerRow(float(cols[1]), float(cols[2]), 0, 0)
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return LayerDiagnostics.from_rows(rows)
