"""Exact vector store, top-K search, and NDCG@10 evaluation.

Search is exact brute force (desk-scale corpora); ranking ties break by
ascending passage id so runs reproduce across platforms. NDCG uses the
2^rel - 1 gain with a log2(rank + 1) discount.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, FormatError
from .space_analysis import RepVector
from .training import COSINE, DOT

log = logging.getLogger(__name__)

VECTORS_MAGIC = b"VEC1"


@dataclass(frozen=True)
class VectorStore:
    """Immutable id -> f32 vector table with a fixed similarity kind."""

    ids: tuple
    matrix: np.ndarray = field(repr=False)
    kind: str = COSINE

    @property
    def dimension(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class RankedList:
    """Descending (passage_id, score) results for one query."""

    query_id: str
    items: tuple  # of (passage_id, score)

    def __post_init__(self):
        for (p1, s1), (p2, s2) in zip(self.items, self.items[1:]):
            if s2 > s1 or (s2 == s1 and p2 <= p1):
                raise DataError(f"{self.query_id}: ranking not sorted at ({p1},{p2})")


def build_store(id_vector_pairs: Iterable, kind: str = COSINE) -> VectorStore:
    """Build an immutable store; rejects duplicate ids and mixed dimensions."""
    if kind not in (DOT, COSINE):
        raise DataError(f"unknown similarity kind {kind!r}")
    ids, rows = [], []
    seen = set()
    dim = None
    for item_id, vec in id_vector_pairs:
        if item_id in seen:
            raise DataError(f"duplicate id {item_id!r}")
        seen.add(item_id)
        values = vec.values if isinstance(vec, RepVector) else np.asarray(vec)
        values = values.astype(np.float32)
        if dim is None:
            dim = values.size
        elif values.size != dim:
            raise DataError(f"{item_id}: dimension {values.size} != {dim}")
        if kind == COSINE and not values.any():
            raise DataError(f"{item_id}: zero vector not allowed under cosine similarity")
        ids.append(item_id)
        rows.append(values)
    matrix = np.stack(rows) if rows else np.zeros((0, dim or 0), dtype=np.float32)
    matrix.flags.writeable = False
    return VectorStore(tuple(ids), matrix, kind)


def top_k(query, store: VectorStore, k: int) -> RankedList:
    """Exact k best matches by the store's similarity; ties by ascending id."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    query_id = "query"
    if isinstance(query, tuple):
        query_id, query = query
    vec = (query.values if isinstance(query, RepVector) else np.asarray(query)).astype(np.float64)
    if len(store) == 0:
        return RankedList(query_id, ())
    if vec.size != store.dimension:
        raise DataError(f"query dimension {vec.size} != store dimension {store.dimension}")
    mat = store.matrix.astype(np.float64)
    if store.kind == COSINE:
        qnorm = np.linalg.norm(vec)
        if qnorm == 0.0:
            raise DataError("zero query vector under cosine similarity")
        scores = (mat @ vec) / (np.linalg.norm(mat, axis=1) * qnorm)
    else:
        scores = mat @ vec
    order = np.lexsort((np.array(store.ids), -scores))[:k]
    return RankedList(query_id, tuple((store.ids[int(i)], float(scores[int(i)])) for i in order))


def ndcg_at_10(ranked: RankedList, judged: dict) -> float:
    """NDCG truncated at rank 10 against {passage_id: grade} judgments."""
    grades = sorted((g for g in judged.values() if g > 0), reverse=True)
    if not grades:
        return 0.0
    dcg = 0.0
    for i, (pid, _) in enumerate(ranked.items[:10]):
        rel = judged.get(pid, 0)
        if rel > 0:
            dcg += (2.0 ** rel - 1.0) / math.log2(i + 2)
    idcg = sum((2.0 ** g - 1.0) / math.log2(i + 2) for i, g in enumerate(grades[:10]))
    return dcg / idcg


@dataclass(frozen=True)
class EvalResult:
    mean_ndcg: float
    per_query: tuple  # of (query_id, ndcg)
    skipped: tuple  # query ids without qrels entries
    run: tuple  # of RankedList


def evaluate_run(queries: Sequence, store: VectorStore, qrels: dict, k: int = 10) -> EvalResult:
    """Unweighted mean NDCG@10 over judged queries; unjudged ones are skipped."""
    per_query, run, skipped = [], [], []
    for query_id, vec in queries:
        if query_id not in qrels:
            skipped.append(query_id)
            continue
        ranked = top_k((query_id, vec), store, k)
        run.append(ranked)
        per_query.append((query_id, ndcg_at_10(ranked, qrels[query_id])))
    if skipped:
        log.warning("%d queries lack qrels entries and were skipped", len(skipped))
    mean = sum(s for _, s in per_query) / len(per_query) if per_query else 0.0
    return EvalResult(mean, tuple(per_query), tuple(skipped), tuple(run))


def write_run_tsv(run: Sequence[RankedList], path) -> None:
    """Run file rows: query_id, rank, passage_id, score."""
    with open(path, "w", encoding="utf-8") as fh:
        for ranked in run:
            for rank, (pid, score) in enumerate(ranked.items, start=1):
                fh.write(f"{ranked.query_id}\t{rank}\t{pid}\t{score:.9g}\n")


def write_per_query_csv(per_query: Sequence, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("query_id,ndcg@10\n")
        for qid, score in per_query:
            fh.write(f"{qid},{score:.9g}\n")


# ---------------------------------------------------------------------------
# Encoded-vector file (VEC1)
# ---------------------------------------------------------------------------


def write_vectors(path, ids: Sequence[str], matrix: np.ndarray) -> int:
    """VEC1 layout: magic, d u32, count u64, id table, then f32 rows."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise DataError(f"matrix must be 2-D, got shape {matrix.shape}")
    if len(ids) != matrix.shape[0]:
        raise DataError(f"{len(ids)} ids vs {matrix.shape[0]} rows")
    parts = [VECTORS_MAGIC, struct.pack("<IQ", matrix.shape[1], matrix.shape[0])]
    for item_id in ids:
        ib = item_id.encode("utf-8")
        parts.append(struct.pack("<H", len(ib)))
        parts.append(ib)
    parts.append(matrix.tobytes())
    blob = b"".join(parts)
    Path(path).write_bytes(blob)
    return len(blob)


def read_vectors(path):
    """Read a VEC1 file back into (ids, float32 matrix)."""
    blob = Path(path).read_bytes()
    pos = 0

    def take(count):
        nonlocal pos
        if pos + count > len(blob):
            raise FormatError(f"{path}: unexpected end of vector file")
        out = blob[pos : pos + count]
        pos += count
        return out

    if take(4) != VECTORS_MAGIC:
        raise FormatError(f"{path}: not a VEC1 file")
    d, count = struct.unpack("<IQ", take(12))
    ids = []
    for _ in range(count):
        (ilen,) = struct.unpack("<H", take(2))
        ids.append(take(ilen).decode("utf-8"))
    matrix = np.frombuffer(take(4 * d * count), dtype="<f4").reshape(count, d).copy()
    if pos != len(blob):
        raise FormatError(f"{path}: trailing bytes after vectors")
    return ids, matrix
