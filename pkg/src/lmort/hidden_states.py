"""Data model and bit-exact file formats for layered hidden-state dumps.

The HSD binary layout (little-endian throughout):

    magic          4 bytes  b"HSD1"
    d_model        u32
    n_layers       u32      number of stored layer indices
    layer_indices  u32 * n_layers (ascending)
    record_count   u64
    records        repeated:
        id_len     u16
        id         id_len bytes (UTF-8)
        n          u32      token count
        mask       n bytes  (1 = real token, 0 = padding)
        states     n_layers blocks of n * d_model float32

Relevance judgments travel as 3-column TSV (query_id, passage_id, grade),
corpus/query text as JSONL records {"id": ..., "text": ...}, positive pairs
as 2-column TSV, and training examples as JSONL.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, FormatError

log = logging.getLogger(__name__)

HSD_MAGIC = b"HSD1"

Qrels = dict  # query_id -> {passage_id -> grade}


@dataclass(frozen=True)
class LayeredStates:
    """Per-layer token hidden states for one sequence.

    ``states`` maps layer index -> (n, d) float32 matrix; every stored layer
    shares the same shape. ``attention_mask`` marks real tokens (True) vs
    padding (False); at least one entry must be True.
    """

    sequence_id: str
    states: dict = field(repr=False)
    attention_mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.sequence_id:
            raise DataError("sequence_id must be non-empty")
        if not self.states:
            raise DataError(f"{self.sequence_id}: at least one layer required")
        mask = np.asarray(self.attention_mask, dtype=bool)
        object.__setattr__(self, "attention_mask", mask)
        if mask.ndim != 1 or mask.size < 1:
            raise DataError(f"{self.sequence_id}: mask must be a non-empty vector")
        if not mask.any():
            raise DataError(f"{self.sequence_id}: all tokens masked")
        n = mask.size
        shape = None
        clean = {}
        for layer in sorted(self.states):
            if not isinstance(layer, int) or layer < 0:
                raise DataError(f"{self.sequence_id}: bad layer index {layer!r}")
            m = np.asarray(self.states[layer], dtype=np.float32)
            if m.ndim != 2 or m.shape[0] != n:
                raise DataError(
                    f"{self.sequence_id}: layer {layer} shape {m.shape} does not match n={n}"
                )
            if shape is None:
                shape = m.shape
            elif m.shape != shape:
                raise DataError(
                    f"{self.sequence_id}: layer {layer} shape {m.shape} != {shape}"
                )
            clean[layer] = m
        object.__setattr__(self, "states", clean)

    @property
    def token_count(self) -> int:
        return int(self.attention_mask.size)

    @property
    def layer_indices(self) -> tuple:
        return tuple(sorted(self.states))

    @property
    def d_model(self) -> int:
        return int(next(iter(self.states.values())).shape[1])


@dataclass(frozen=True)
class TrainExample:
    """One contrastive training unit: a query, its positives and negatives."""

    query_id: str
    positive_ids: tuple
    negative_ids: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "positive_ids", tuple(self.positive_ids))
        object.__setattr__(self, "negative_ids", tuple(self.negative_ids))
        if not self.query_id:
            raise DataError("query_id must be non-empty")
        if not self.positive_ids:
            raise DataError(f"{self.query_id}: positive_ids must be non-empty")
        overlap = set(self.positive_ids) & set(self.negative_ids)
        if overlap:
            raise DataError(f"{self.query_id}: ids in both positives and negatives: {sorted(overlap)}")


# ---------------------------------------------------------------------------
# HSD dump I/O
# ---------------------------------------------------------------------------


def write_dump(records: Sequence[LayeredStates], path) -> int:
    """Write records to an HSD file; returns the byte count written.

    All records must share d_model and layer_indices. An empty record list
    produces a valid file with record count 0 (d_model stored as 0).
    """
    records = list(records)
    if records:
        d_model = records[0].d_model
        layers = records[0].layer_indices
        for rec in records[1:]:
            if rec.d_model != d_model:
                raise FormatError(
                    f"mixed d_model: {rec.sequence_id} has {rec.d_model}, expected {d_model}"
                )
            if rec.layer_indices != layers:
                raise FormatError(
                    f"mixed layer sets: {rec.sequence_id} has {rec.layer_indices}, expected {layers}"
                )
    else:
        d_model, layers = 0, ()

    parts = [HSD_MAGIC, struct.pack("<II", d_model, len(layers))]
    parts.append(struct.pack(f"<{len(layers)}I", *layers))
    parts.append(struct.pack("<Q", len(records)))
    for rec in records:
        id_bytes = rec.sequence_id.encode("utf-8")
        if len(id_bytes) > 0xFFFF:
            raise FormatError(f"sequence_id too long: {len(id_bytes)} bytes")
        parts.append(struct.pack("<H", len(id_bytes)))
        parts.append(id_bytes)
        parts.append(struct.pack("<I", rec.token_count))
        parts.append(rec.attention_mask.astype(np.uint8).tobytes())
        for layer in layers:
            parts.append(np.ascontiguousarray(rec.states[layer], dtype="<f4").tobytes())
    blob = b"".join(parts)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise FormatError(f"cannot write dump {path}: {exc}") from exc
    return len(blob)


class _Cursor:
    """Sequential reader over a byte buffer with truncation checks."""

    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.buf):
            raise FormatError(f"{self.path}: unexpected end of dump")
        out = self.buf[self.pos : self.pos + count]
        self.pos += count
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_dump(path) -> list:
    """Read an HSD file back into LayeredStates records, in file order."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read dump {path}: {exc}") from exc
    cur = _Cursor(blob, path)
    if cur.take(4) != HSD_MAGIC:
        raise FormatError(f"{path}: not an HSD file")
    d_model, n_layers = cur.unpack("<II")
    layers = cur.unpack(f"<{n_layers}I")
    if list(layers) != sorted(set(layers)):
        raise FormatError(f"{path}: layer indices not unique/ascending: {layers}")
    (count,) = cur.unpack("<Q")
    records = []
    for _ in range(count):
        (id_len,) = cur.unpack("<H")
        seq_id = cur.take(id_len).decode("utf-8")
        (n,) = cur.unpack("<I")
        mask = np.frombuffer(cur.take(n), dtype=np.uint8).astype(bool)
        states = {}
        for layer in layers:
            raw = cur.take(n * d_model * 4)
            states[layer] = np.frombuffer(raw, dtype="<f4").reshape(n, d_model).copy()
        try:
            records.append(LayeredStates(seq_id, states, mask))
        except DataError as exc:
            raise FormatError(f"{path}: invalid record: {exc}") from exc
    if cur.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - cur.pos} trailing bytes after last record")
    return records


# ---------------------------------------------------------------------------
# Qrels / pairs / text / training-example files
# ---------------------------------------------------------------------------


def read_qrels_tsv(path) -> Qrels:
    """Parse 3-column TSV (query_id, passage_id, grade). Last grade wins on duplicates."""
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 tab-separated columns, got {len(cols)}")
            qid, pid, grade_s = cols
            if not qid or not pid:
                raise FormatError(f"{path}:{lineno}: empty id")
            try:
                grade = int(grade_s)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-integer grade {grade_s!r}") from None
            if grade < 0:
                raise FormatError(f"{path}:{lineno}: negative grade {grade}")
            if qid in qrels and pid in qrels[qid]:
                log.warning("%s:%d: duplicate pair (%s, %s); last grade wins", path, lineno, qid, pid)
            qrels.setdefault(qid, {})[pid] = grade
    return qrels


def write_qrels_tsv(qrels: Qrels, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(qrels):
            for pid in sorted(qrels[qid]):
                fh.write(f"{qid}\t{pid}\t{qrels[qid][pid]}\n")


def read_pairs_tsv(path) -> list:
    """Positive-pair list: 2-column TSV (query_id, passage_id)."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 2 or not cols[0] or not cols[1]:
                raise FormatError(f"{path}:{lineno}: expected 2 non-empty tab-separated columns")
            pairs.append((cols[0], cols[1]))
    return pairs


def write_pairs_tsv(pairs: Iterable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, pid in pairs:
            fh.write(f"{qid}\t{pid}\n")


def read_jsonl_texts(path) -> list:
    """Read {"id", "text"} JSONL into a list of (id, text) in file order."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append((str(obj["id"]), str(obj["text"])))
            except (json.JSONDecodeError, KeyError) as exc:
                raise FormatError(f"{path}:{lineno}: bad JSONL record: {exc}") from exc
    return out


def write_jsonl_texts(items: Iterable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item_id, text in items:
            fh.write(json.dumps({"id": item_id, "text": text}) + "\n")


def read_train_examples(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append(
                    TrainExample(str(obj["query_id"]), tuple(obj["positive_ids"]), tuple(obj.get("negative_ids", ())))
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad training example: {exc}") from exc
    return out


def write_train_examples(examples: Iterable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(
                json.dumps(
                    {
                        "query_id": ex.query_id,
                        "positive_ids": list(ex.positive_ids),
                        "negative_ids": list(ex.negative_ids),
                    }
                )
                + "\n"
            )
