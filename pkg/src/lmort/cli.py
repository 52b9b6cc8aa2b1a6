"""Command-line workflow: emulate -> analyze -> train -> encode -> search-eval.

Configuration comes from a TOML manifest plus flag overrides (flags win).
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
LMORT_THREADS (or --deterministic, which forces 1) caps BLAS parallelism;
it is applied before numpy is imported, so library imports stay lazy here.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

log = logging.getLogger("lmort")

ABLATIONS = ("full", "worst-au", "self-only-a", "self-only-u", "embedding-only")

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")


def _cap_threads(count: str) -> None:
    for var in _THREAD_VARS:
        os.environ[var] = count


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    """Validated paths + config blocks for train/ablate commands."""

    dump: Path
    train: Path
    pairs: Path | None
    out_dir: Path
    layer_a: int | None
    layer_u: int | None
    tuner: "object"
    train_cfg: "object"


def _load_toml(path: Path) -> dict:
    try:
        import tomllib  # Python >= 3.11
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _build_manifest(args) -> RunManifest:
    from .errors import ConfigError, DataError
    from .lmort_core import TunerConfig
    from .training import TrainConfig

    raw = _load_toml(Path(args.manifest))
    paths = raw.get("paths", {})
    for key in ("dump", "train", "out_dir"):
        if key not in paths:
            raise ConfigError(f"manifest [paths] missing {key!r}")

    tuner_kw = dict(raw.get("tuner", {}))
    if "reduction" in tuner_kw and tuner_kw["reduction"] is not None:
        tuner_kw["reduction"] = tuple(tuner_kw["reduction"])
    train_kw = dict(raw.get("train", {}))
    if getattr(args, "connection", None):
        tuner_kw["connection_mode"] = args.connection
    if getattr(args, "blocks", None):
        tuner_kw["n_blocks"] = args.blocks
    if getattr(args, "seed", None) is not None:
        tuner_kw["seed"] = args.seed
        train_kw["seed"] = args.seed

    known_tuner = {f.name for f in fields(TunerConfig)}
    known_train = {f.name for f in fields(TrainConfig)}
    for kw, known, block in ((tuner_kw, known_tuner, "tuner"), (train_kw, known_train, "train")):
        unknown = set(kw) - known
        if unknown:
            raise ConfigError(f"unknown [{block}] manifest keys: {sorted(unknown)}")

    layers = raw.get("layers", {})
    manifest = RunManifest(
        dump=Path(paths["dump"]),
        train=Path(paths["train"]),
        pairs=Path(paths["pairs"]) if "pairs" in paths else None,
        out_dir=Path(paths["out_dir"]),
        layer_a=layers.get("a"),
        layer_u=layers.get("u"),
        tuner=TunerConfig(**tuner_kw),
        train_cfg=TrainConfig(**train_kw),
    )
    for p in (manifest.dump, manifest.train, manifest.pairs):
        if p is not None and not p.exists():
            raise DataError(f"manifest path does not exist: {p}")
    if manifest.layer_a is None and manifest.pairs is None:
        raise ConfigError("manifest needs either [layers] a/u or a pairs path for the sweep")
    return manifest


def _selected_layers(manifest, records):
    """Fixed (a, u) from the manifest, else a fresh sweep over the dump."""
    if manifest.layer_a is not None and manifest.layer_u is not None:
        return int(manifest.layer_a), int(manifest.layer_u), None
    from .hidden_states import read_pairs_tsv
    from .space_analysis import sweep_layers

    pairs = read_pairs_tsv(manifest.pairs)
    layers = records[0].layer_indices
    diag = sweep_layers(records, pairs, layers)
    return diag.selected_a, diag.selected_u, diag


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_emulate(args) -> int:
    from .hidden_states import write_dump, write_jsonl_texts, write_pairs_tsv, \
        write_qrels_tsv, write_train_examples
    from .synthetic_llm import EmulatorConfig, build_emulator, encode_layers, \
        make_synthetic_task, tokens_to_text

    out = Path(args.out)
    if not out.is_dir():
        from .errors import DataError
        raise DataError(f"output directory does not exist: {out}")

    config = EmulatorConfig(seed=args.seed, vocab_size=args.vocab_size, d_model=args.d_model,
                            n_layers=args.n_layers, n_heads=args.n_heads,
                            max_seq_len=args.max_seq_len)
    emulator = build_emulator(config)
    task = make_synthetic_task(args.seed, args.queries, args.passages, args.positives,
                               args.negatives, args.noise, alphabet_size=args.alphabet_size,
                               min_len=args.min_len, max_len=args.max_len)

    if args.layers.strip().lower() == "all":
        layer_indices = list(range(config.emission_points))
    else:
        layer_indices = sorted({int(tok) for tok in args.layers.split(",")})

    records = [encode_layers(emulator, toks, layer_indices, sequence_id=sid)
               for sid, toks in (*task.queries, *task.corpus)]
    n_bytes = write_dump(records, out / "dump.hsd")
    write_jsonl_texts(((i, tokens_to_text(t)) for i, t in task.queries), out / "queries.jsonl")
    write_jsonl_texts(((i, tokens_to_text(t)) for i, t in task.corpus), out / "corpus.jsonl")
    write_qrels_tsv(task.qrels, out / "qrels.tsv")
    write_train_examples(task.train_examples, out / "train.jsonl")
    pairs = [(ex.query_id, pid) for ex in task.train_examples for pid in ex.positive_ids]
    write_pairs_tsv(pairs, out / "pairs.tsv")
    (out / "query_ids.txt").write_text("".join(f"{i}\n" for i, _ in task.queries))
    (out / "passage_ids.txt").write_text("".join(f"{i}\n" for i, _ in task.corpus))
    print(f"wrote {len(records)} records ({n_bytes} bytes) and task files to {out}")
    return 0


def cmd_analyze(args) -> int:
    from .hidden_states import read_dump, read_pairs_tsv
    from .space_analysis import export_heatmap_csv, sweep_layers

    records = read_dump(args.dump)
    pairs = read_pairs_tsv(args.pairs)
    layers = records[0].layer_indices if records else ()
    diag = sweep_layers(records, pairs, layers, seed=args.seed)
    export_heatmap_csv(diag, args.out)
    print(f"alignment layer a={diag.selected_a} uniformity layer u={diag.selected_u}")
    print(f"heatmap written to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .hidden_states import read_dump, read_train_examples
    from .training import train_loop

    manifest = _build_manifest(args)
    records = read_dump(manifest.dump)
    examples = read_train_examples(manifest.train)
    layer_a, layer_u, _ = _selected_layers(manifest, records)
    manifest.out_dir.mkdir(parents=True, exist_ok=True)
    params, loss_rows = train_loop(examples, records, layer_a, layer_u, manifest.tuner,
                                   manifest.train_cfg, checkpoint_dir=manifest.out_dir,
                                   resume=args.resume)
    final_loss = loss_rows[-1][1] if loss_rows else float("nan")
    print(f"layers a={layer_a} u={layer_u} connection={manifest.tuner.connection_mode}")
    print(f"trained {len(loss_rows)} steps, final batch loss {final_loss:.6g}")
    print(f"checkpoint: {manifest.out_dir / 'final.lmt'}")
    return 0


def cmd_encode(args) -> int:
    from .errors import DataError
    from .hidden_states import read_dump
    from .lmort_core import encode, load_checkpoint
    from .retrieval import write_vectors

    params, config, meta = load_checkpoint(args.checkpoint)
    if "layer_a" not in meta or "layer_u" not in meta:
        raise DataError(f"{args.checkpoint}: checkpoint lacks layer_a/layer_u metadata")
    layer_a, layer_u = int(meta["layer_a"]), int(meta["layer_u"])
    records = read_dump(args.dump)
    if args.ids:
        wanted = set(Path(args.ids).read_text().split())
        records = [r for r in records if r.sequence_id in wanted]
        missing = wanted - {r.sequence_id for r in records}
        if missing:
            raise DataError(f"ids not present in dump: {sorted(missing)[:5]}")
    ids, rows = [], []
    for rec in records:
        for layer in (layer_a, layer_u):
            if layer not in rec.states:
                raise DataError(f"record {rec.sequence_id} lacks selected layer {layer}")
        vec = encode(rec.states[layer_a], rec.states[layer_u], rec.attention_mask,
                     params, config)
        ids.append(rec.sequence_id)
        rows.append(vec.values)
    import numpy as np

    n_bytes = write_vectors(args.out, ids, np.stack(rows) if rows else np.zeros((0, 0)))
    print(f"encoded {len(ids)} vectors ({n_bytes} bytes) to {args.out}")
    return 0


def cmd_search_eval(args) -> int:
    from .hidden_states import read_qrels_tsv
    from .retrieval import build_store, evaluate_run, read_vectors, write_per_query_csv, \
        write_run_tsv

    query_ids, query_mat = read_vectors(args.queries)
    store_ids, store_mat = read_vectors(args.store)
    qrels = read_qrels_tsv(args.qrels)
    store = build_store(zip(store_ids, store_mat), kind=args.similarity)
    result = evaluate_run(list(zip(query_ids, query_mat)), store, qrels, k=args.k)
    if args.run:
        write_run_tsv(result.run, args.run)
    if args.per_query:
        write_per_query_csv(result.per_query, args.per_query)
    if result.skipped:
        print(f"warning: {len(result.skipped)} queries lacked qrels entries", file=sys.stderr)
    print(f"evaluated {len(result.per_query)} queries")
    print(f"NDCG@10 {result.mean_ndcg:.4f}")
    return 0


def _ablation_plan(name: str, diag) -> tuple:
    """(layer_a, layer_u, use_cross) for one named ablation."""
    if name == "full":
        return diag.selected_a, diag.selected_u, True
    if name == "worst-au":
        return diag.worst_a(), diag.worst_u(), True
    if name == "self-only-a":
        return diag.selected_a, diag.selected_a, False
    if name == "self-only-u":
        return diag.selected_u, diag.selected_u, False
    if name == "embedding-only":
        return 0, 0, False
    raise AssertionError(name)


def cmd_ablate(args) -> int:
    from dataclasses import replace

    from .errors import ConfigError
    from .hidden_states import read_dump, read_pairs_tsv, read_qrels_tsv, read_train_examples
    from .space_analysis import sweep_layers
    from .training import train_loop
    from .lmort_core import encode as tuner_encode
    from .retrieval import build_store, evaluate_run

    names = [n.strip() for n in args.ablations.split(",")] if args.ablations else list(ABLATIONS)
    unknown = [n for n in names if n not in ABLATIONS]
    if unknown:
        raise ConfigError(f"unknown ablation names {unknown}; choose from {list(ABLATIONS)}")

    manifest = _build_manifest(args)
    if manifest.pairs is None:
        raise ConfigError("ablate needs a pairs path in the manifest for the layer sweep")
    records = read_dump(manifest.dump)
    examples = read_train_examples(manifest.train)
    pairs = read_pairs_tsv(manifest.pairs)
    qrels = read_qrels_tsv(args.qrels)
    diag = sweep_layers(records, pairs, records[0].layer_indices)
    query_ids = {ex.query_id for ex in examples}
    manifest.out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for name in names:
        layer_a, layer_u, use_cross = _ablation_plan(name, diag)
        tuner_cfg = replace(manifest.tuner, use_cross=use_cross)
        params, _ = train_loop(examples, records, layer_a, layer_u, tuner_cfg,
                               manifest.train_cfg,
                               checkpoint_dir=manifest.out_dir / name.replace("-", "_"))
        queries, passages = [], []
        for rec in records:
            vec = tuner_encode(rec.states[layer_a], rec.states[layer_u],
                               rec.attention_mask, params, tuner_cfg)
            (queries if rec.sequence_id in query_ids else passages).append(
                (rec.sequence_id, vec))
        store = build_store(passages, kind=manifest.train_cfg.similarity)
        result = evaluate_run(queries, store, qrels, k=args.k)
        rows.append((name, layer_a, layer_u, use_cross, result.mean_ndcg))
        print(f"{name}: layers a={layer_a} u={layer_u} cross={use_cross} "
              f"NDCG@10 {result.mean_ndcg:.4f}")

    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("ablation,layer_a,layer_u,use_cross,mean_ndcg\n")
        for name, la, lu, uc, score in rows:
            fh.write(f"{name},{la},{lu},{int(uc)},{score:.9g}\n")
    print(f"ablation table written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lmort", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--deterministic", action="store_true",
                        help="force single-threaded numeric kernels")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("emulate", help="generate a synthetic task and hidden-state dump")
    p.add_argument("--out", required=True, help="existing output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--passages", type=int, default=1000)
    p.add_argument("--positives", type=int, default=1)
    p.add_argument("--negatives", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.15)
    p.add_argument("--layers", default="all", help='"all" or comma-separated indices')
    p.add_argument("--vocab-size", type=int, default=256)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-layers", type=int, default=8)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--max-seq-len", type=int, default=64)
    p.add_argument("--alphabet-size", type=int, default=4)
    p.add_argument("--min-len", type=int, default=12)
    p.add_argument("--max-len", type=int, default=24)
    p.set_defaults(func=cmd_emulate)

    p = sub.add_parser("analyze", help="per-layer alignment/uniformity sweep")
    p.add_argument("--dump", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True, help="heatmap CSV path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="contrastive training from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--connection", choices=("a2u", "u2a"), default=None)
    p.add_argument("--blocks", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a dump through a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dump", required=True)
    p.add_argument("--out", required=True, help="VEC1 output path")
    p.add_argument("--ids", default=None, help="optional id-list file filter")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("search-eval", help="top-K search + NDCG@10 evaluation")
    p.add_argument("--queries", required=True, help="VEC1 of query vectors")
    p.add_argument("--store", required=True, help="VEC1 of passage vectors")
    p.add_argument("--qrels", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--similarity", choices=("cosine", "dot"), default="cosine")
    p.add_argument("--run", default=None, help="run TSV output path")
    p.add_argument("--per-query", default=None, help="per-query CSV output path")
    p.set_defaults(func=cmd_search_eval)

    p = sub.add_parser("ablate", help="train/evaluate the named ablations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out", required=True, help="comparison CSV path")
    p.add_argument("--ablations", default=None,
                   help=f"comma list from {', '.join(ABLATIONS)} (default: all)")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--connection", choices=("a2u", "u2a"), default=None)
    p.add_argument("--blocks", type=int, default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    if "LMORT_THREADS" in os.environ:
        _cap_threads(os.environ["LMORT_THREADS"])
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse handles --help and usage failures
        return int(exc.code or 0)
    if args.deterministic:
        _cap_threads("1")
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    from .errors import ConfigError, DataError, FormatError, NumericError

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
