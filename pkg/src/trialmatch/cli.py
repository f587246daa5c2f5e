"""Command-line interface.

Subcommands: synth, retrieve, run, eval, embed-cache. Exit codes: 0 success,
1 usage/config error, 2 data error, 3 runtime/provider error. Every
subcommand prints its resolved seed and config hash so runs can be replayed
byte-for-byte; pass --json for machine-readable stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .corpus import (
    DEFAULT_CHUNK_OVERLAP,
    DEFAULT_CHUNK_SIZE,
    SyntheticConfig,
    build_chunks,
    generate_synthetic,
    load_dataset,
    write_dataset,
)
from .embedding import (
    DEFAULT_MOCK_DIM,
    EmbeddingCache,
    ENDPOINT_ENV_VAR,
    embed_texts,
)
from .errors import (
    ConfigError,
    DataError,
    ProviderError,
    TrialMatchError,
    UndefinedMetricError,
)
from .harness import (
    ExperimentConfig,
    ProviderSpec,
    config_hash,
    run_task,
    write_outputs,
)
from .metrics import compute_report
from .retrieval import (
    DEFAULT_K_RETRIEVE,
    assemble_prompt,
    audit_rows,
    score_chunks,
    select_top_k,
)

logger = logging.getLogger("trialmatch.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    """Argparse reports usage problems with exit code 1, not its default 2."""

    def error(self, message: str):  # noqa: D401 - argparse hook
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_json_flag(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--json", action="store_true", help="emit machine-readable JSON on stdout"
    )


def _emit(args, human_lines: list[str], payload: dict) -> None:
    if args.json:
        print(json.dumps(payload))
    else:
        for line in human_lines:
            print(line)


def _provider_from_args(args) -> ProviderSpec:
    if args.provider == "mock":
        return ProviderSpec(kind="mock", dim=args.dim, seed=args.seed)
    return ProviderSpec(
        kind="http",
        dim=args.dim,
        endpoint=getattr(args, "endpoint", None),
        model=getattr(args, "model", None) or "default",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="trialmatch",
        description="Retrieval-augmented patient-trial matching toolkit",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"trialmatch {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser(
        "synth",
        help="generate a synthetic dataset",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_synth.add_argument("--out", required=True, help="output directory for the JSONL files")
    p_synth.add_argument("--trials", type=int, default=5, help="number of trials")
    p_synth.add_argument("--patients", type=int, default=100, help="patients per trial")
    p_synth.add_argument("--positive-frac", type=float, default=0.3, help="positive label fraction")
    p_synth.add_argument("--signal", type=float, default=0.9, help="signal strength in [0, 1]")
    p_synth.add_argument("--trial-shift", type=float, default=0.3, help="trial vocabulary shift in [0, 1]")
    p_synth.add_argument("--vocab", type=int, default=400, help="shared vocabulary size")
    p_synth.add_argument("--seed", type=int, default=0, help="generation seed")
    _add_json_flag(p_synth)

    p_retr = sub.add_parser(
        "retrieve",
        help="run chunking, embedding, scoring, and top-k selection only",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_retr.add_argument("--patients", required=True, help="patients.jsonl path")
    p_retr.add_argument("--trials", required=True, help="trials.jsonl path")
    p_retr.add_argument("--provider", choices=("mock", "http"), default="mock", help="embedding provider")
    p_retr.add_argument("--dim", type=int, default=DEFAULT_MOCK_DIM, help="embedding dimension")
    p_retr.add_argument("--seed", type=int, default=0, help="mock provider seed")
    p_retr.add_argument("--endpoint", default=None, help=f"http endpoint (or {ENDPOINT_ENV_VAR})")
    p_retr.add_argument("--model", default=None, help="model name for the http provider")
    p_retr.add_argument("--k", type=int, default=DEFAULT_K_RETRIEVE, help="chunks to select per patient")
    p_retr.add_argument("--chunk-size", type=int, default=DEFAULT_CHUNK_SIZE, help="chunk size in tokens")
    p_retr.add_argument("--overlap", type=int, default=DEFAULT_CHUNK_OVERLAP, help="chunk overlap in tokens")
    p_retr.add_argument("--modality", choices=("structured", "unstructured", "mixed"), default="mixed", help="which record parts to chunk")
    p_retr.add_argument("--audit", default=None, metavar="FILE", help="write the per-(chunk, criterion) audit CSV here")
    _add_json_flag(p_retr)

    p_run = sub.add_parser(
        "run",
        help="run an experiment task from a JSON config",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_run.add_argument("--config", required=True, help="experiment config JSON file")
    p_run.add_argument("--out", default=None, help="output directory (overrides config)")
    p_run.add_argument("--plots", action="store_true", help="also write SVG bar charts")
    p_run.add_argument("--threads", type=int, default=None, help="feature-construction threads (results are thread-count invariant)")
    _add_json_flag(p_run)

    p_eval = sub.add_parser(
        "eval",
        help="compute metrics from label and score files (one value per line)",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_eval.add_argument("--labels", required=True, help="file with one 0/1 label per line")
    p_eval.add_argument("--scores", required=True, help="file with one probability per line")
    p_eval.add_argument("--threshold", type=float, default=0.5, help="decision threshold (inclusive)")
    p_eval.add_argument("--seed", type=int, default=0, help="tie-break seed for average precision")
    _add_json_flag(p_eval)

    p_cache = sub.add_parser(
        "embed-cache",
        help="warm or inspect an on-disk embedding cache",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    cache_sub = p_cache.add_subparsers(dest="cache_command", required=True)
    p_warm = cache_sub.add_parser(
        "warm",
        help="embed texts and store them in the cache",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_warm.add_argument("--cache", required=True, help="cache file path")
    p_warm.add_argument("--texts", required=True, help="file with one text per line")
    p_warm.add_argument("--provider", choices=("mock", "http"), default="mock", help="embedding provider")
    p_warm.add_argument("--dim", type=int, default=DEFAULT_MOCK_DIM, help="embedding dimension")
    p_warm.add_argument("--seed", type=int, default=0, help="mock provider seed")
    p_warm.add_argument("--endpoint", default=None, help=f"http endpoint (or {ENDPOINT_ENV_VAR})")
    p_warm.add_argument("--model", default=None, help="model name for the http provider")
    _add_json_flag(p_warm)
    p_inspect = cache_sub.add_parser(
        "inspect",
        help="print cache header information",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_inspect.add_argument("--cache", required=True, help="cache file path")
    p_inspect.add_argument("--dim", type=int, default=DEFAULT_MOCK_DIM, help="expected dimension")
    p_inspect.add_argument("--keys", action="store_true", help="list cached keys")
    _add_json_flag(p_inspect)

    return parser


# ---------------------------------------------------------------------------
# Handlers
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    config = SyntheticConfig(
        n_trials=args.trials,
        patients_per_trial=args.patients,
        positive_fraction=args.positive_frac,
        signal_strength=args.signal,
        trial_shift=args.trial_shift,
        vocabulary_size=args.vocab,
    )
    dataset = generate_synthetic(config, args.seed)
    out = Path(args.out)
    write_dataset(dataset, out / "patients.jsonl", out / "trials.jsonl")
    resolved = {"synthetic": dict(config.__dict__), "seed": args.seed}
    digest = config_hash(resolved)
    n_pos = sum(p.label.value for p in dataset.patients)
    payload = {
        "seed": args.seed,
        "config_hash": digest,
        "trials": len(dataset.trials),
        "patients": len(dataset.patients),
        "positives": n_pos,
        "out": str(out),
    }
    _emit(
        args,
        [
            f"seed={args.seed} config_hash={digest}",
            f"wrote {len(dataset.patients)} patients ({n_pos} positive) across "
            f"{len(dataset.trials)} trials to {out}",
        ],
        payload,
    )
    return EXIT_OK


def _cmd_retrieve(args) -> int:
    if args.k < 1:
        raise ConfigError("--k must be at least 1")
    dataset = load_dataset(args.patients, args.trials)
    provider = _provider_from_args(args).build()

    resolved = {
        "provider": provider.descriptor.name,
        "dim": provider.descriptor.dim,
        "k": args.k,
        "chunk_size": args.chunk_size,
        "overlap": args.overlap,
        "modality": args.modality,
        "seed": args.seed,
    }
    digest = config_hash(resolved)

    criteria_cache: dict[str, tuple[list, list[np.ndarray]]] = {}
    all_audit_rows: list[dict] = []
    patients_payload: list[dict] = []
    lines = [
        f"k={args.k} provider={provider.descriptor.name} dim={provider.descriptor.dim} "
        f"seed={args.seed} config_hash={digest}"
    ]

    for patient in dataset.patients:
        chunks = build_chunks(patient, args.chunk_size, args.overlap, args.modality)
        if not chunks:
            lines.append(f"{patient.patient_id}: no retrievable text, skipped")
            patients_payload.append(
                {"patient_id": patient.patient_id, "selected": [], "skipped": True}
            )
            continue
        cached = criteria_cache.get(patient.trial_id)
        if cached is None:
            criteria = list(dataset.trial(patient.trial_id).criteria)
            cached = (criteria, embed_texts(provider, [c.text for c in criteria]))
            criteria_cache[patient.trial_id] = cached
        criteria, criteria_vectors = cached
        chunk_vectors = embed_texts(provider, [c.text for c in chunks])
        scored = score_chunks(chunks, chunk_vectors, criteria, criteria_vectors)
        selected = select_top_k(scored, args.k)
        selected_ids = {s.chunk_id for s in selected}
        if args.audit:
            all_audit_rows.extend(audit_rows(patient.patient_id, scored, selected_ids))
        listing = [
            {"chunk_id": s.chunk_id, "ordinal": s.ordinal, "score": s.aggregate_score}
            for s in selected
        ]
        patients_payload.append(
            {"patient_id": patient.patient_id, "selected": listing, "skipped": False}
        )
        shown = ", ".join(f"{s.chunk_id}({s.aggregate_score:.4f})" for s in selected)
        lines.append(f"{patient.patient_id}: {shown}")

    if args.audit:
        import csv as _csv

        audit_path = Path(args.audit)
        audit_path.parent.mkdir(parents=True, exist_ok=True)
        with audit_path.open("w", encoding="utf-8", newline="") as handle:
            writer = _csv.writer(handle, lineterminator="\n")
            writer.writerow(
                ["patient_id", "chunk_id", "criterion_id", "cosine", "aggregate", "selected"]
            )
            for row in all_audit_rows:
                writer.writerow(
                    [
                        row["patient_id"],
                        row["chunk_id"],
                        row["criterion_id"],
                        repr(row["cosine"]),
                        repr(row["aggregate"]),
                        str(row["selected"]).lower(),
                    ]
                )
        lines.append(f"audit written to {audit_path} ({len(all_audit_rows)} rows)")

    payload = {
        "seed": args.seed,
        "config_hash": digest,
        "k": args.k,
        "provider": provider.descriptor.name,
        "patients": patients_payload,
        "audit_rows": len(all_audit_rows) if args.audit else None,
    }
    _emit(args, lines, payload)
    return EXIT_OK


def _cmd_run(args) -> int:
    config = ExperimentConfig.from_json_file(args.config)
    overrides = {}
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        overrides["threads"] = args.threads
    if overrides:
        config = ExperimentConfig.from_dict({**config.to_dict(), **overrides})

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(
        logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    )
    root = logging.getLogger("trialmatch")
    previous_level = root.level
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    try:
        results, table = run_task(config)
        manifest = write_outputs(results, config.output_dir, config, plots=args.plots)
    finally:
        root.removeHandler(handler)
        root.setLevel(previous_level)
        handler.close()

    digest = manifest["config_hash"]
    seeds = sorted({r.seed for r in results})
    lines = [f"seed={seeds} config_hash={digest}", f"wrote {len(results)} runs to {config.output_dir}"]
    for row in table:
        auroc = "absent" if row["auroc"] is None else f"{row['auroc']:.4f}"
        tag = row["variant"]
        if row["trial"]:
            tag += f" trial={row['trial']} excl={row['exclusion']:g}"
        if row["dataset"] and row["dataset"] != "dataset":
            tag += f" dataset={row['dataset']}"
        lines.append(f"  {tag}: macro_f1={row['macro_f1']:.4f} auroc={auroc}")
    payload = {
        "seed": seeds,
        "config_hash": digest,
        "output_dir": str(config.output_dir),
        "runs": len(results),
        "table": table,
    }
    _emit(args, lines, payload)
    return EXIT_OK


def _read_column(path: str, what: str) -> list[float]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} file not found: {p}")
    values = []
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            values.append(float(line))
        except ValueError as exc:
            raise DataError(f"{p}:{lineno}: not a number: {line!r}") from exc
    if not values:
        raise DataError(f"{p}: no values")
    return values


def _cmd_eval(args) -> int:
    labels = _read_column(args.labels, "labels")
    scores = _read_column(args.scores, "scores")
    if len(labels) != len(scores):
        raise DataError(
            f"length mismatch: {len(labels)} labels vs {len(scores)} scores"
        )
    report = compute_report(labels, scores, threshold=args.threshold, tie_seed=args.seed)
    resolved = {"threshold": args.threshold, "tie_seed": args.seed, "n": report.n}
    digest = config_hash(resolved)
    if report.auroc is None or report.auprc is None:
        print(
            "warning: some metrics are undefined for single-class input and "
            "reported as absent",
            file=sys.stderr,
        )
    payload = {"seed": args.seed, "config_hash": digest, "report": report.to_dict()}
    if args.json:
        print(json.dumps(payload))
    else:
        print(f"seed={args.seed} config_hash={digest} threshold={args.threshold}")
        print(report.to_json())
    return EXIT_OK


def _cmd_embed_cache(args) -> int:
    if args.cache_command == "warm":
        texts = [
            line
            for line in Path(args.texts).read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        if not texts:
            raise DataError(f"{args.texts}: no texts to embed")
        provider = _provider_from_args(args).build()
        cache = EmbeddingCache(args.cache, provider.descriptor.dim)
        fresh = [t for t in texts if t not in cache]
        if fresh:
            for text, vector in zip(fresh, embed_texts(provider, fresh)):
                cache.store(text, vector)
        cache.save()
        resolved = {
            "provider": provider.descriptor.name,
            "dim": provider.descriptor.dim,
            "seed": getattr(args, "seed", 0),
        }
        digest = config_hash(resolved)
        payload = {
            "seed": getattr(args, "seed", 0),
            "config_hash": digest,
            "cache": str(args.cache),
            "stored": len(fresh),
            "total": len(cache),
        }
        _emit(
            args,
            [
                f"seed={payload['seed']} config_hash={digest}",
                f"stored {len(fresh)} new embeddings ({len(cache)} total) in {args.cache}",
            ],
            payload,
        )
        return EXIT_OK

    cache = EmbeddingCache(args.cache, args.dim)
    payload = {
        "cache": str(args.cache),
        "dim": cache.dim,
        "count": len(cache),
    }
    if args.keys:
        payload["keys"] = sorted(cache.keys())
    lines = [f"cache={args.cache} dim={cache.dim} count={len(cache)}"]
    if args.keys:
        lines.extend(f"  {key}" for key in sorted(cache.keys()))
    _emit(args, lines, payload)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    handlers = {
        "synth": _cmd_synth,
        "retrieve": _cmd_retrieve,
        "run": _cmd_run,
        "eval": _cmd_eval,
        "embed-cache": _cmd_embed_cache,
    }
    handler = handlers[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ProviderError as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except UndefinedMetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrialMatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
