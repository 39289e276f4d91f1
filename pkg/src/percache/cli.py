"""Command-line frontend: corpus ingestion, trace replay, report emission.

Exit codes: 0 success, 1 usage error, 2 data error. All runs with fixed
inputs are byte-for-byte reproducible; PERCACHE_SEED overrides the
model seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .config import ConfigError, EngineConfig
from .engine import DEFAULT_VOCAB_TOKENS, Engine, TraceError
from .knowledge import KnowledgeBank
from .textcore import TokenizerVocab

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

# frozen column order for the per-query replay report
CSV_COLUMNS = [
    "at",
    "text",
    "path",
    "best_similarity",
    "matched_count",
    "l_pre",
    "l_total",
    "prefill_flops",
    "decode_flops",
    "total_ms",
]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_config(path: str | None) -> EngineConfig:
    if path is None:
        return EngineConfig()
    return EngineConfig.from_file(path)


def cmd_ingest(args) -> int:
    corpus = Path(args.corpus)
    if not corpus.is_file():
        print(f"corpus file not readable: {corpus}", file=sys.stderr)
        return EXIT_DATA
    try:
        config = _load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"bad config: {exc}", file=sys.stderr)
        return EXIT_DATA
    bank_dir = Path(args.bank)
    if config.vocab_file:
        vocab = TokenizerVocab.from_file(config.vocab_file)
    elif (bank_dir / "vocab.txt").exists():
        vocab = TokenizerVocab.from_file(bank_dir / "vocab.txt")
    else:
        vocab = TokenizerVocab(DEFAULT_VOCAB_TOKENS)
    if (bank_dir / "manifest.jsonl").exists():
        bank = KnowledgeBank.load(
            bank_dir, vocab, limit_bytes=config.qkv_limit_bytes,
            k_boundary=config.k_boundary, chunk_words_count=config.chunk_words,
        )
    else:
        bank = KnowledgeBank(
            bank_dir, vocab, limit_bytes=config.qkv_limit_bytes,
            k_boundary=config.k_boundary, chunk_words_count=config.chunk_words,
        )
    chunks = bank.ingest_text(corpus.read_text(encoding="utf-8"))
    bank.persist()
    print(f"{len(chunks)} chunks")
    return EXIT_OK


def _read_trace(path: Path) -> list[dict]:
    events = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            event = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceError(f"{path}:{lineno}: malformed trace line: {exc}") from exc
        if not isinstance(event, dict):
            raise TraceError(f"{path}:{lineno}: trace line must be a JSON object")
        event["_line"] = lineno
        events.append(event)
    return events


def cmd_replay(args) -> int:
    trace_path = Path(args.trace)
    if not trace_path.is_file():
        print(f"trace file not readable: {trace_path}", file=sys.stderr)
        return EXIT_DATA
    try:
        config = _load_config(args.config)
        events = _read_trace(trace_path)
    except (ConfigError, TraceError, OSError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_DATA
    engine = Engine(config, args.bank)
    try:
        for event in events:
            lineno = event.pop("_line")
            try:
                engine.apply_event(event)
            except (TraceError, KeyError) as exc:
                print(f"{trace_path}:{lineno}: {exc}", file=sys.stderr)
                return EXIT_DATA
    finally:
        out = Path(args.out)
        with open(out, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
            writer.writeheader()
            for record in engine.metrics:
                if record["kind"] == "query_arrival":
                    writer.writerow(record)
        metrics_path = Path(args.metrics) if args.metrics else out.with_suffix(".jsonl")
        engine.write_metrics(metrics_path)
    if args.persist:
        engine.persist()
    queries = [r for r in engine.metrics if r["kind"] == "query_arrival"]
    hits = sum(1 for r in queries if r["path"] == "qa_hit")
    print(f"{len(queries)} queries, {hits} qa hits, total flops {engine.flops_cum:.0f}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.metrics)
    if not path.is_file():
        print(f"metrics file not readable: {path}", file=sys.stderr)
        return EXIT_DATA
    records = []
    try:
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if line.strip():
                records.append(json.loads(line))
    except json.JSONDecodeError as exc:
        print(f"{path}:{lineno}: malformed metrics line: {exc}", file=sys.stderr)
        return EXIT_DATA
    queries = [r for r in records if r.get("kind") == "query_arrival"]
    by_path: dict[str, list[dict]] = {}
    for r in queries:
        by_path.setdefault(r["path"], []).append(r)
    qa_hit_rate = len(by_path.get("qa_hit", [])) / len(queries) if queries else 0.0
    qkv_hit_rate = len(by_path.get("qkv_partial", [])) / len(queries) if queries else 0.0
    rows = [("queries", len(queries)), ("qa_hit_rate", f"{qa_hit_rate:.4f}"),
            ("qkv_hit_rate", f"{qkv_hit_rate:.4f}")]
    for pathname in sorted(by_path):
        rs = by_path[pathname]
        mean_ms = sum(r["total_ms"] for r in rs) / len(rs)
        rows.append((f"mean_ms[{pathname}]", f"{mean_ms:.3f}"))
    if records:
        rows.append(("final_qa_used_bytes", records[-1].get("qa_used_bytes", 0)))
        rows.append(("final_qkv_used_bytes", records[-1].get("qkv_used_bytes", 0)))
    if args.csv:
        writer = csv.writer(sys.stdout)
        writer.writerow(["metric", "value"])
        for key, value in rows:
            writer.writerow([key, value])
    else:
        for key, value in rows:
            print(f"{key}: {value}")
        print("storage over time (at, qa_used_bytes, qkv_used_bytes):")
        for r in records:
            print(f"  {r.get('at')}\t{r.get('qa_used_bytes', 0)}\t{r.get('qkv_used_bytes', 0)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="percache", description="Predictive cache engine for RAG pipelines")
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="chunk and embed a corpus into a bank directory")
    p_ingest.add_argument("--corpus", required=True)
    p_ingest.add_argument("--bank", required=True)
    p_ingest.add_argument("--config", default=None)
    p_ingest.set_defaults(func=cmd_ingest)

    p_replay = sub.add_parser("replay", help="run a trace through the engine")
    p_replay.add_argument("--trace", required=True)
    p_replay.add_argument("--bank", required=True)
    p_replay.add_argument("--config", default=None)
    p_replay.add_argument("--out", required=True, help="per-query report CSV")
    p_replay.add_argument("--metrics", default=None, help="metrics JSONL (default: out with .jsonl)")
    p_replay.add_argument("--persist", action="store_true", help="persist caches after the run")
    p_replay.set_defaults(func=cmd_replay)

    p_report = sub.add_parser("report", help="summarize a metrics file")
    p_report.add_argument("--metrics", required=True)
    p_report.add_argument("--csv", action="store_true")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
