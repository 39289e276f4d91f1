"""Engine: end-to-end query serving, cache population, and trace replay.

Serving path: embed the query, try the QA bank at tau_query, otherwise
retrieve top-k chunks, reuse the longest cached QKV prefix, prefill the
remainder, decode, and populate both cache layers. Background work
(prediction, deferred answering, conversions) runs only on idle ticks
via the scheduler.

Everything is deterministic: one engine instance processes events
strictly sequentially, and identical traces, configs, and seeds yield
byte-identical metrics streams.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .backend import (
    CostModel,
    CostParams,
    CostReport,
    QkvTensors,
    ScriptedBackend,
    ToyModel,
    ToyModelConfig,
)
from .config import EngineConfig
from .knowledge import KnowledgeBank, Segment, StorageError
from .predictor import Predictor, render_template
from .qa import QaBank, QaEntry
from .retrieval import Retriever
from .scheduler import Scheduler
from .textcore import (
    HashEmbedder,
    TokenizerVocab,
    cosine_similarity,
    detokenize,
    tokenize,
)

QA_HIT = "qa_hit"
QKV_PARTIAL = "qkv_partial"
COLD_MISS = "cold_miss"

# Boundary-dependent default vocabulary: multi-word tokens can straddle
# chunk joins, but none contains a newline, so the system prompt (which
# ends with one) never blends into the first chunk.
DEFAULT_VOCAB_TOKENS = [
    "the meeting", "the budget", "the review", "at noon", "on friday",
    "on monday", "next week", "action items", "follow up", "due date",
    "meeting", "budget", "review", "project", "report", "team", "notes",
    "agenda", "friday", "monday", "noon", "week", "items", "plan",
    "the ", " the", "and ", "ing ", "ed ", "what ", "when ", "who ",
    "what", "when", "who", "how", "why", "is", "on", "at", "to", "of",
    "a", "e", "i", "o", "u", "s", "t", "n", "r", " ", "?", ".",
]


class TraceError(ValueError):
    """Malformed or out-of-order trace event."""


@dataclass(frozen=True)
class QueryOutcome:
    answer: str
    path: str  # QA_HIT | QKV_PARTIAL | COLD_MISS
    matched_count: int
    best_similarity: float
    cost: CostReport
    l_total: int = 0
    l_pre: int = 0
    discarded: int = 0


@dataclass(frozen=True)
class InferResult:
    answer: str | None
    cost: CostReport
    matched_count: int
    discarded: int
    l_total: int
    l_pre: int
    segments: list
    tokens: object
    full_tensors: QkvTensors
    chunk_ids: tuple[str, ...]


class ToyTextBackend:
    """Text backend that renders a prompt template and decodes with the
    toy model; used when config.backend == 'toy'."""

    def __init__(self, model: ToyModel, vocab: TokenizerVocab, eos_id: int, max_tokens: int = 16):
        self.model = model
        self.vocab = vocab
        self.eos_id = eos_id
        self.max_tokens = max_tokens

    def generate(self, template: str, slots: dict) -> str:
        prompt = render_template(template, slots)
        toks = tokenize(prompt, self.vocab)
        _, state = self.model.prefill(toks.tokens)
        ids = self.model.decode_ids(state, self.max_tokens, self.eos_id)
        return detokenize([i for i in ids if i != self.eos_id], self.vocab)


class Engine:
    def __init__(
        self,
        config: EngineConfig,
        bank_dir,
        vocab: TokenizerVocab | None = None,
        text_backend=None,
    ):
        self.config = config
        bank_dir = Path(bank_dir)
        if vocab is None:
            if config.vocab_file:
                vocab = TokenizerVocab.from_file(config.vocab_file)
            elif (bank_dir / "vocab.txt").exists():
                vocab = TokenizerVocab.from_file(bank_dir / "vocab.txt")
            else:
                vocab = TokenizerVocab(DEFAULT_VOCAB_TOKENS)
        self.vocab = vocab
        self.embedder = HashEmbedder()
        if (bank_dir / "manifest.jsonl").exists():
            self.bank = KnowledgeBank.load(
                bank_dir,
                vocab,
                self.embedder,
                config.qkv_limit_bytes,
                k_boundary=config.k_boundary,
                chunk_words_count=config.chunk_words,
            )
        else:
            self.bank = KnowledgeBank(
                bank_dir,
                vocab,
                self.embedder,
                config.qkv_limit_bytes,
                k_boundary=config.k_boundary,
                chunk_words_count=config.chunk_words,
            )
        self.retriever = Retriever(self.embedder, alpha=config.alpha_fusion)
        for chunk in self.bank.chunks.values():
            self.retriever.add_chunk(chunk.chunk_id, chunk.text, chunk.embedding)
        self.eos_id = vocab.size
        model_cfg = ToyModelConfig(
            layers=config.model_layers,
            heads=config.model_heads,
            head_dim=config.model_head_dim,
            vocab_size=vocab.size + 1,
            seed=config.seed,
        )
        self.model = ToyModel(model_cfg)
        self.cost_model = CostModel(
            model_cfg,
            CostParams(flops_per_ms=config.flops_per_ms, latency_scale=config.latency_scale),
        )
        qa_path = bank_dir / "qa.jsonl"
        if qa_path.exists():
            self.qa = QaBank.load(qa_path, config.qa_limit_bytes, self.embedder)
        else:
            self.qa = QaBank(config.qa_limit_bytes)
        if text_backend is None:
            if config.backend == "scripted":
                if config.script_file:
                    text_backend = ScriptedBackend.from_file(config.script_file)
                else:
                    text_backend = ScriptedBackend()
            else:
                text_backend = ToyTextBackend(self.model, vocab, self.eos_id)
        self.text_backend = text_backend
        self.predictor = Predictor(
            text_backend,
            stride=config.prediction_stride,
            abstract_cap_bytes=config.abstract_cap_bytes,
            buffer_size=config.buffer_size,
            t_batch=config.t_batch,
            t_quiet=config.t_quiet,
        )
        self.scheduler = Scheduler(self)
        self.deferred_queries: list[str] = []
        self.abstract_dirty = False
        self.metrics: list[dict] = []
        self.phase = "idle"
        self.qa_hits = 0
        self.qkv_hits = 0
        self.flops_cum = 0.0
        self._op = 0
        self._last_at: float | None = None

    def _seq(self) -> int:
        self._op += 1
        return self._op

    # -- core inference -----------------------------------------------------

    def _assemble(self, query: str, chunk_ids: list[str]) -> list[Segment]:
        segments = [Segment("system", self.config.system_prompt)]
        for cid in chunk_ids:
            segments.append(Segment("chunk", self.bank.chunks[cid].text + " ", cid))
        segments.append(Segment("query", query))
        return segments

    def _infer(self, query: str, decode: bool, use_prefix: bool = True) -> InferResult:
        """Retrieve, prefill (reusing the longest cached prefix), and
        optionally decode. Never mutates the caches."""
        ranked = self.retriever.retrieve_top_k(query, self.config.retrieval_k)
        chunk_ids = [r.chunk_id for r in ranked]
        segments = self._assemble(query, chunk_ids)
        full_text = "".join(s.text for s in segments)
        tokens = tokenize(full_text, self.vocab)
        prefix, matched, discarded = (None, 0, 0)
        if use_prefix and self.config.reuse_enabled:
            prefix, matched, discarded = self.bank.match_prefix(chunk_ids, self._seq())
        l_pre = prefix.prefix_token_count if prefix is not None else 0
        macs0 = self.model.mac_count
        suffix, state = self.model.prefill(tokens.tokens, prefix)
        prefill_flops = float(self.model.mac_count - macs0)
        answer = None
        decode_flops = 0.0
        if decode:
            macs0 = self.model.mac_count
            ids = self.model.decode_ids(state, self.config.max_decode_tokens, self.eos_id)
            decode_flops = float(self.model.mac_count - macs0)
            answer = detokenize([i for i in ids if i != self.eos_id], self.vocab)
        parts = ([prefix.tensors] if prefix is not None and prefix.prefix_token_count else []) + (
            [suffix] if suffix.token_count else []
        )
        full = QkvTensors.concat(parts) if parts else suffix
        p = self.cost_model.params
        loaded = (matched + 1) if prefix is not None else 0
        cost = CostReport(
            prefill_flops=prefill_flops,
            decode_flops=decode_flops,
            prefill_ms=prefill_flops / p.flops_per_ms,
            decode_ms=decode_flops / p.flops_per_ms,
            match_ms=p.latency_scale * (p.qkv_match_ms if use_prefix and self.config.reuse_enabled else 0.0),
            load_ms=p.latency_scale * p.qkv_load_ms * loaded,
            embed_ms=p.latency_scale * p.embed_ms,
        )
        return InferResult(
            answer, cost, matched, discarded, len(tokens), l_pre,
            segments, tokens, full, tuple(chunk_ids),
        )

    def _populate_qkv(self, result: InferResult, allow_evict: bool = True) -> list[int]:
        try:
            return self.bank.slice_and_insert(
                result.segments, result.tokens, result.full_tensors, self._seq(),
                allow_evict=allow_evict,
            )
        except StorageError:
            return []

    # -- serving path ---------------------------------------------------------

    def handle_query(self, text: str, now: float) -> QueryOutcome:
        self.phase = "serve"
        self.predictor.phase = "serve"
        try:
            p = self.cost_model.params
            embedding = self.embedder.embed(text)
            entry, best_sim = (None, -1.0)
            if self.config.qa_enabled:
                entry, best_sim = self.qa.match(embedding, self.config.tau_query, self._seq())
            if entry is not None:
                self.qa_hits += 1
                if self.qa.get(text) is None and text not in self.deferred_queries:
                    self.deferred_queries.append(text)
                self.predictor.note_user_query(text, now)
                cost = CostReport(
                    match_ms=p.latency_scale * p.question_match_ms,
                    embed_ms=p.latency_scale * p.embed_ms,
                )
                return QueryOutcome(entry.answer, QA_HIT, 0, best_sim, cost)
            result = self._infer(text, decode=True)
            cost = result.cost.add(
                CostReport(match_ms=p.latency_scale * p.question_match_ms if self.config.qa_enabled else 0.0)
            )
            if self.config.reuse_enabled:
                self._populate_qkv(result)
            if self.config.qa_enabled:
                self.qa.insert(text, embedding, result.answer, self._seq())
            self.predictor.note_user_query(text, now)
            if result.l_pre > 0:
                self.qkv_hits += 1
                path = QKV_PARTIAL
            else:
                path = COLD_MISS
            return QueryOutcome(
                result.answer, path, result.matched_count, best_sim, cost,
                result.l_total, result.l_pre, result.discarded,
            )
        finally:
            self.phase = "idle"
            self.predictor.phase = "idle"

    # -- ingestion -------------------------------------------------------------

    def ingest_chunks(self, texts: list[str], now: float) -> tuple[list[str], list[str]]:
        """Chunk and store new knowledge; returns (all chunk ids touched,
        QA entries marked stale by refresh)."""
        new_chunks = []
        all_ids = []
        for text in texts:
            for chunk in self.bank.ingest_text(text):
                all_ids.append(chunk.chunk_id)
                before = len(self.retriever)
                self.retriever.add_chunk(chunk.chunk_id, chunk.text, chunk.embedding)
                if len(self.retriever) > before:
                    new_chunks.append(chunk)
        stale = []
        if new_chunks:
            new_ids = {c.chunk_id for c in new_chunks}
            stale = [
                e.query
                for e in self.qa.refresh(new_ids, self._cosine_rank, self.config.k_refresh)
            ]
            self.predictor.note_chunks(new_chunks, now)
        return all_ids, stale

    def _cosine_rank(self, query: str) -> list[str]:
        emb = self.embedder.embed(query)
        scored = sorted(
            ((cosine_similarity(emb, c.embedding), cid) for cid, c in self.bank.chunks.items()),
            key=lambda t: (-t[0], t[1]),
        )
        return [cid for _, cid in scored]

    # -- scheduler hooks ---------------------------------------------------------

    def answer_and_store(self, text: str) -> CostReport:
        """Decode the true answer for a deferred QA-hit query and store it
        as a new entry (the matched entry is left untouched)."""
        result = self._infer(text, decode=True)
        if self.config.reuse_enabled:
            self._populate_qkv(result)
        self.qa.insert(text, self.embedder.embed(text), result.answer, self._seq())
        return result.cost

    def reanswer_entry(self, entry: QaEntry) -> CostReport:
        """Fill or regenerate the answer of an existing entry in place."""
        result = self._infer(entry.query, decode=True)
        if self.config.reuse_enabled:
            self._populate_qkv(result)
        entry.answer = result.answer
        entry.stale = False
        entry.last_used = self._seq()
        return result.cost

    def populate_predicted(self, query: str, decode: bool) -> CostReport | None:
        """Cache population for one predicted query under the active
        strategy; skipped when an answered entry already exists."""
        existing = self.qa.get(query)
        if existing is not None and (existing.answer is not None or not decode):
            return None
        result = self._infer(query, decode=decode)
        if self.config.reuse_enabled:
            self._populate_qkv(result)
        self.qa.insert(query, self.embedder.embed(query), result.answer, self._seq())
        return result.cost

    def restore_evicted_slices(self, budget_ok) -> tuple[list[int], CostReport]:
        """QA->QKV conversion: for entries whose retrieval path has evicted
        slices, re-run prefill and re-insert; writes are refused rather
        than allowed to evict, and payloads must hash-match the originals."""
        restored: list[int] = []
        total = CostReport()

        def has_absent() -> bool:
            return any((not n.present) and n.payload_sha for n in self.bank.nodes.values())

        if not has_absent():
            return restored, total
        for entry in sorted(self.qa.entries, key=lambda e: (e.created_at, e.query)):
            if not budget_ok() or not has_absent():
                break
            result = self._infer(entry.query, decode=False)
            written = self._populate_qkv(result, allow_evict=False)
            restored.extend(written)
            total = total.add(result.cost)
        return restored, total

    # -- trace replay ---------------------------------------------------------

    def apply_event(self, event: dict) -> dict:
        at = event.get("at")
        kind = event.get("kind")
        if not isinstance(at, (int, float)) or kind is None:
            raise TraceError("event needs numeric 'at' and 'kind'")
        if self._last_at is not None and at < self._last_at:
            raise TraceError(f"out-of-order event at {at} after {self._last_at}")
        self._last_at = at
        record: dict = {"at": at, "kind": kind}
        if kind == "query_arrival":
            outcome = self.handle_query(event["text"], at)
            self.flops_cum += outcome.cost.total_flops
            record.update(
                text=event["text"],
                path=outcome.path,
                answer=outcome.answer,
                best_similarity=outcome.best_similarity,
                matched_count=outcome.matched_count,
                discarded=outcome.discarded,
                l_total=outcome.l_total,
                l_pre=outcome.l_pre,
                prefill_flops=outcome.cost.prefill_flops,
                decode_flops=outcome.cost.decode_flops,
                total_ms=outcome.cost.total_ms,
            )
        elif kind == "chunk_arrival":
            ids, stale = self.ingest_chunks([event["text"]], at)
            record.update(chunk_ids=ids, stale_marked=stale)
        elif kind == "config_change":
            field, value = event["field"], event["value"]
            self.config.apply(field, str(value))
            if field == "qkv_limit_bytes":
                record["evicted_nodes"] = self.bank.set_limit(self.config.qkv_limit_bytes, self._seq())
            elif field == "qa_limit_bytes":
                record["evicted_entries"] = [
                    e.query for e in self.qa.set_limit(self.config.qa_limit_bytes)
                ]
            record.update(field=field, value=value)
        elif kind == "idle_tick":
            report = self.scheduler.idle_tick(float(event.get("budget", 0.0)), at)
            self.flops_cum += report.flops_spent
            record.update(report.as_dict())
        else:
            raise TraceError(f"unknown event kind: {kind}")
        record.update(
            qa_entries=len(self.qa.entries),
            qa_used_bytes=self.qa.used_bytes,
            qkv_used_bytes=self.bank.ledger.used_bytes,
            qa_hits=self.qa_hits,
            qkv_hits=self.qkv_hits,
            flops_cum=self.flops_cum,
        )
        self.metrics.append(record)
        return record

    def run_trace(self, events: list[dict]) -> list[dict]:
        return [self.apply_event(e) for e in events]

    def persist(self) -> None:
        self.bank.persist()
        self.qa.persist(self.bank.directory / "qa.jsonl")

    def write_metrics(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.metrics:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
