"""Dual-view query prediction.

Two independent views guess what the user will ask next: a knowledge
view prompting over a compact abstract of the ingested chunks, and a
history view prompting over a ring buffer of recent user queries. Both
run only during idle ticks (never on the query-serving path) and both
funnel through prompt templates stored as package data.

Backend responses are parsed from the numbered "1. ...?; 2. ...?"
format; the parser is total and drops malformed items.
"""

from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field
from importlib import resources

TEMPLATE_SUMMARIZE = "summarize"
TEMPLATE_KNOWLEDGE = "knowledge_prediction"
TEMPLATE_HISTORY = "history_prediction"

DEFAULT_KB_KIND = "meeting record"

_MARKER_RE = re.compile(r"^\s*\d+\s*[.)]\s*")


def load_template(name: str) -> str:
    return (
        resources.files("percache").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")
    )


def render_template(name: str, slots: dict) -> str:
    return load_template(name).format(**slots)


def parse_numbered_list(text: str) -> list[str]:
    """Parse '1. ...?; 2. ...?' responses. Total: malformed items are
    dropped, any input yields a (possibly empty) list."""
    out = []
    for part in text.split("; "):
        item = _MARKER_RE.sub("", part.strip())
        item = item.strip().strip("'\"").strip()
        if item.endswith("?") and len(item) > 1:
            out.append(item)
    return out


@dataclass
class KnowledgeAbstract:
    """Running one-sentence-per-batch summary of the knowledge bank."""

    cap_bytes: int = 4096
    sentences: list[str] = field(default_factory=list)
    source_chunk_ids: set[str] = field(default_factory=set)

    @property
    def text(self) -> str:
        return " ".join(self.sentences)

    @property
    def byte_len(self) -> int:
        return len(self.text.encode("utf-8"))


@dataclass(frozen=True)
class BufferedQuery:
    text: str
    at: float


class QueryBuffer:
    """Ring of the most recent user queries (predicted queries excluded)."""

    def __init__(self, size: int):
        if size < 1:
            raise ValueError("buffer size must be positive")
        self._ring: deque[BufferedQuery] = deque(maxlen=size)

    def add(self, text: str, at: float) -> None:
        self._ring.append(BufferedQuery(text, at))

    def __len__(self) -> int:
        return len(self._ring)

    def texts(self) -> list[str]:
        return [q.text for q in self._ring]


@dataclass(frozen=True)
class PredictionBatch:
    queries: tuple[str, ...]
    stride: int
    view: str  # "knowledge" | "history"


class PhaseError(AssertionError):
    """A background-only operation ran on the query-serving path."""


class Predictor:
    """Owns the abstract, the query buffer, and the two prediction views.

    Mutating operations run only while the engine is in its background
    phase (single writer); the phase flag is asserted on every call.
    """

    def __init__(
        self,
        backend,
        kb_kind: str = DEFAULT_KB_KIND,
        stride: int = 5,
        abstract_cap_bytes: int = 4096,
        buffer_size: int = 20,
        t_batch: float = 600.0,
        t_quiet: float = 300.0,
    ):
        self.backend = backend
        self.kb_kind = kb_kind
        self.stride = stride
        self.t_batch = t_batch
        self.t_quiet = t_quiet
        self.abstract = KnowledgeAbstract(abstract_cap_bytes)
        self.buffer = QueryBuffer(buffer_size)
        self.phase = "idle"
        self.parse_failures = 0
        self._pending: list = []  # chunks awaiting summarization
        self._retry: list = []  # chunks whose summarization missed
        self._last_chunk_at: float | None = None
        self._last_query_at: float | None = None
        self._history_dirty = False

    def _assert_idle(self) -> None:
        if self.phase != "idle":
            raise PhaseError("prediction work attempted during query serving")

    # -- triggers ------------------------------------------------------------

    def note_chunks(self, chunks, at: float) -> None:
        self._pending.extend(chunks)
        self._last_chunk_at = at

    def note_user_query(self, text: str, at: float) -> None:
        self.buffer.add(text, at)
        self._last_query_at = at
        self._history_dirty = True

    def batch_ready(self, now: float) -> bool:
        """New chunks pending and none arrived for t_batch."""
        pending = self._pending or self._retry
        return bool(pending) and (
            self._last_chunk_at is None or now - self._last_chunk_at >= self.t_batch
        )

    def history_ready(self, now: float) -> bool:
        """New user queries arrived and then t_quiet passed with none."""
        return (
            self._history_dirty
            and len(self.buffer) > 0
            and self._last_query_at is not None
            and now - self._last_query_at >= self.t_quiet
        )

    # -- abstract maintenance -------------------------------------------------

    def update_abstract(self, now: float) -> bool:
        """Summarize the pending chunk batch into one more abstract sentence.

        On a backend miss the batch is queued for retry and the abstract
        is unchanged. If the cap would be exceeded, the whole abstract is
        re-summarized through the same prompt exactly once (then hard
        byte-truncated as a last resort). Returns True if it changed.
        """
        self._assert_idle()
        batch = self._retry + self._pending
        if not batch:
            return False
        self._retry, self._pending = [], []
        chunk_text = " ".join(c.text for c in batch)
        response = self.backend.generate(TEMPLATE_SUMMARIZE, {"chunks": chunk_text}).strip()
        if not response:
            self._retry = batch
            return False
        self.abstract.sentences.append(response)
        self.abstract.source_chunk_ids.update(c.chunk_id for c in batch)
        if self.abstract.byte_len > self.abstract.cap_bytes:
            merged = self.backend.generate(
                TEMPLATE_SUMMARIZE, {"chunks": self.abstract.text}
            ).strip()
            if merged:
                self.abstract.sentences = [merged]
            while self.abstract.byte_len > self.abstract.cap_bytes and self.abstract.sentences:
                last = self.abstract.sentences[-1]
                trimmed = last.encode("utf-8")[: max(0, self.abstract.cap_bytes - 1)]
                self.abstract.sentences[-1] = trimmed.decode("utf-8", errors="ignore")
                if not self.abstract.sentences[-1]:
                    self.abstract.sentences.pop()
        return True

    # -- prediction views ------------------------------------------------------

    def predict_from_knowledge(self, stride: int | None = None) -> PredictionBatch:
        self._assert_idle()
        stride = stride or self.stride
        if not self.abstract.sentences:
            raise ValueError("abstract is empty")
        response = self.backend.generate(
            TEMPLATE_KNOWLEDGE,
            {"kb_kind": self.kb_kind, "abstract": self.abstract.text, "stride": str(stride)},
        )
        queries = parse_numbered_list(response)[:stride]
        if response and not queries:
            self.parse_failures += 1
        return PredictionBatch(tuple(queries), stride, "knowledge")

    def predict_from_history(
        self, known_query: "callable", stride: int | None = None
    ) -> PredictionBatch:
        """known_query(text) -> bool filters predictions already in the QA bank."""
        self._assert_idle()
        stride = stride or self.stride
        if len(self.buffer) == 0:
            raise ValueError("query buffer is empty")
        history = "; ".join(self.buffer.texts())
        response = self.backend.generate(
            TEMPLATE_HISTORY,
            {"kb_kind": self.kb_kind, "history": history, "stride": str(stride)},
        )
        queries = parse_numbered_list(response)[:stride]
        if response and not queries:
            self.parse_failures += 1
        self._history_dirty = False
        kept = tuple(q for q in queries if not known_query(q))
        return PredictionBatch(kept, stride, "history")
