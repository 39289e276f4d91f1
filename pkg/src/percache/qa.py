"""Semantic question-answer bank.

Entries map a past or predicted query to its decoded answer. Lookup is
cosine similarity against the query embedding with a strict threshold. Answer-less entries (query
predicted but not yet decoded) and stale entries (grounding chunks
superseded by new knowledge) are never served; they are completed or
re-decoded at idle ticks.

Accounting is flat: every entry charges the same configured byte size,
and eviction is LFU over per-entry use counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .textcore import Embedding, HashEmbedder, cosine_similarity

DEFAULT_ENTRY_BYTES = 4096


class QaCapacityError(RuntimeError):
    """The QA byte budget cannot hold even a single entry."""


@dataclass
class QaEntry:
    query: str
    embedding: Embedding
    answer: str | None
    created_at: int
    last_used: int
    use_count: int = 0
    stale: bool = False

    @property
    def servable(self) -> bool:
        return self.answer is not None and not self.stale


class QaBank:
    def __init__(self, limit_bytes: int, entry_bytes: int = DEFAULT_ENTRY_BYTES):
        self.limit_bytes = limit_bytes
        self.entry_bytes = entry_bytes
        self.entries: list[QaEntry] = []
        self._by_query: dict[str, QaEntry] = {}

    @property
    def used_bytes(self) -> int:
        return len(self.entries) * self.entry_bytes

    def get(self, query: str) -> QaEntry | None:
        return self._by_query.get(query)

    def match(self, embedding: Embedding, tau: float, now: int) -> tuple[QaEntry | None, float]:
        """Best servable entry strictly above tau.

        Returns (entry or None, best similarity over servable entries);
        the similarity is -1.0 when no entry is servable. A hit bumps
        use_count and last_used.
        """
        best: QaEntry | None = None
        best_sim = -1.0
        for entry in self.entries:
            if not entry.servable:
                continue
            sim = cosine_similarity(embedding, entry.embedding)
            if sim > best_sim or (sim == best_sim and best is not None and entry.created_at < best.created_at):
                best, best_sim = entry, sim
        if best is not None and best_sim > tau:
            best.use_count += 1
            best.last_used = now
            return best, best_sim
        return None, best_sim

    def insert(
        self,
        query: str,
        embedding: Embedding,
        answer: str | None,
        now: int,
    ) -> list[QaEntry]:
        """Insert or update; returns evicted entries.

        Exact-text duplicates replace in place keeping the larger
        use_count; a decoded answer is never replaced by an answer-less
        insert for the same text.
        """
        existing = self._by_query.get(query)
        if existing is not None:
            if answer is None and existing.answer is not None:
                return []
            existing.answer = answer
            existing.last_used = now
            if answer is not None:
                existing.stale = False
            return []
        if self.entry_bytes > self.limit_bytes:
            raise QaCapacityError("qa_limit_bytes smaller than one entry")
        evicted: list[QaEntry] = []
        while (len(self.entries) + 1) * self.entry_bytes > self.limit_bytes:
            victim = min(self.entries, key=lambda e: (e.use_count, e.last_used, e.created_at, e.query))
            self._remove(victim)
            evicted.append(victim)
        entry = QaEntry(query, embedding, answer, now, now)
        self.entries.append(entry)
        self._by_query[query] = entry
        return evicted

    def _remove(self, entry: QaEntry) -> None:
        self.entries.remove(entry)
        del self._by_query[entry.query]

    def set_limit(self, limit_bytes: int) -> list[QaEntry]:
        """Change the byte budget; shrinking evicts LFU immediately."""
        self.limit_bytes = limit_bytes
        evicted: list[QaEntry] = []
        while self.entries and self.used_bytes > self.limit_bytes:
            victim = min(self.entries, key=lambda e: (e.use_count, e.last_used, e.created_at, e.query))
            self._remove(victim)
            evicted.append(victim)
        if self.used_bytes > self.limit_bytes:
            raise QaCapacityError("qa_limit_bytes smaller than one entry")
        return evicted

    def refresh(self, new_chunk_ids: set[str], rank: "callable", k_refresh: int) -> list[QaEntry]:
        """Mark entries stale when newly ingested chunks displace their grounding.

        rank(query) must return chunk ids in ranked order over the full
        corpus; an entry goes stale if any new chunk lands in the top
        k_refresh. Returns the entries marked stale.
        """
        marked = []
        for entry in self.entries:
            if entry.answer is None or entry.stale:
                continue
            top = list(rank(entry.query))[:k_refresh]
            if any(cid in new_chunk_ids for cid in top):
                entry.stale = True
                marked.append(entry)
        return marked

    def pending(self) -> list[QaEntry]:
        """Entries needing decode work (answer-less or stale), oldest first."""
        todo = [e for e in self.entries if e.answer is None or e.stale]
        todo.sort(key=lambda e: (e.created_at, e.query))
        return todo

    # -- persistence --------------------------------------------------------

    def persist(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(
                    json.dumps(
                        {
                            "query": e.query,
                            "answer": e.answer,
                            "decoded": e.answer is not None,
                            "created_at": e.created_at,
                            "last_used": e.last_used,
                            "use_count": e.use_count,
                            "stale": e.stale,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )

    @classmethod
    def load(
        cls,
        path,
        limit_bytes: int,
        embedder: HashEmbedder | None = None,
        entry_bytes: int = DEFAULT_ENTRY_BYTES,
    ) -> "QaBank":
        embedder = embedder or HashEmbedder()
        bank = cls(limit_bytes, entry_bytes)
        text = Path(path).read_text(encoding="utf-8")
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            entry = QaEntry(
                rec["query"],
                embedder.embed(rec["query"]),
                rec["answer"],
                rec["created_at"],
                rec["last_used"],
                rec["use_count"],
                rec["stale"],
            )
            bank.entries.append(entry)
            bank._by_query[entry.query] = entry
        if bank.used_bytes > limit_bytes:
            bank.set_limit(limit_bytes)
        return bank
