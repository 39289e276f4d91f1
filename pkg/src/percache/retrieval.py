"""Hybrid lexical + semantic ranking of knowledge chunks.

BM25 over lowercase word terms is fused with cosine similarity of the
hashed embeddings via weighted min-max normalization. Exact scan only:
personal corpora are small, so no ANN index.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import math

from .textcore import Embedding, HashEmbedder, cosine_similarity, split_words

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DEFAULT_ALPHA = 0.5


@dataclass(frozen=True)
class RankedChunk:
    chunk_id: str
    bm25: float
    semantic: float
    fused: float


@dataclass
class CorpusStats:
    """Incremental per-corpus BM25 statistics (doc count, lengths, term df)."""

    doc_count: int = 0
    total_len: int = 0
    doc_freq: Counter = field(default_factory=Counter)

    @property
    def avg_doc_len(self) -> float:
        return self.total_len / self.doc_count if self.doc_count else 0.0

    def add_document(self, terms: list[str]) -> None:
        self.doc_count += 1
        self.total_len += len(terms)
        for t in set(terms):
            self.doc_freq[t] += 1

    def idf(self, term: str) -> float:
        if self.doc_count == 0:
            return 0.0
        df = self.doc_freq.get(term, 0)
        return math.log(1.0 + (self.doc_count - df + 0.5) / (df + 0.5))


def bm25_score(
    query_terms: Counter,
    doc_terms: Counter,
    doc_len: int,
    stats: CorpusStats,
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
) -> float:
    """Standard BM25. Empty corpus scores 0 for every document."""
    if stats.doc_count == 0:
        return 0.0
    score = 0.0
    avgdl = stats.avg_doc_len
    for term, qtf in query_terms.items():
        tf = doc_terms.get(term, 0)
        if tf == 0:
            continue
        denom = tf + k1 * (1.0 - b + b * doc_len / avgdl) if avgdl > 0 else tf + k1
        score += qtf * stats.idf(term) * tf * (k1 + 1.0) / denom
    return score


def minmax(scores: list[float]) -> list[float]:
    """Min-max normalize; an all-equal vector maps to 0.5 everywhere."""
    lo, hi = min(scores), max(scores)
    if hi == lo:
        return [0.5] * len(scores)
    return [(s - lo) / (hi - lo) for s in scores]


class Retriever:
    """Exact-scan hybrid retriever over the chunk corpus.

    Reads are safe concurrently; corpus mutation is single-writer
    (enforced by the engine).
    """

    def __init__(
        self,
        embedder: HashEmbedder | None = None,
        k1: float = DEFAULT_K1,
        b: float = DEFAULT_B,
        alpha: float = DEFAULT_ALPHA,
    ):
        self.embedder = embedder or HashEmbedder()
        self.k1 = k1
        self.b = b
        self.alpha = alpha
        self.stats = CorpusStats()
        self._docs: dict[str, tuple[Counter, int, Embedding]] = {}

    def __len__(self) -> int:
        return len(self._docs)

    def add_chunk(self, chunk_id: str, text: str, embedding: Embedding) -> None:
        if chunk_id in self._docs:
            return
        terms = split_words(text)
        self._docs[chunk_id] = (Counter(terms), len(terms), embedding)
        self.stats.add_document(terms)

    def retrieve_top_k(self, query: str, k: int) -> list[RankedChunk]:
        if k <= 0:
            raise ValueError("k must be a positive integer")
        if not self._docs:
            return []
        query_terms = Counter(split_words(query))
        query_emb = self.embedder.embed(query)
        ids = sorted(self._docs)
        bm25 = [
            bm25_score(query_terms, self._docs[i][0], self._docs[i][1], self.stats, self.k1, self.b)
            for i in ids
        ]
        semantic = [cosine_similarity(query_emb, self._docs[i][2]) for i in ids]
        mm_bm25 = minmax(bm25)
        mm_sem = minmax(semantic)
        ranked = [
            RankedChunk(i, bm25[j], semantic[j], self.alpha * mm_bm25[j] + (1.0 - self.alpha) * mm_sem[j])
            for j, i in enumerate(ids)
        ]
        ranked.sort(key=lambda r: (-r.fused, r.chunk_id))
        return ranked[:k]
