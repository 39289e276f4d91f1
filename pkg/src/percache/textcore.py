"""Deterministic tokenization, embedding, and similarity primitives.

The tokenizer is a greedy longest-match segmenter over an explicit
vocabulary with a single-byte fallback, which makes it deliberately
boundary-dependent: tokenize(a) ++ tokenize(b) need not equal
tokenize(a ++ b). The rest of the system is built to stay correct in
spite of that.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

import numpy as np

EMBED_DIM = 256
EMBED_SEED = 0x5ECAC4E

_WORD_RE = re.compile(r"[0-9a-z]+")


def split_words(text: str) -> list[str]:
    """Lowercase word split shared by the embedder and BM25 term extraction."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class TokenSeq:
    """Token ids plus the (start, end) byte offsets of each token in the source."""

    tokens: tuple[int, ...]
    byte_spans: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.byte_spans):
            raise ValueError("tokens and byte_spans length mismatch")
        pos = 0
        for start, end in self.byte_spans:
            if start != pos or end <= start:
                raise ValueError("byte_spans must be contiguous and non-empty")
            pos = end

    def __len__(self) -> int:
        return len(self.tokens)


class TokenizerVocab:
    """Greedy-matcher vocabulary: explicit tokens plus implicit byte fallbacks.

    Explicit tokens get ids 0..n-1 in canonical order (descending byte
    length, then lexicographic); byte b gets id n + b. Every byte is thus
    always representable and tokenization is total.
    """

    def __init__(self, tokens: list[str]):
        seen: dict[bytes, int] = {}
        for t in tokens:
            bt = t.encode("utf-8")
            if not bt:
                continue
            if bt not in seen:
                seen[bt] = len(seen)
        ordered = sorted(seen, key=lambda b: (-len(b), b))
        self._id_by_bytes: dict[bytes, int] = {b: i for i, b in enumerate(ordered)}
        self._bytes_by_id: list[bytes] = ordered + [bytes([b]) for b in range(256)]
        self._byte_base = len(ordered)
        self._by_length: dict[int, dict[bytes, int]] = {}
        for b, i in self._id_by_bytes.items():
            self._by_length.setdefault(len(b), {})[b] = i
        self._lengths = sorted(self._by_length, reverse=True)
        self.max_token_len = self._lengths[0] if self._lengths else 1

    @property
    def size(self) -> int:
        return self._byte_base + 256

    @classmethod
    def from_file(cls, path) -> "TokenizerVocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(tokens)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for b in self._bytes_by_id[: self._byte_base]:
                fh.write(b.decode("utf-8") + "\n")

    def token_bytes(self, token_id: int) -> bytes:
        return self._bytes_by_id[token_id]

    def match_at(self, data: bytes, pos: int) -> tuple[int, int]:
        """Longest vocabulary match at byte offset pos; falls back to one byte."""
        remaining = len(data) - pos
        for length in self._lengths:
            if length > remaining:
                continue
            tid = self._by_length[length].get(data[pos : pos + length])
            if tid is not None:
                return tid, length
        return self._byte_base + data[pos], 1


def tokenize(text: str, vocab: TokenizerVocab) -> TokenSeq:
    """Greedy longest-match segmentation over UTF-8 bytes. Deterministic and total."""
    data = text.encode("utf-8")
    tokens: list[int] = []
    spans: list[tuple[int, int]] = []
    pos = 0
    while pos < len(data):
        tid, length = vocab.match_at(data, pos)
        tokens.append(tid)
        spans.append((pos, pos + length))
        pos += length
    return TokenSeq(tuple(tokens), tuple(spans))


def detokenize(tokens, vocab: TokenizerVocab) -> str:
    return b"".join(vocab.token_bytes(t) for t in tokens).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class Embedding:
    """Unit-norm feature vector. degenerate marks the canonical fallback."""

    values: np.ndarray
    degenerate: bool = False

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def cosine_similarity(a: Embedding, b: Embedding) -> float:
    """Cosine similarity of two embeddings; inputs are unit-norm so this is a dot."""
    if a.dim != b.dim:
        raise ValueError(f"embedding dimension mismatch: {a.dim} != {b.dim}")
    return float(np.clip(np.dot(a.values, b.values), -1.0, 1.0))


class HashEmbedder:
    """Seeded feature-hash of word unigrams and bigrams into a fixed dimension.

    Deterministic across machines and runs. Real embedding models can be
    plugged in behind the same embed(text) -> Embedding surface.
    """

    def __init__(self, dim: int = EMBED_DIM, seed: int = EMBED_SEED):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self._key = seed.to_bytes(8, "little", signed=False)

    def _feature(self, feature: str) -> tuple[int, float]:
        h = hashlib.blake2b(feature.encode("utf-8"), key=self._key, digest_size=8)
        v = int.from_bytes(h.digest(), "little")
        index = v % self.dim
        sign = 1.0 if (v >> 63) & 1 == 0 else -1.0
        return index, sign

    def embed(self, text: str) -> Embedding:
        words = split_words(text)
        vec = np.zeros(self.dim, dtype=np.float64)
        features = list(words)
        features.extend(f"{a} {b}" for a, b in zip(words, words[1:]))
        for f in features:
            index, sign = self._feature(f)
            vec[index] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            unit = np.zeros(self.dim, dtype=np.float64)
            unit[0] = 1.0
            return Embedding(unit, degenerate=True)
        return Embedding(vec / norm)


_default_embedder = HashEmbedder()


def embed(text: str) -> Embedding:
    """Embed with the default seeded hash embedder."""
    return _default_embedder.embed(text)
