"""Chunk store plus the QKV cache tree.

Tree nodes hold per-chunk Q/K/V tensor slices; a root-to-node path mirrors
the retrieved-chunk order of a past prompt. Because the tokenizer is
boundary-dependent, two prompts sharing a chunk prefix can tokenize the
last shared chunk differently. Two measures keep reuse safe:

* on insert, paths are merged only up to the second-to-last common node,
  so the last common node is duplicated per path;
* on match, the trailing k_boundary tokens of the final matched node are
  discarded and recomputed from raw text.

Eviction is LFU over per-node retrieval counts under a byte budget; an
evicted node keeps its metadata (and a payload digest) so a later
restoration can be verified bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backend import QkvPrefix, QkvTensors
from .textcore import Embedding, HashEmbedder, TokenSeq, TokenizerVocab, tokenize

log = logging.getLogger(__name__)

SLICE_MAGIC = b"PQKV"
SLICE_VERSION = 1
DEFAULT_CHUNK_WORDS = 100
DEFAULT_K_BOUNDARY = 4
SYSTEM_CHUNK_ID = ""


class StorageError(RuntimeError):
    """Storage budget cannot be satisfied."""


class LayoutError(ValueError):
    """Prompt layout does not tile the token sequence."""


def chunk_words(text: str, words_per_chunk: int = DEFAULT_CHUNK_WORDS) -> list[str]:
    """Split text into fixed-word-count segments with canonical spacing."""
    words = text.split()
    return [
        " ".join(words[i : i + words_per_chunk])
        for i in range(0, len(words), words_per_chunk)
    ]


def content_hash(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


@dataclass(frozen=True)
class KnowledgeChunk:
    chunk_id: str
    text: str
    embedding: Embedding
    token_count: int


@dataclass(frozen=True)
class Segment:
    """One prompt-layout element: the system prompt, a chunk, or the query."""

    kind: str  # "system" | "chunk" | "query"
    text: str
    chunk_id: str | None = None


# ---------------------------------------------------------------------------
# slice file format (binary, little-endian):
# magic "PQKV", u16 version, u16 layers, u16 heads, u16 head_dim,
# u32 token_count, 32-byte chunk content hash, then per layer Q, K, V
# as f32 row-major (token, head, dim).

_HEADER = struct.Struct("<4sHHHHI32s")


def serialize_slice(tensors: QkvTensors, chunk_hash: bytes) -> bytes:
    layers = tensors.layers
    tokens = tensors.token_count
    heads, head_dim = tensors.q[0].shape[1], tensors.q[0].shape[2]
    parts = [_HEADER.pack(SLICE_MAGIC, SLICE_VERSION, layers, heads, head_dim, tokens, chunk_hash)]
    for layer in range(layers):
        for arr in (tensors.q[layer], tensors.k[layer], tensors.v[layer]):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def deserialize_slice(data: bytes) -> tuple[QkvTensors, bytes]:
    if len(data) < _HEADER.size:
        raise ValueError("slice payload shorter than header")
    magic, version, layers, heads, head_dim, tokens, chunk_hash = _HEADER.unpack_from(data)
    if magic != SLICE_MAGIC or version != SLICE_VERSION:
        raise ValueError("bad slice magic/version")
    plane = tokens * heads * head_dim * 4
    expected = _HEADER.size + layers * 3 * plane
    if len(data) != expected:
        raise ValueError("slice payload length mismatch")
    qs, ks, vs = [], [], []
    offset = _HEADER.size
    for _ in range(layers):
        for dest in (qs, ks, vs):
            arr = np.frombuffer(data, dtype="<f4", count=tokens * heads * head_dim, offset=offset)
            dest.append(arr.reshape(tokens, heads, head_dim).astype(np.float32, copy=True))
            offset += plane
    return QkvTensors(qs, ks, vs), chunk_hash


# ---------------------------------------------------------------------------


@dataclass
class CacheTreeNode:
    node_id: int
    chunk_id: str
    parent: "CacheTreeNode | None"
    children: list = field(default_factory=list)
    slice_file: str | None = None
    byte_size: int = 0
    token_count: int = 0
    retrieval_count: int = 0
    last_used: int = 0
    payload_sha: str | None = None  # digest of the original payload, kept past eviction

    @property
    def present(self) -> bool:
        return self.slice_file is not None


@dataclass
class StorageLedger:
    used_bytes: int = 0
    limit_bytes: int = 1 << 34

    def check(self) -> None:
        if self.used_bytes > self.limit_bytes:
            raise StorageError(
                f"ledger breach: used {self.used_bytes} > limit {self.limit_bytes}"
            )


class KnowledgeBank:
    """Chunk store + QKV cache tree bound to a bank directory.

    Single-writer, multi-reader: match_prefix may run concurrently with
    other reads; insert/evict/persist need exclusive access.
    """

    def __init__(
        self,
        directory,
        vocab: TokenizerVocab,
        embedder: HashEmbedder | None = None,
        limit_bytes: int = 1 << 34,
        k_boundary: int = DEFAULT_K_BOUNDARY,
        discard_at_system_node: bool = False,
        chunk_words_count: int = DEFAULT_CHUNK_WORDS,
    ):
        self.directory = Path(directory)
        self.slice_dir = self.directory / "slices"
        self.slice_dir.mkdir(parents=True, exist_ok=True)
        self.vocab = vocab
        self.embedder = embedder or HashEmbedder()
        self.k_boundary = k_boundary
        self.discard_at_system_node = discard_at_system_node
        self.chunk_words_count = chunk_words_count
        self.ledger = StorageLedger(0, limit_bytes)
        self.chunks: dict[str, KnowledgeChunk] = {}
        self._text_to_id: dict[str, str] = {}
        self.root = CacheTreeNode(0, SYSTEM_CHUNK_ID, None)
        self.nodes: dict[int, CacheTreeNode] = {0: self.root}
        self._next_node_id = 1

    # -- chunk store --------------------------------------------------------

    def ingest_text(self, text: str) -> list[KnowledgeChunk]:
        """Chunk, embed, and store; identical text maps to the same chunk id."""
        out = []
        for part in chunk_words(text, self.chunk_words_count):
            existing = self._text_to_id.get(part)
            if existing is not None:
                out.append(self.chunks[existing])
                continue
            base = content_hash(part).hex()[:16]
            chunk_id = base
            suffix = 0
            while chunk_id in self.chunks:
                suffix += 1
                chunk_id = f"{base}-{suffix}"
            chunk = KnowledgeChunk(
                chunk_id,
                part,
                self.embedder.embed(part),
                len(tokenize(part, self.vocab)),
            )
            self.chunks[chunk_id] = chunk
            self._text_to_id[part] = chunk_id
            out.append(chunk)
        return out

    # -- layout helpers -----------------------------------------------------

    @staticmethod
    def segment_token_spans(segments: list[Segment], tokens: TokenSeq) -> list[tuple[int, int]]:
        """Token span per segment; a token belongs to the segment containing
        its start byte (a straddling token stays with the earlier segment)."""
        byte_bounds = [0]
        for seg in segments:
            byte_bounds.append(byte_bounds[-1] + len(seg.text.encode("utf-8")))
        if tokens.byte_spans and tokens.byte_spans[-1][1] != byte_bounds[-1]:
            raise LayoutError("layout does not tile the token byte range")
        if not tokens.byte_spans and byte_bounds[-1] != 0:
            raise LayoutError("layout does not tile the token byte range")
        spans = []
        tok = 0
        for i in range(len(segments)):
            start = tok
            while tok < len(tokens) and tokens.byte_spans[tok][0] < byte_bounds[i + 1]:
                tok += 1
            spans.append((start, tok))
        if tok != len(tokens):
            raise LayoutError("tokens extend past the layout")
        return spans

    # -- tree operations ----------------------------------------------------

    def _match_chain(self, chunk_ids: list[str], require_present: bool) -> list[CacheTreeNode]:
        """Longest chain under the root matching the chunk id list; duplicates
        are disambiguated by looking ahead for the deepest continuation."""

        def best(node: CacheTreeNode, i: int) -> list[CacheTreeNode]:
            if i >= len(chunk_ids):
                return []
            top: list[CacheTreeNode] = []
            for child in node.children:
                if child.chunk_id != chunk_ids[i]:
                    continue
                if require_present and not child.present:
                    continue
                chain = [child] + best(child, i + 1)
                if len(chain) > len(top):
                    top = chain
            return top

        return best(self.root, 0)

    def _new_node(self, parent: CacheTreeNode, chunk_id: str) -> CacheTreeNode:
        node = CacheTreeNode(self._next_node_id, chunk_id, parent)
        self._next_node_id += 1
        parent.children.append(node)
        self.nodes[node.node_id] = node
        return node

    def _slice_path(self, node: CacheTreeNode) -> Path:
        return self.slice_dir / f"node{node.node_id}.qkv"

    def _write_slice(self, node: CacheTreeNode, payload: bytes, token_count: int) -> None:
        path = self._slice_path(node)
        path.write_bytes(payload)
        node.slice_file = path.name
        node.byte_size = len(payload)
        node.token_count = token_count
        node.payload_sha = hashlib.sha256(payload).hexdigest()
        self.ledger.used_bytes += len(payload)
        self.ledger.check()

    def slice_and_insert(
        self,
        segments: list[Segment],
        tokens: TokenSeq,
        qkv: QkvTensors,
        now: int,
        allow_evict: bool = True,
    ) -> list[int]:
        """Slice full-prompt tensors per segment and merge the chunk path
        into the tree. All-or-nothing: on layout or budget failure nothing
        is written. Returns node ids whose slices were written."""
        if qkv.token_count != len(tokens):
            raise LayoutError("qkv token count does not match the token sequence")
        spans = self.segment_token_spans(segments, tokens)

        chunk_ids = [s.chunk_id for s in segments if s.kind == "chunk"]
        chain = self._match_chain(chunk_ids, require_present=False)
        if len(chain) < len(chunk_ids):
            # keep the shared spine only up to the second-to-last common node:
            # the last common node is duplicated for the new path
            chain = chain[: max(len(chain) - 1, 0)]

        # serialize all payloads and plan writes before touching disk
        payloads: dict[int, tuple[bytes, int]] = {}  # segment index -> (payload, tokens)
        for seg_index, (seg, span) in enumerate(zip(segments, spans)):
            if seg.kind == "query":
                continue
            sliced = qkv.slice_tokens(span[0], span[1])
            payloads[seg_index] = (
                serialize_slice(sliced, content_hash(seg.text)),
                span[1] - span[0],
            )

        incoming = 0
        written_ids: list[int] = []
        to_write: list[tuple[str, bytes, int]] = []  # ("existing:<id>"|"new:<pos>", ...)

        seg_chunk_pos = -1
        for seg_index, seg in enumerate(segments):
            if seg.kind == "system":
                payload, tc = payloads[seg_index]
                if not self.root.present and (
                    self.root.payload_sha is None
                    or self.root.payload_sha == hashlib.sha256(payload).hexdigest()
                ):
                    to_write.append(("existing:0", payload, tc))
                    incoming += len(payload)
            elif seg.kind == "chunk":
                seg_chunk_pos += 1
                payload, tc = payloads[seg_index]
                if seg_chunk_pos < len(chain):
                    node = chain[seg_chunk_pos]
                    # refill an evicted slice only when bit-identical to the
                    # original payload (context may differ otherwise)
                    if not node.present and node.payload_sha == hashlib.sha256(payload).hexdigest():
                        to_write.append((f"existing:{node.node_id}", payload, tc))
                        incoming += len(payload)
                else:
                    to_write.append((f"new:{seg_chunk_pos}", payload, tc))
                    incoming += len(payload)

        if incoming > self.ledger.limit_bytes:
            raise StorageError("prompt slices exceed the whole cache budget")
        if not allow_evict and self.ledger.used_bytes + incoming > self.ledger.limit_bytes:
            raise StorageError("insufficient free space without eviction")
        self.evict_to_fit(incoming, now)

        # apply the plan
        new_nodes: dict[int, CacheTreeNode] = {}
        parent = chain[-1] if chain else self.root
        for pos in range(len(chain), len(chunk_ids)):
            node = self._new_node(parent, chunk_ids[pos])
            node.last_used = now
            new_nodes[pos] = node
            parent = node
        for key, payload, tc in to_write:
            kind, _, ident = key.partition(":")
            if kind == "existing":
                node = self.nodes[int(ident)]
            else:
                node = new_nodes[int(ident)]
            self._write_slice(node, payload, tc)
            node.last_used = now
            written_ids.append(node.node_id)
        return written_ids

    def match_prefix(self, retrieved: list[str], now: int) -> tuple[QkvPrefix | None, int, int]:
        """Walk the tree along the retrieved chunk ids, concatenate matched
        slices, and discard the trailing k_boundary tokens of the final
        matched node. Returns (prefix or None, matched chunk count,
        discarded token count)."""
        if not self.root.present:
            return None, 0, 0
        chain = self._match_chain(retrieved, require_present=True)
        matched_nodes = [self.root] + chain
        parts: list[QkvTensors] = []
        for node in matched_nodes:
            tensors, _ = deserialize_slice(self._slice_path(node).read_bytes())
            parts.append(tensors)
            node.retrieval_count += 1
            node.last_used = now
        final = matched_nodes[-1]
        discarded = 0
        if final is not self.root or self.discard_at_system_node:
            discarded = min(self.k_boundary, parts[-1].token_count)
            if discarded:
                parts[-1] = parts[-1].slice_tokens(0, parts[-1].token_count - discarded)
        tensors = QkvTensors.concat(parts)
        prefix = QkvPrefix(tensors, tensors.token_count)
        return prefix, len(chain), discarded

    def evictable_nodes(self) -> list[CacheTreeNode]:
        return [n for n in self.nodes.values() if n.present]

    def evict_to_fit(self, incoming_bytes: int, now: int) -> list[int]:
        """LFU eviction until incoming_bytes fit. Victims have minimal
        retrieval_count (ties: least-recent last_used, then node id).
        Evicted nodes stay in the tree with the slice absent."""
        if incoming_bytes > self.ledger.limit_bytes:
            raise StorageError("single item larger than the cache budget")
        evicted: list[int] = []
        while self.ledger.used_bytes + incoming_bytes > self.ledger.limit_bytes:
            candidates = self.evictable_nodes()
            if not candidates:
                raise StorageError("over budget with nothing evictable")
            victim = min(
                candidates,
                key=lambda n: (n.retrieval_count, n.last_used, n.chunk_id, n.node_id),
            )
            self._evict_node(victim)
            evicted.append(victim.node_id)
        return evicted

    def _evict_node(self, node: CacheTreeNode) -> None:
        path = self._slice_path(node)
        if path.exists():
            path.unlink()
        self.ledger.used_bytes -= node.byte_size
        node.slice_file = None

    def set_limit(self, limit_bytes: int, now: int) -> list[int]:
        """Change the byte budget; shrinking triggers immediate eviction."""
        self.ledger.limit_bytes = limit_bytes
        if self.ledger.used_bytes > limit_bytes:
            return self.evict_to_fit(0, now)
        return []

    def read_slice(self, node_id: int) -> QkvTensors:
        node = self.nodes[node_id]
        if not node.present:
            raise KeyError(f"slice absent for node {node_id}")
        tensors, _ = deserialize_slice(self._slice_path(node).read_bytes())
        return tensors

    # -- persistence --------------------------------------------------------

    def persist(self) -> None:
        manifest = self.directory / "manifest.jsonl"
        with open(manifest, "w", encoding="utf-8") as fh:
            for node_id in sorted(self.nodes):
                n = self.nodes[node_id]
                fh.write(
                    json.dumps(
                        {
                            "id": n.node_id,
                            "parent": n.parent.node_id if n.parent else None,
                            "chunk_id": n.chunk_id,
                            "retrieval_count": n.retrieval_count,
                            "last_used": n.last_used,
                            "slice_file": n.slice_file,
                            "byte_size": n.byte_size,
                            "token_count": n.token_count,
                            "payload_sha": n.payload_sha,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
        with open(self.directory / "chunks.jsonl", "w", encoding="utf-8") as fh:
            for chunk_id in sorted(self.chunks):
                c = self.chunks[chunk_id]
                fh.write(
                    json.dumps(
                        {"chunk_id": c.chunk_id, "text": c.text, "token_count": c.token_count},
                        sort_keys=True,
                    )
                    + "\n"
                )
        self.vocab.to_file(self.directory / "vocab.txt")

    @classmethod
    def load(
        cls,
        directory,
        vocab: TokenizerVocab | None = None,
        embedder: HashEmbedder | None = None,
        limit_bytes: int = 1 << 34,
        **kwargs,
    ) -> "KnowledgeBank":
        directory = Path(directory)
        if vocab is None:
            vocab = TokenizerVocab.from_file(directory / "vocab.txt")
        bank = cls(directory, vocab, embedder, limit_bytes, **kwargs)
        chunks_file = directory / "chunks.jsonl"
        if chunks_file.exists():
            with open(chunks_file, encoding="utf-8") as fh:
                for line in fh:
                    rec = json.loads(line)
                    chunk = KnowledgeChunk(
                        rec["chunk_id"],
                        rec["text"],
                        bank.embedder.embed(rec["text"]),
                        rec["token_count"],
                    )
                    bank.chunks[chunk.chunk_id] = chunk
                    bank._text_to_id[chunk.text] = chunk.chunk_id
        manifest = directory / "manifest.jsonl"
        if manifest.exists():
            records = []
            with open(manifest, encoding="utf-8") as fh:
                for line in fh:
                    records.append(json.loads(line))
            records.sort(key=lambda r: r["id"])
            bank.nodes.clear()
            for rec in records:
                if rec["parent"] is None:
                    node = bank.root
                    node.retrieval_count = rec["retrieval_count"]
                    node.last_used = rec["last_used"]
                else:
                    parent = bank.nodes[rec["parent"]]
                    node = CacheTreeNode(rec["id"], rec["chunk_id"], parent)
                    parent.children.append(node)
                node.byte_size = rec["byte_size"]
                node.token_count = rec.get("token_count", 0)
                node.retrieval_count = rec["retrieval_count"]
                node.last_used = rec["last_used"]
                node.payload_sha = rec.get("payload_sha")
                node.slice_file = rec["slice_file"]
                bank.nodes[node.node_id] = node
            bank._next_node_id = max(bank.nodes) + 1
            # validate slice files; corrupt or missing slices degrade to evicted
            used = 0
            for node in bank.nodes.values():
                if node.slice_file is None:
                    continue
                path = bank.slice_dir / node.slice_file
                ok = False
                if path.exists():
                    try:
                        data = path.read_bytes()
                        deserialize_slice(data)
                        ok = len(data) == node.byte_size
                    except ValueError:
                        ok = False
                if ok:
                    used += node.byte_size
                else:
                    log.warning("slice for node %d unreadable; treated as evicted", node.node_id)
                    node.slice_file = None
                    if path.exists():
                        path.unlink()
            bank.ledger.used_bytes = used
        return bank
