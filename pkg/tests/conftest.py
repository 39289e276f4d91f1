import json
import zlib
from pathlib import Path

import numpy as np
import pytest

from percache.backend import QkvTensors
from percache.config import EngineConfig
from percache.engine import Engine
from percache.knowledge import KnowledgeBank, Segment
from percache.textcore import TokenizerVocab, tokenize

REPO = Path(__file__).resolve().parent.parent
DATA = REPO / "data"


@pytest.fixture
def data_dir() -> Path:
    return DATA


def load_trace(name: str) -> list[dict]:
    path = DATA / "traces" / name
    return [json.loads(l) for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]


def make_engine(tmp_path, **overrides) -> Engine:
    defaults = dict(chunk_words=12, max_decode_tokens=6, t_batch=1e9, t_quiet=1e9)
    defaults.update(overrides)
    return Engine(EngineConfig(**defaults), tmp_path)


# -- synthetic-tensor helpers for tree tests --------------------------------
# Tensors whose values depend on the full text prefix (like real attention
# outputs do) but cost nothing to compute: value = crc32 of the text up to
# each token's end byte.

FAKE_HEADS = 1
FAKE_HEAD_DIM = 2


def fake_bank(tmp_path, k_boundary=0, limit_bytes=1 << 22, **kwargs) -> KnowledgeBank:
    return KnowledgeBank(
        tmp_path, TokenizerVocab([]), limit_bytes=limit_bytes, k_boundary=k_boundary, **kwargs
    )


def path_segments(path: list[str], query: str = "q") -> list[Segment]:
    segs = [Segment("system", "S\n")]
    for cid in path:
        segs.append(Segment("chunk", cid + " ", cid))
    segs.append(Segment("query", query))
    return segs


def fake_tensors(text: str, tokens) -> QkvTensors:
    n = len(tokens)
    data = text.encode("utf-8")
    vals = np.array(
        [zlib.crc32(data[: end]) % 9973 for _, end in tokens.byte_spans], dtype=np.float32
    )
    base = np.broadcast_to(
        vals.reshape(n, 1, 1), (n, FAKE_HEADS, FAKE_HEAD_DIM)
    ).astype(np.float32)
    return QkvTensors([base.copy()], [base.copy() + 1.0], [base.copy() + 2.0])


def insert_path(bank: KnowledgeBank, path: list[str], now: int, query: str = "q"):
    segs = path_segments(path, query)
    text = "".join(s.text for s in segs)
    toks = tokenize(text, bank.vocab)
    return bank.slice_and_insert(segs, toks, fake_tensors(text, toks), now)
