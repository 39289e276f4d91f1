import math
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from percache.retrieval import (
    DEFAULT_K1,
    CorpusStats,
    Retriever,
    bm25_score,
    minmax,
)
from percache.textcore import HashEmbedder, cosine_similarity, split_words


def _stats(docs):
    stats = CorpusStats()
    for d in docs:
        stats.add_document(split_words(d))
    return stats


def test_bm25_single_doc_oracle():
    # one document "the budget review", query "budget": df=1, N=1,
    # idf = ln(1 + (1-1+0.5)/(1+0.5)) = ln(4/3); tf=1, dl=avgdl=3 so the
    # length norm cancels: score = idf * 1 * (k1+1) / (1 + k1)  = idf
    doc = "the budget review"
    stats = _stats([doc])
    score = bm25_score(Counter(["budget"]), Counter(split_words(doc)), 3, stats)
    assert score == pytest.approx(math.log(4.0 / 3.0), abs=1e-12)


def test_bm25_absent_term_zero():
    doc = "the budget review"
    stats = _stats([doc])
    assert bm25_score(Counter(["vendor"]), Counter(split_words(doc)), 3, stats) == 0.0


def test_bm25_empty_corpus():
    assert bm25_score(Counter(["a"]), Counter(["a"]), 1, CorpusStats()) == 0.0


def test_bm25_tf_saturation_monotone():
    # with fixed doc length, score strictly increases in tf but is bounded
    docs = ["x y", "z w"]
    stats = _stats(docs)
    idf = stats.idf("x")
    scores = []
    for tf in range(1, 30):
        s = bm25_score(Counter(["x"]), Counter({"x": tf}), 4, stats)
        scores.append(s)
    assert all(a < b for a, b in zip(scores, scores[1:]))
    bound = idf * (DEFAULT_K1 + 1.0)
    assert all(s < bound for s in scores)


def test_bm25_length_penalty():
    # same tf, longer doc scores lower when b > 0
    docs = ["x a", "x a b c d e f g"]
    stats = _stats(docs)
    short = bm25_score(Counter(["x"]), Counter({"x": 1}), 2, stats)
    long = bm25_score(Counter(["x"]), Counter({"x": 1}), 8, stats)
    assert short > long


def test_minmax_all_equal():
    assert minmax([3.0, 3.0, 3.0]) == [0.5, 0.5, 0.5]


def test_minmax_endpoints():
    assert minmax([1.0, 3.0, 2.0]) == [0.0, 1.0, 0.5]


def _hand_fused(retr, docs, query, alpha=0.5):
    """Independent re-derivation of the fused ranking."""
    emb = HashEmbedder()
    stats = _stats([t for _, t in docs])
    ids = sorted(i for i, _ in docs)
    by_id = dict(docs)
    bm = [
        bm25_score(Counter(split_words(query)), Counter(split_words(by_id[i])),
                   len(split_words(by_id[i])), stats)
        for i in ids
    ]
    se = [cosine_similarity(emb.embed(query), emb.embed(by_id[i])) for i in ids]
    mb, ms = minmax(bm), minmax(se)
    fused = [alpha * a + (1 - alpha) * b for a, b in zip(mb, ms)]
    order = sorted(range(len(ids)), key=lambda j: (-fused[j], ids[j]))
    return [ids[j] for j in order]


DOCS = [
    ("c1", "the budget review needs numbers from finance"),
    ("c2", "the meeting runs one hour on monday morning"),
    ("c3", "the project report sits in the shared drive"),
    ("c4", "training workshop at noon covers new tooling"),
]


def _retriever(docs=DOCS):
    r = Retriever()
    for cid, text in docs:
        r.add_chunk(cid, text, r.embedder.embed(text))
    return r


def test_fusion_order_oracle():
    r = _retriever()
    for query in ("budget review numbers", "meeting monday", "where is the report"):
        got = [c.chunk_id for c in r.retrieve_top_k(query, 4)]
        assert got == _hand_fused(r, DOCS, query), query


def test_ties_break_by_chunk_id():
    # duplicate texts score identically; order must be ascending chunk_id
    docs = [("b", "same text here"), ("a", "same text here"), ("c", "other words entirely")]
    r = _retriever(docs)
    got = [c.chunk_id for c in r.retrieve_top_k("same text", 3)]
    assert got[:2] == ["a", "b"]


def test_k_validation_and_empty():
    r = Retriever()
    with pytest.raises(ValueError):
        r.retrieve_top_k("q", 0)
    with pytest.raises(ValueError):
        r.retrieve_top_k("q", -1)
    assert r.retrieve_top_k("q", 3) == []


def test_add_chunk_idempotent():
    r = _retriever()
    before = r.retrieve_top_k("budget review", 4)
    r.add_chunk("c1", "completely different text", r.embedder.embed("x"))
    assert r.retrieve_top_k("budget review", 4) == before
    assert len(r) == 4


def test_query_duplicate_chunk_top1():
    docs = DOCS + [("c9", "what is the budget review status")]
    r = _retriever(docs)
    top = r.retrieve_top_k("what is the budget review status", 1)
    assert top[0].chunk_id == "c9"


def test_k_larger_than_corpus():
    r = _retriever()
    assert len(r.retrieve_top_k("budget", 99)) == 4


@settings(max_examples=50, deadline=None)
@given(st.permutations(list(range(len(DOCS)))))
def test_insertion_order_invariance(perm):
    r = _retriever([DOCS[i] for i in perm])
    base = _retriever()
    for query in ("budget", "meeting monday morning"):
        assert [c.chunk_id for c in r.retrieve_top_k(query, 4)] == [
            c.chunk_id for c in base.retrieve_top_k(query, 4)
        ]
