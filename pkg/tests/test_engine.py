import json

import pytest

from percache.engine import COLD_MISS, QA_HIT, QKV_PARTIAL, Engine, TraceError
from percache.predictor import PhaseError

from conftest import DATA, load_trace, make_engine

CORPUS = (DATA / "corpus.txt").read_text(encoding="utf-8")


def test_cold_miss_then_qa_hit(tmp_path):
    eng = make_engine(tmp_path)
    eng.ingest_chunks([CORPUS], 0)
    q = "what is the budget review plan?"
    first = eng.handle_query(q, 1)
    assert first.path == COLD_MISS and first.l_pre == 0 and first.answer
    second = eng.handle_query(q, 2)
    assert second.path == QA_HIT
    assert second.answer == first.answer
    # a QA hit performs no model inference
    assert second.cost.prefill_flops == 0.0 and second.cost.decode_flops == 0.0
    assert second.best_similarity == pytest.approx(1.0)
    assert eng.qa_hits == 1


def test_qkv_partial_on_qa_miss(tmp_path):
    # tau_query = 1.0 and strict matching: even the identical query misses
    # the QA bank, so the second ask reuses the QKV prefix instead
    eng = make_engine(tmp_path, tau_query=1.0)
    eng.ingest_chunks([CORPUS], 0)
    q = "what is the budget review plan?"
    first = eng.handle_query(q, 1)
    second = eng.handle_query(q, 2)
    assert first.path == COLD_MISS
    assert second.path == QKV_PARTIAL
    assert second.matched_count == eng.config.retrieval_k
    assert 0 < second.l_pre < second.l_total
    assert second.answer == first.answer
    assert second.cost.prefill_flops < first.cost.prefill_flops
    assert eng.qkv_hits == 1


def test_reuse_disabled_never_matches(tmp_path):
    eng = make_engine(tmp_path, tau_query=1.0, reuse_enabled=False)
    eng.ingest_chunks([CORPUS], 0)
    q = "what is the budget review plan?"
    eng.handle_query(q, 1)
    second = eng.handle_query(q, 2)
    assert second.path == COLD_MISS and second.l_pre == 0
    assert eng.bank.ledger.used_bytes == 0


def test_qa_disabled_never_hits(tmp_path):
    eng = make_engine(tmp_path, qa_enabled=False)
    eng.ingest_chunks([CORPUS], 0)
    q = "what is the budget review plan?"
    eng.handle_query(q, 1)
    second = eng.handle_query(q, 2)
    assert second.path != QA_HIT
    assert len(eng.qa.entries) == 0


def test_ingest_chunking_and_idempotence(tmp_path):
    eng = make_engine(tmp_path, chunk_words=100)
    text = " ".join(f"w{i}" for i in range(250))
    ids, stale = eng.ingest_chunks([text], 0)
    assert len(ids) == 3 and stale == []
    again, stale = eng.ingest_chunks([text], 1)
    assert again == ids and stale == []
    assert len(eng.retriever) == 3


def test_refresh_marks_matching_entry_stale(tmp_path):
    eng = make_engine(tmp_path)
    eng.ingest_chunks([CORPUS], 0)
    q = "what is the budget review plan?"
    eng.handle_query(q, 1)
    # a new chunk that dominates the entry's cosine ranking goes top-k
    new_text = "what is the budget review plan for the team this quarter exactly"
    ids, stale = eng.ingest_chunks([new_text], 2)
    assert stale == [q]
    # the stale entry is no longer served
    after = eng.handle_query(q, 3)
    assert after.path != QA_HIT


def test_trace_out_of_order_rejected(tmp_path):
    eng = make_engine(tmp_path)
    eng.apply_event({"at": 5, "kind": "chunk_arrival", "text": "alpha beta"})
    with pytest.raises(TraceError):
        eng.apply_event({"at": 4, "kind": "chunk_arrival", "text": "gamma"})


def test_trace_unknown_kind_and_missing_fields(tmp_path):
    eng = make_engine(tmp_path)
    with pytest.raises(TraceError):
        eng.apply_event({"at": 0, "kind": "nonsense"})
    with pytest.raises(TraceError):
        eng.apply_event({"kind": "idle_tick"})
    with pytest.raises(TraceError):
        eng.apply_event({"at": "zero", "kind": "idle_tick"})


def test_config_change_shrink_evicts_immediately(tmp_path):
    eng = make_engine(tmp_path)
    eng.apply_event({"at": 0, "kind": "chunk_arrival", "text": CORPUS})
    eng.apply_event({"at": 1, "kind": "query_arrival", "text": "what is the budget review plan?"})
    assert eng.bank.ledger.used_bytes > 0
    record = eng.apply_event(
        {"at": 2, "kind": "config_change", "field": "qkv_limit_bytes", "value": 1024}
    )
    assert record["evicted_nodes"]
    assert eng.bank.ledger.used_bytes <= 1024


def test_config_change_tau_applies_immediately(tmp_path):
    eng = make_engine(tmp_path)
    eng.ingest_chunks([CORPUS], 0)
    q = "what is the budget review plan?"
    eng.handle_query(q, 1)
    eng.apply_event({"at": 2, "kind": "config_change", "field": "tau_query", "value": 1.0})
    assert eng.handle_query(q, 3).path != QA_HIT


def test_metrics_tail_fields(tmp_path):
    eng = make_engine(tmp_path)
    record = eng.apply_event({"at": 0, "kind": "chunk_arrival", "text": "alpha beta"})
    for key in ("qa_entries", "qa_used_bytes", "qkv_used_bytes", "qa_hits",
                "qkv_hits", "flops_cum"):
        assert key in record


def test_trace_replay_deterministic(tmp_path):
    events = load_trace("threshold_drop.trace")
    outputs = []
    for run in ("a", "b"):
        from percache.config import EngineConfig

        eng = Engine(
            EngineConfig.from_file(DATA / "configs" / "scenario.cfg"), tmp_path / run
        )
        eng.run_trace(events)
        out = tmp_path / f"{run}.jsonl"
        eng.write_metrics(out)
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]


def test_phase_flag_set_during_serving(tmp_path):
    eng = make_engine(tmp_path)
    eng.ingest_chunks([CORPUS], 0)
    seen = []
    real_embed = eng.embedder.embed

    class Spy:
        def embed(self, text):
            seen.append((eng.phase, eng.predictor.phase))
            return real_embed(text)

    eng.embedder = Spy()
    eng.handle_query("what is the budget review plan?", 1)
    assert seen and seen[0] == ("serve", "serve")
    assert eng.phase == "idle" and eng.predictor.phase == "idle"
    # while serving, prediction work is rejected
    eng.predictor.phase = "serve"
    with pytest.raises(PhaseError):
        eng.predictor.predict_from_history(lambda q: False)
    eng.predictor.phase = "idle"


def test_persist_and_reload_serves_hits(tmp_path):
    eng = make_engine(tmp_path / "bank")
    eng.ingest_chunks([CORPUS], 0)
    q = "what is the budget review plan?"
    answer = eng.handle_query(q, 1).answer
    eng.persist()
    reloaded = make_engine(tmp_path / "bank")
    outcome = reloaded.handle_query(q, 2)
    assert outcome.path == QA_HIT and outcome.answer == answer


def test_run_trace_records_all_events(tmp_path):
    eng = make_engine(tmp_path)
    events = load_trace("monotonicity.trace")
    records = eng.run_trace(events)
    assert len(records) == len(events)
    assert [r["at"] for r in records] == [e["at"] for e in events]
    for rec in records:
        json.dumps(rec)  # every record is JSON-serializable
