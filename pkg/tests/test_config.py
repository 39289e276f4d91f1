import pytest

from percache.config import ConfigError, EngineConfig


def test_defaults():
    cfg = EngineConfig()
    assert cfg.tau_query == 0.85
    assert cfg.tau_scheduler == 0.88
    assert cfg.prediction_stride == 5
    assert cfg.buffer_size == 20
    assert cfg.t_batch == 600.0
    assert cfg.t_quiet == 300.0
    assert cfg.retrieval_k == 3
    assert cfg.k_boundary == 4
    assert cfg.chunk_words == 100
    assert cfg.alpha_fusion == 0.5


def test_validation():
    with pytest.raises(ConfigError):
        EngineConfig(tau_query=1.5)
    with pytest.raises(ConfigError):
        EngineConfig(retrieval_k=0)
    with pytest.raises(ConfigError):
        EngineConfig(k_boundary=-1)
    with pytest.raises(ConfigError):
        EngineConfig(backend="gpt")


def test_apply_parses_by_type():
    cfg = EngineConfig()
    cfg.apply("tau_query", "0.9")
    cfg.apply("retrieval_k", "5")
    cfg.apply("qa_enabled", "false")
    cfg.apply("system_prompt", "Hi:\\n")
    assert cfg.tau_query == 0.9 and cfg.retrieval_k == 5
    assert cfg.qa_enabled is False and cfg.system_prompt == "Hi:\n"


def test_apply_rejects_bad_input():
    cfg = EngineConfig()
    with pytest.raises(ConfigError):
        cfg.apply("no_such_key", "1")
    with pytest.raises(ConfigError):
        cfg.apply("retrieval_k", "three")
    with pytest.raises(ConfigError):
        cfg.apply("qa_enabled", "maybe")
    with pytest.raises(ConfigError):
        cfg.apply("tau_query", "2.0")  # valid float, fails validation


def test_from_file(tmp_path):
    path = tmp_path / "engine.cfg"
    path.write_text(
        "# comment\n"
        "\n"
        "tau_query = 0.9\n"
        "scheduler_enabled=false\n"
        "vocab_file=vocab.txt\n",
        encoding="utf-8",
    )
    cfg = EngineConfig.from_file(path)
    assert cfg.tau_query == 0.9 and cfg.scheduler_enabled is False
    # relative paths resolve against the config file's directory
    assert cfg.vocab_file == str(tmp_path / "vocab.txt")


def test_from_file_errors(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("just a line\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        EngineConfig.from_file(path)
    path.write_text("unknown_key=1\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        EngineConfig.from_file(path)


def test_seed_env_override(monkeypatch):
    monkeypatch.setenv("PERCACHE_SEED", "0x1234")
    assert EngineConfig().seed == 0x1234
    monkeypatch.setenv("PERCACHE_SEED", "not a number")
    with pytest.raises(ConfigError):
        EngineConfig()
