"""Engine configuration: a flat key=value file mapped onto one dataclass.

Unknown keys are an error (typos should fail loudly). Values are parsed
by the declared field type; booleans accept true/false/1/0. The
PERCACHE_SEED environment variable overrides the model seed.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

PERCACHE_SEED_ENV = "PERCACHE_SEED"


class ConfigError(ValueError):
    """Malformed config file or unknown/invalid key."""


@dataclass
class EngineConfig:
    # matching thresholds
    tau_query: float = 0.85
    tau_scheduler: float = 0.88
    # prediction
    prediction_stride: int = 5
    buffer_size: int = 20
    t_batch: float = 600.0
    t_quiet: float = 300.0
    abstract_cap_bytes: int = 4096
    # retrieval
    retrieval_k: int = 3
    k_refresh: int = 3
    alpha_fusion: float = 0.5
    chunk_words: int = 100
    # cache tree
    k_boundary: int = 4
    qkv_limit_bytes: int = 1 << 34
    qa_limit_bytes: int = 1 << 22
    # behavior toggles
    qa_enabled: bool = True
    reuse_enabled: bool = True
    scheduler_enabled: bool = True
    # backend selection for predictor/summarizer text generation
    backend: str = "scripted"
    script_file: str = ""
    vocab_file: str = ""
    system_prompt: str = "Answer from personal notes:\n"
    # toy model shape and decoding
    model_layers: int = 2
    model_heads: int = 2
    model_head_dim: int = 8
    max_decode_tokens: int = 8
    seed: int = 0x7031
    # cost model
    flops_per_ms: float = 1e6
    latency_scale: float = 1.0

    def __post_init__(self):
        env_seed = os.environ.get(PERCACHE_SEED_ENV)
        if env_seed is not None:
            try:
                self.seed = int(env_seed, 0)
            except ValueError as exc:
                raise ConfigError(f"bad {PERCACHE_SEED_ENV}: {env_seed!r}") from exc
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.tau_query <= 1.0:
            raise ConfigError("tau_query must be in [0, 1]")
        if not 0.0 <= self.tau_scheduler <= 1.0:
            raise ConfigError("tau_scheduler must be in [0, 1]")
        if not 0.0 <= self.alpha_fusion <= 1.0:
            raise ConfigError("alpha_fusion must be in [0, 1]")
        for key in (
            "prediction_stride",
            "buffer_size",
            "retrieval_k",
            "k_refresh",
            "chunk_words",
            "max_decode_tokens",
            "model_layers",
            "model_heads",
            "model_head_dim",
        ):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be a positive integer")
        if self.k_boundary < 0:
            raise ConfigError("k_boundary must be non-negative")
        for key in ("qkv_limit_bytes", "qa_limit_bytes", "abstract_cap_bytes"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.backend not in ("scripted", "toy"):
            raise ConfigError("backend must be 'scripted' or 'toy'")

    def apply(self, key: str, raw: str) -> None:
        """Set one field from its textual form; used for config_change events."""
        fields = {f.name: f for f in dataclasses.fields(self)}
        if key not in fields:
            raise ConfigError(f"unknown config key: {key}")
        ftype = fields[key].type
        try:
            if ftype == "bool":
                low = raw.strip().lower()
                if low in ("true", "1"):
                    value = True
                elif low in ("false", "0"):
                    value = False
                else:
                    raise ValueError(raw)
            elif ftype == "int":
                value = int(raw.strip(), 0)
            elif ftype == "float":
                value = float(raw.strip())
            else:
                # allow literal \n in string values (system_prompt ends with one)
                value = raw.replace("\\n", "\n")
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        setattr(self, key, value)
        self.validate()

    @classmethod
    def from_file(cls, path) -> "EngineConfig":
        cfg = cls()
        path = Path(path)
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, _, raw = stripped.partition("=")
            cfg.apply(key.strip(), raw.strip())
        # file paths in a config are relative to the config's directory
        for key in ("script_file", "vocab_file"):
            value = getattr(cfg, key)
            if value and not Path(value).is_absolute():
                setattr(cfg, key, str(path.parent / value))
        return cfg
