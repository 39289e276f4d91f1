"""Generation backends and the inference cost model.

ToyModel is a small pre-norm transformer (single linear per Q/K/V, RoPE on
Q and K, causal attention, greedy decode) computed entirely in float32
with fixed accumulation order. That makes prefix reuse checkable
bit-for-bit: prefilling a suffix against cached per-layer Q/K/V slices
produces exactly the same values as recomputing the whole prompt.

ScriptedBackend returns canned text for prompt templates so prediction
and summarization flows stay deterministic in tests and trace replays.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

MLP_MULT = 4


@dataclass(frozen=True)
class ToyModelConfig:
    layers: int = 2
    heads: int = 2
    head_dim: int = 8
    vocab_size: int = 512
    seed: int = 0x7031
    max_positions: int = 8192

    def __post_init__(self):
        if min(self.layers, self.heads, self.head_dim, self.vocab_size) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even (rotary pairs)")

    @property
    def dim(self) -> int:
        return self.heads * self.head_dim


@dataclass
class QkvTensors:
    """Per-layer Q/K/V arrays shaped (tokens, heads, head_dim), float32."""

    q: list[np.ndarray]
    k: list[np.ndarray]
    v: list[np.ndarray]

    def __post_init__(self):
        n = self.token_count
        for arrs in (self.q, self.k, self.v):
            if len(arrs) != len(self.q):
                raise ValueError("layer count mismatch")
            for a in arrs:
                if a.shape[0] != n or a.dtype != np.float32:
                    raise ValueError("inconsistent QKV arrays")

    @property
    def layers(self) -> int:
        return len(self.q)

    @property
    def token_count(self) -> int:
        return int(self.q[0].shape[0]) if self.q else 0

    @classmethod
    def empty(cls, cfg: ToyModelConfig) -> "QkvTensors":
        shape = (0, cfg.heads, cfg.head_dim)
        mk = lambda: [np.zeros(shape, dtype=np.float32) for _ in range(cfg.layers)]
        return cls(mk(), mk(), mk())

    def slice_tokens(self, start: int, end: int) -> "QkvTensors":
        return QkvTensors(
            [a[start:end].copy() for a in self.q],
            [a[start:end].copy() for a in self.k],
            [a[start:end].copy() for a in self.v],
        )

    @classmethod
    def concat(cls, parts: list["QkvTensors"]) -> "QkvTensors":
        if not parts:
            raise ValueError("nothing to concatenate")
        layers = parts[0].layers
        cat = lambda sel: [
            np.concatenate([sel(p)[l] for p in parts], axis=0) for l in range(layers)
        ]
        return cls(cat(lambda p: p.q), cat(lambda p: p.k), cat(lambda p: p.v))


@dataclass
class QkvPrefix:
    """Concatenated cached tensors covering the first prefix_token_count tokens."""

    tensors: QkvTensors
    prefix_token_count: int

    def __post_init__(self):
        if self.prefix_token_count != self.tensors.token_count:
            raise ValueError("prefix_token_count must equal stored token count")

    @classmethod
    def empty(cls, cfg: ToyModelConfig) -> "QkvPrefix":
        return cls(QkvTensors.empty(cfg), 0)


@dataclass
class PrefillState:
    """Decode-ready state: per-layer K/V over the full prompt, single-owner."""

    config: ToyModelConfig
    k: list[np.ndarray]
    v: list[np.ndarray]
    total_len: int
    last_hidden: np.ndarray  # (1, dim), final-norm output of the last token


class ToyModel:
    """Seeded-pseudorandom frozen transformer; immutable after construction."""

    def __init__(self, config: ToyModelConfig):
        self.config = config
        self.mac_count = 0
        rng = np.random.default_rng(config.seed)
        d = config.dim
        hidden = MLP_MULT * d
        f32 = lambda a: a.astype(np.float32)
        self.emb = f32(rng.normal(0.0, 1.0, (config.vocab_size, d)))
        std = 1.0 / math.sqrt(d)
        self.wq = [f32(rng.normal(0.0, std, (d, d))) for _ in range(config.layers)]
        self.wk = [f32(rng.normal(0.0, std, (d, d))) for _ in range(config.layers)]
        self.wv = [f32(rng.normal(0.0, std, (d, d))) for _ in range(config.layers)]
        self.wo = [f32(rng.normal(0.0, std, (d, d))) for _ in range(config.layers)]
        self.w1 = [f32(rng.normal(0.0, std, (d, hidden))) for _ in range(config.layers)]
        self.w2 = [
            f32(rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, d)))
            for _ in range(config.layers)
        ]
        self.g1 = [np.ones(d, dtype=np.float32) for _ in range(config.layers)]
        self.g2 = [np.ones(d, dtype=np.float32) for _ in range(config.layers)]
        self.gf = np.ones(d, dtype=np.float32)
        self.w_out = f32(rng.normal(0.0, std, (d, config.vocab_size)))
        half = config.head_dim // 2
        self.inv_freq = (10000.0 ** (-(np.arange(half) * 2.0 / config.head_dim))).astype(
            np.float32
        )

    # float32 matmul with fixed accumulation order over the contraction axis,
    # so row results are identical no matter how many rows are present.
    def _mm(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
        tmp = np.empty_like(out)
        for i in range(a.shape[1]):
            np.multiply(a[:, i : i + 1], b[i], out=tmp)
            out += tmp
        self.mac_count += a.shape[0] * a.shape[1] * b.shape[1]
        return out

    def _rmsnorm(self, x: np.ndarray, gain: np.ndarray) -> np.ndarray:
        ss = np.zeros(x.shape[0], dtype=np.float32)
        for dcol in range(x.shape[1]):
            ss += x[:, dcol] * x[:, dcol]
        inv = np.float32(1.0) / np.sqrt(ss / np.float32(x.shape[1]) + np.float32(1e-5))
        return x * inv[:, None] * gain[None, :]

    def _rope(self, t: np.ndarray, positions: np.ndarray) -> np.ndarray:
        angles = positions.astype(np.float32)[:, None] * self.inv_freq[None, :]
        cos = np.cos(angles)[:, None, :]
        sin = np.sin(angles)[:, None, :]
        even = t[..., 0::2]
        odd = t[..., 1::2]
        out = np.empty_like(t)
        out[..., 0::2] = even * cos - odd * sin
        out[..., 1::2] = even * sin + odd * cos
        return out

    def _attention(self, q: np.ndarray, k_full: np.ndarray, v_full: np.ndarray,
                   positions: np.ndarray) -> np.ndarray:
        s, heads, dh = q.shape
        total = k_full.shape[0]
        scale = np.float32(1.0 / math.sqrt(dh))
        mask = (positions[:, None] >= np.arange(total)[None, :])[:, None, :]
        # scores[s,h,t], accumulated over head_dim in fixed order (batched
        # across heads; each element's accumulation sequence is unchanged)
        scores = np.zeros((s, heads, total), dtype=np.float32)
        tmp = np.empty_like(scores)
        for dcol in range(dh):
            np.multiply(q[:, :, dcol : dcol + 1], k_full[:, :, dcol].T[None, :, :], out=tmp)
            scores += tmp
        scores = np.where(mask, scores * scale, np.float32(-np.inf))
        mx = np.max(scores, axis=2, keepdims=True)
        e = np.exp(scores - mx)
        w = e / np.sum(e, axis=2, keepdims=True)
        out = np.zeros((s, heads, dh), dtype=np.float32)
        tmp = np.empty_like(out)
        for j in range(total):
            np.multiply(w[:, :, j : j + 1], v_full[None, j, :, :], out=tmp)
            out += tmp
        self.mac_count += 2 * s * heads * total * dh
        return out

    def _block_qkv(self, layer: int, x: np.ndarray, positions: np.ndarray):
        cfg = self.config
        s = x.shape[0]
        h = self._rmsnorm(x, self.g1[layer])
        q = self._mm(h, self.wq[layer]).reshape(s, cfg.heads, cfg.head_dim)
        k = self._mm(h, self.wk[layer]).reshape(s, cfg.heads, cfg.head_dim)
        v = self._mm(h, self.wv[layer]).reshape(s, cfg.heads, cfg.head_dim)
        q = self._rope(q, positions)
        k = self._rope(k, positions)
        return q, k, v

    def _block_tail(self, layer: int, x: np.ndarray, attn: np.ndarray) -> np.ndarray:
        s = x.shape[0]
        x = x + self._mm(attn.reshape(s, self.config.dim), self.wo[layer])
        h = self._rmsnorm(x, self.g2[layer])
        return x + self._mm(np.maximum(self._mm(h, self.w1[layer]), np.float32(0.0)),
                            self.w2[layer])

    def prefill(self, tokens, prefix: QkvPrefix | None = None):
        """Run prefill, skipping projection/RoPE for cached prefix tokens.

        Returns (suffix QkvTensors covering tokens[prefix_len:], PrefillState).
        Suffix rotary positions are offset by the prefix length so they match
        the token's position in the full sequence.
        """
        cfg = self.config
        token_ids = np.asarray(tokens, dtype=np.int64)
        total = int(token_ids.shape[0])
        if total == 0:
            raise ValueError("cannot prefill an empty prompt")
        pre = 0 if prefix is None else prefix.prefix_token_count
        if pre > total:
            raise ValueError("prefix longer than the prompt")
        if prefix is not None and pre > 0 and prefix.tensors.layers != cfg.layers:
            raise ValueError("prefix layer count does not match the model")
        # always recompute at least the last token so the decode-ready hidden
        # state exists; its recomputed K/V are bitwise-equal to cached values
        pre_eff = min(pre, total - 1)
        positions = np.arange(pre_eff, total)
        x = self.emb[token_ids[pre_eff:]].copy()
        s = total - pre_eff
        ks, vs, qs = [], [], []
        for layer in range(cfg.layers):
            q, k, v = self._block_qkv(layer, x, positions)
            if pre_eff > 0:
                k_full = np.concatenate([prefix.tensors.k[layer][:pre_eff], k], axis=0)
                v_full = np.concatenate([prefix.tensors.v[layer][:pre_eff], v], axis=0)
            else:
                k_full, v_full = k, v
            attn = self._attention(q, k_full, v_full, positions)
            x = self._block_tail(layer, x, attn)
            qs.append(q)
            ks.append(k_full)
            vs.append(v_full)
        final = self._rmsnorm(x, self.gf)
        cut = pre - pre_eff  # 1 only when the prefix covered the whole prompt
        suffix = QkvTensors(
            [q[cut:].copy() for q in qs],
            [k[pre:].copy() for k in ks],
            [v[pre:].copy() for v in vs],
        )
        state = PrefillState(cfg, ks, vs, total, final[-1:].copy())
        return suffix, state

    def decode_ids(self, state: PrefillState, max_tokens: int,
                   eos_id: int | None = None) -> list[int]:
        """Greedy argmax decoding; stops at eos_id or max_tokens."""
        if max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        k_cache = [a for a in state.k]
        v_cache = [a for a in state.v]
        cur_len = state.total_len
        hidden = state.last_hidden
        generated: list[int] = []
        for step in range(max_tokens):
            logits = self._mm(hidden, self.w_out)
            tok = int(np.argmax(logits[0]))
            generated.append(tok)
            if tok == eos_id or step == max_tokens - 1:
                break
            positions = np.array([cur_len])
            x = self.emb[np.array([tok])].copy()
            for layer in range(self.config.layers):
                q, k, v = self._block_qkv(layer, x, positions)
                k_cache[layer] = np.concatenate([k_cache[layer], k], axis=0)
                v_cache[layer] = np.concatenate([v_cache[layer], v], axis=0)
                attn = self._attention(q, k_cache[layer], v_cache[layer], positions)
                x = self._block_tail(layer, x, attn)
            hidden = self._rmsnorm(x, self.gf)
            cur_len += 1
        return generated


# ---------------------------------------------------------------------------
# scripted backend


def slot_digest(slots: dict) -> str:
    payload = json.dumps(slots, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:16]


class ScriptedBackend:
    """Deterministic canned responses for prompt templates.

    Lookup order: exact (template, slot digest) entry, then the template's
    wildcard queue (first use of a new digest consumes the next queued
    response and memoizes it), then the fallback string with a logged miss.
    """

    def __init__(self, entries: list[dict] | None = None, fallback: str = ""):
        self.fallback = fallback
        self.miss_count = 0
        self._exact: dict[tuple[str, str], str] = {}
        self._queues: dict[str, list[str]] = {}
        for e in entries or []:
            digest = e.get("slots_digest", "*")
            if digest == "*":
                self._queues.setdefault(e["template"], []).append(e["response"])
            else:
                self._exact[(e["template"], digest)] = e["response"]

    @classmethod
    def from_file(cls, path) -> "ScriptedBackend":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(data.get("entries", []), data.get("fallback", ""))

    def generate(self, template: str, slots: dict) -> str:
        key = (template, slot_digest(slots))
        if key in self._exact:
            return self._exact[key]
        queue = self._queues.get(template)
        if queue:
            response = queue.pop(0)
            self._exact[key] = response  # same prompt twice -> same response
            return response
        self.miss_count += 1
        return self.fallback


# ---------------------------------------------------------------------------
# cost model


@dataclass
class CostParams:
    """Latency calibration: throughput plus per-item fixed costs.

    Fixed-cost defaults follow the measured per-operation latencies of the
    reference deployment (question match 1.61 s, QKV match 0.015 s, QKV
    load 1.03 s) behind a single scale factor; values are model
    milliseconds, never wall clock.
    """

    flops_per_ms: float = 1.0e6
    latency_scale: float = 1.0
    question_match_ms: float = 1610.0
    qkv_match_ms: float = 15.0
    qkv_load_ms: float = 1030.0
    embed_ms: float = 40.0
    qa_entry_bytes: int = 4096


@dataclass
class CostReport:
    prefill_flops: float = 0.0
    decode_flops: float = 0.0
    prefill_ms: float = 0.0
    decode_ms: float = 0.0
    match_ms: float = 0.0
    load_ms: float = 0.0
    embed_ms: float = 0.0

    @property
    def total_flops(self) -> float:
        return self.prefill_flops + self.decode_flops

    @property
    def total_ms(self) -> float:
        return self.prefill_ms + self.decode_ms + self.match_ms + self.load_ms + self.embed_ms

    def add(self, other: "CostReport") -> "CostReport":
        return CostReport(
            self.prefill_flops + other.prefill_flops,
            self.decode_flops + other.decode_flops,
            self.prefill_ms + other.prefill_ms,
            self.decode_ms + other.decode_ms,
            self.match_ms + other.match_ms,
            self.load_ms + other.load_ms,
            self.embed_ms + other.embed_ms,
        )


@dataclass(frozen=True)
class InferenceEvent:
    """Descriptor of one inference: lengths, decode size, fixed-cost items."""

    l_total: int
    l_pre: int = 0
    decode_tokens: int = 0
    loaded_slices: int = 0
    qa_match: bool = False
    qkv_match: bool = False
    embeds: int = 0


def projection_macs(cfg: ToyModelConfig, l_total: int, l_pre: int) -> int:
    """Q/K/V projection multiply-adds; linear in the uncached suffix length."""
    suffix = l_total - l_pre
    return cfg.layers * 3 * suffix * cfg.dim * cfg.dim


def prefill_macs(cfg: ToyModelConfig, l_total: int, l_pre: int) -> int:
    """Exact multiply-add count of ToyModel.prefill (projection, attention,
    output projection, MLP); matches the instrumented counter."""
    suffix = l_total - l_pre
    d = cfg.dim
    per_layer = 12 * suffix * d * d + 2 * suffix * l_total * d
    return cfg.layers * per_layer


def decode_macs(cfg: ToyModelConfig, l_total: int, gen_tokens: int) -> int:
    """Exact multiply-add count of ToyModel.decode_ids for gen_tokens emitted."""
    if gen_tokens <= 0:
        return 0
    d = cfg.dim
    total = gen_tokens * d * cfg.vocab_size
    for i in range(1, gen_tokens):
        total += cfg.layers * (12 * d * d + 2 * (l_total + i) * d)
    return total


class CostModel:
    def __init__(self, model_config: ToyModelConfig, params: CostParams | None = None):
        self.model_config = model_config
        self.params = params or CostParams()

    def estimate_cost(self, event: InferenceEvent) -> CostReport:
        p = self.params
        pf = float(prefill_macs(self.model_config, event.l_total, event.l_pre))
        df = float(decode_macs(self.model_config, event.l_total, event.decode_tokens))
        scale = p.latency_scale
        match_ms = scale * (
            (p.question_match_ms if event.qa_match else 0.0)
            + (p.qkv_match_ms if event.qkv_match else 0.0)
        )
        return CostReport(
            prefill_flops=pf,
            decode_flops=df,
            prefill_ms=pf / p.flops_per_ms,
            decode_ms=df / p.flops_per_ms,
            match_ms=match_ms,
            load_ms=scale * p.qkv_load_ms * event.loaded_slices,
            embed_ms=scale * p.embed_ms * event.embeds,
        )
