"""Decoder-only transformer forward pass and autoregressive generation.

Architecture: pre-norm blocks with rotary position embedding (interleaved
pairs), multi-head causal attention over a KV cache, and either a GELU MLP or
a SiLU-gated MLP. Every linear layer goes through :func:`kernels.linear`, so
FP32 and INT4 weights share one code path.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba as nb
import numpy as np

from .errors import CapacityExceeded, InvalidConfig, InvalidInput, ShapeError
from .kernels import KernelConfig, linear
from .kvcache import KvCache
from .model import ActivationKind, Model, NormKind
from .quant import ComputePath, QuantizedTensor, quantize_activations


class ByteTokenizer:
    """Identity byte tokenizer: token id == byte value."""

    vocab_size = 256

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: Sequence[int]) -> str:
        return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def rope_apply(x: np.ndarray, position, theta: float = 10000.0) -> np.ndarray:
    """Rotate interleaved pairs (2i, 2i+1) of the last axis by ``position / theta**(2i/d)``.

    ``x`` is ``heads x head_dim`` for a single position, or ``T x heads x head_dim``
    with ``position`` a length-T sequence.
    """
    x = np.asarray(x, dtype=np.float32)
    d = x.shape[-1]
    if d % 2:
        raise InvalidConfig(f"rotary embedding needs an even head_dim, got {d}")
    pos = np.asarray(position, dtype=np.float64)
    inv_freq = theta ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    angle = pos[..., None] * inv_freq  # (T, d/2) or (d/2,)
    if x.ndim == 3:
        angle = angle[:, None, :]
    cos, sin = np.cos(angle), np.sin(angle)
    x0 = x[..., 0::2].astype(np.float64)
    x1 = x[..., 1::2].astype(np.float64)
    out = np.empty(x.shape, dtype=np.float32)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


@nb.njit(nogil=True, cache=True)
def _attention_kernel(q, k, v, q_offset, causal, out):
    t_len, heads, d = q.shape
    s_len = k.shape[0]
    scale = np.float32(1.0 / math.sqrt(d))
    scores = np.empty(s_len, np.float32)
    for t in range(t_len):
        n = s_len if not causal else min(s_len, q_offset + t + 1)
        for h in range(heads):
            m = np.float32(-np.inf)
            for s in range(n):
                acc = np.float32(0.0)
                for j in range(d):
                    acc += q[t, h, j] * k[s, h, j]
                acc *= scale
                scores[s] = acc
                if acc > m:
                    m = acc
            z = np.float32(0.0)
            for s in range(n):
                e = np.exp(scores[s] - m)
                scores[s] = e
                z += e
            for j in range(d):
                out[t, h, j] = 0.0
            for s in range(n):
                p = scores[s] / z
                for j in range(d):
                    out[t, h, j] += p * v[s, h, j]


def attention(q, k_view, v_view, causal: bool = True, q_offset: Optional[int] = None) -> np.ndarray:
    """Scaled dot-product attention with a max-subtracted softmax.

    ``q`` is ``T x heads x head_dim``; the keys/values hold ``S`` positions. Query
    ``t`` sits at absolute position ``q_offset + t`` (default ``S - T``) and, when
    causal, sees keys up to and including that position.
    """
    q = np.ascontiguousarray(q, dtype=np.float32)
    if q.ndim == 2:
        q = q[None]
    k = np.ascontiguousarray(k_view, dtype=np.float32)
    v = np.ascontiguousarray(v_view, dtype=np.float32)
    if k.ndim != 3 or k.shape != v.shape or q.shape[1:] != k.shape[1:]:
        raise ShapeError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    if k.shape[0] == 0:
        raise ShapeError("attention over an empty key set")
    if q_offset is None:
        q_offset = k.shape[0] - q.shape[0]
    out = np.empty(q.shape, dtype=np.float32)
    _attention_kernel(q, k, v, q_offset, causal, out)
    return out


def _norm(model: Model, x: np.ndarray, prefix: str) -> np.ndarray:
    cfg = model.config
    w = model[prefix + ".weight"]
    if cfg.norm_kind is NormKind.RMSNORM:
        ms = np.mean(x * x, axis=-1, keepdims=True)
        return (x / np.sqrt(ms + np.float32(cfg.norm_eps))) * w
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    return (xc / np.sqrt(var + np.float32(cfg.norm_eps))) * w + model[prefix + ".bias"]


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    c = np.float32(math.sqrt(2.0 / math.pi))
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x * x * x)))


def silu(x: np.ndarray) -> np.ndarray:
    return x / (np.float32(1.0) + np.exp(-x))


def _project(x: np.ndarray, weights: Sequence, cfg: Optional[KernelConfig]) -> list[np.ndarray]:
    """Apply several linear layers to one input, quantizing the activation once when possible."""
    act = None
    first = weights[0]
    if (
        isinstance(first, QuantizedTensor)
        and first.recipe.compute_path is ComputePath.INT8
        and all(
            isinstance(w, QuantizedTensor)
            and w.recipe.compute_path is ComputePath.INT8
            and w.group_size == first.group_size
            for w in weights
        )
    ):
        act = quantize_activations(x, first.group_size)
    return [linear(x, w, cfg=cfg, act=act) for w in weights]


def _forward(model: Model, tokens: Sequence[int], cache, cfg: Optional[KernelConfig], all_logits: bool):
    mc = model.config
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise InvalidInput("need a non-empty 1-D token sequence")
    if ids.min() < 0 or ids.max() >= mc.vocab_size:
        raise InvalidInput(f"token ids must lie in [0, {mc.vocab_size})")
    start = cache.len
    n = ids.size
    if cache.capacity is not None and start + n > cache.capacity:
        raise CapacityExceeded(
            f"{start} cached + {n} new tokens exceeds cache capacity {cache.capacity}"
        )
    if start + n > mc.max_seq_len:
        raise CapacityExceeded(f"sequence length {start + n} exceeds max_seq_len {mc.max_seq_len}")
    positions = np.arange(start, start + n)
    heads, hd = mc.n_heads, mc.head_dim

    x = model["tok_embeddings"][ids].astype(np.float32)
    for i in range(mc.n_layers):
        p = f"layers.{i}."
        h = _norm(model, x, p + "attn_norm")
        q, k, v = _project(h, [model[p + "attn.wq"], model[p + "attn.wk"], model[p + "attn.wv"]], cfg)
        q = rope_apply(q.reshape(n, heads, hd), positions, mc.rope_theta)
        k = rope_apply(k.reshape(n, heads, hd), positions, mc.rope_theta)
        v = v.reshape(n, heads, hd)
        for t in range(n):
            cache.append(i, k[t], v[t])
        kv_k, kv_v = cache.view(i)
        ctx = attention(q, kv_k, kv_v, causal=True, q_offset=start)
        (o,) = _project(ctx.reshape(n, heads * hd), [model[p + "attn.wo"]], cfg)
        x = x + o

        h = _norm(model, x, p + "ffn_norm")
        if mc.activation_kind is ActivationKind.SILU_GATED:
            up, gate = _project(h, [model[p + "ffn.w1"], model[p + "ffn.w3"]], cfg)
            a = silu(up) * gate
        else:
            (up,) = _project(h, [model[p + "ffn.w1"]], cfg)
            a = gelu(up)
        (down,) = _project(a, [model[p + "ffn.w2"]], cfg)
        x = x + down

    if not all_logits:
        x = x[-1:]
    x = _norm(model, x, "norm")
    (logits,) = _project(x, [model["lm_head"]], cfg)
    return logits if all_logits else logits[0]


def forward_prefill(model: Model, tokens: Sequence[int], cache, cfg: Optional[KernelConfig] = None) -> np.ndarray:
    """Run the prompt through the model, filling ``cache``; returns last-position logits."""
    if cache.len != 0:
        raise InvalidInput("prefill expects an empty cache")
    return _forward(model, tokens, cache, cfg, all_logits=False)


def forward_decode(model: Model, token: int, cache, cfg: Optional[KernelConfig] = None) -> np.ndarray:
    """Append one token to a populated cache and return its logits."""
    if cache.len < 1:
        raise InvalidInput("decode needs a cache populated by prefill")
    return _forward(model, [int(token)], cache, cfg, all_logits=False)


def forward_all(model: Model, tokens: Sequence[int], cache, cfg: Optional[KernelConfig] = None) -> np.ndarray:
    """Logits for every position of ``tokens`` (teacher forcing)."""
    return _forward(model, tokens, cache, cfg, all_logits=True)


def new_cache(model: Model, capacity: Optional[int] = None) -> KvCache:
    mc = model.config
    return KvCache(mc.n_layers, mc.n_heads, mc.head_dim, capacity or mc.max_seq_len)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sampling:
    kind: str = "greedy"  # greedy | topk | topp
    k: int = 1
    p: float = 1.0

    def __post_init__(self):
        if self.kind not in ("greedy", "topk", "topp"):
            raise InvalidConfig(f"unknown sampling kind {self.kind!r}")
        if self.k < 1:
            raise InvalidConfig("top-k needs k >= 1")
        if not 0 < self.p <= 1:
            raise InvalidConfig("top-p needs 0 < p <= 1")

    @classmethod
    def parse(cls, text: str) -> "Sampling":
        """``greedy``, ``topk:<k>`` or ``topp:<p>``."""
        kind, _, arg = text.partition(":")
        try:
            if kind == "greedy" and not arg:
                return cls()
            if kind == "topk":
                return cls("topk", k=int(arg))
            if kind == "topp":
                return cls("topp", p=float(arg))
        except ValueError:
            pass
        raise InvalidConfig(f"bad sampling spec {text!r}; use greedy, topk:<k> or topp:<p>")

    def __str__(self) -> str:
        return {"greedy": "greedy", "topk": f"topk:{self.k}", "topp": f"topp:{self.p}"}[self.kind]


@dataclass(frozen=True)
class GenParams:
    max_new_tokens: int = 32
    sampling: Sampling = Sampling()
    seed: int = 0
    temperature: float = 1.0

    def __post_init__(self):
        if self.max_new_tokens < 0:
            raise InvalidConfig("max_new_tokens must be >= 0")
        if not self.temperature > 0:
            raise InvalidConfig("temperature must be > 0")


@dataclass
class GenerationResult:
    tokens: list[int]
    first_token_ms: Optional[float] = None
    token_ms: list[float] = field(default_factory=list)  # subsequent tokens only

    @property
    def latencies_ms(self) -> list[float]:
        return ([] if self.first_token_ms is None else [self.first_token_ms]) + self.token_ms


def select_token(logits: np.ndarray, sampling: Sampling, temperature: float, rng: np.random.Generator) -> int:
    """Pick the next token. Ties go to the lowest id."""
    if sampling.kind == "greedy" or (sampling.kind == "topk" and sampling.k == 1):
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / temperature
    order = np.argsort(-z, kind="stable")
    if sampling.kind == "topk":
        keep = order[: sampling.k]
    else:
        probs = softmax(z[order])
        cutoff = int(np.searchsorted(np.cumsum(probs), sampling.p)) + 1
        keep = order[: min(cutoff, len(order))]
    probs = softmax(z[keep])
    return int(keep[rng.choice(len(keep), p=probs)])


def generate(model: Model, prompt: Sequence[int], params: GenParams, cfg: Optional[KernelConfig] = None) -> GenerationResult:
    prompt = list(prompt)
    if not prompt:
        raise InvalidInput("prompt must be non-empty")
    result = GenerationResult(tokens=[])
    if params.max_new_tokens == 0:
        return result
    needed = len(prompt) + params.max_new_tokens - 1
    if needed > model.config.max_seq_len:
        raise CapacityExceeded(
            f"prompt ({len(prompt)}) + new tokens ({params.max_new_tokens}) exceeds "
            f"max_seq_len {model.config.max_seq_len}"
        )
    rng = np.random.default_rng(params.seed)
    cache = new_cache(model, capacity=needed)

    t0 = time.perf_counter_ns()
    logits = forward_prefill(model, prompt, cache, cfg)
    tok = select_token(logits, params.sampling, params.temperature, rng)
    result.first_token_ms = (time.perf_counter_ns() - t0) / 1e6
    result.tokens.append(tok)
    for _ in range(params.max_new_tokens - 1):
        t0 = time.perf_counter_ns()
        logits = forward_decode(model, tok, cache, cfg)
        tok = select_token(logits, params.sampling, params.temperature, rng)
        result.token_ms.append((time.perf_counter_ns() - t0) / 1e6)
        result.tokens.append(tok)
    return result
