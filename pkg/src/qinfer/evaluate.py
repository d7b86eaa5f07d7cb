"""Teacher-forced evaluation: next-token accuracy and perplexity."""
from __future__ import annotations

import enum
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import InvalidInput
from .kernels import KernelConfig
from .model import Model
from .runtime import forward_all, new_cache


class Metric(enum.Enum):
    NEXT_TOKEN_ACCURACY = "accuracy"
    PERPLEXITY = "perplexity"

    @property
    def higher_is_better(self) -> bool:
        return self is Metric.NEXT_TOKEN_ACCURACY


def _windows(n_tokens: int, window: int) -> Iterator[tuple[int, int]]:
    # consecutive windows overlap by one token so every target 1..n-1 is scored exactly once
    start = 0
    while start < n_tokens - 1:
        end = min(start + window, n_tokens)
        yield start, end
        start = end - 1


def teacher_forced_logits(model: Model, tokens: Sequence[int], cfg: Optional[KernelConfig] = None):
    """Yield ``(logits, targets)`` per context window; logits row i predicts targets[i]."""
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 1 or toks.size < 2:
        raise InvalidInput("evaluation needs at least 2 tokens")
    window = model.config.max_seq_len
    if window < 2:
        raise InvalidInput("max_seq_len must be >= 2 to score next tokens")
    for start, end in _windows(toks.size, window):
        chunk = toks[start:end]
        logits = forward_all(model, chunk[:-1], new_cache(model), cfg)
        yield logits, chunk[1:]


def accuracy_from_logits(logits: np.ndarray, targets: np.ndarray) -> tuple[int, int]:
    """(correct, total); argmax ties resolve to the lowest id."""
    pred = np.argmax(logits, axis=-1)
    return int(np.sum(pred == targets)), int(targets.size)


def nll_from_logits(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-position negative log-likelihood (natural log), computed in float64."""
    z = logits.astype(np.float64)
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    return lse - z[np.arange(len(targets)), targets]


def perplexity_from_logits(logits: np.ndarray, targets: np.ndarray) -> float:
    return float(np.exp(nll_from_logits(logits, targets).mean()))


def eval_next_token_accuracy(model: Model, tokens: Sequence[int], cfg: Optional[KernelConfig] = None) -> float:
    correct = total = 0
    for logits, targets in teacher_forced_logits(model, tokens, cfg):
        c, t = accuracy_from_logits(logits, targets)
        correct += c
        total += t
    return correct / total


def eval_perplexity(model: Model, tokens: Sequence[int], cfg: Optional[KernelConfig] = None) -> float:
    nll = [nll_from_logits(l, t) for l, t in teacher_forced_logits(model, tokens, cfg)]
    return float(np.exp(np.concatenate(nll).mean()))


def evaluate(model: Model, tokens: Sequence[int], metric: Metric, cfg: Optional[KernelConfig] = None) -> float:
    if metric is Metric.NEXT_TOKEN_ACCURACY:
        return eval_next_token_accuracy(model, tokens, cfg)
    return eval_perplexity(model, tokens, cfg)


def relative_loss(baseline: float, candidate: float, metric: Metric) -> float:
    """Fractional degradation versus the baseline; positive means worse.

    A zero baseline falls back to the absolute difference.
    """
    diff = baseline - candidate if metric.higher_is_better else candidate - baseline
    return diff / baseline if baseline != 0 else diff
