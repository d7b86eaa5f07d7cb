import math

import numpy as np
import pytest

from qinfer.errors import InvalidInput
from qinfer.evaluate import (
    Metric,
    eval_next_token_accuracy,
    eval_perplexity,
    evaluate,
    relative_loss,
)
from qinfer.model import ActivationKind, NormKind, init_random
from qinfer.runtime import forward_prefill, new_cache

import oracles
from conftest import toy_config


def constant_model(vocab=16, favourite=0, strength=1.0):
    """Final LayerNorm with zero gain and unit bias: logits are the same for every input."""
    cfg = toy_config(vocab_size=vocab, norm_kind=NormKind.LAYERNORM, activation_kind=ActivationKind.GELU)
    m = init_random(cfg, seed=0)
    m.tensors["norm.weight"][:] = 0
    m.tensors["norm.bias"][:] = 1
    head = np.zeros((vocab, cfg.hidden_dim), np.float32)
    head[favourite] = strength / cfg.hidden_dim
    m.tensors["lm_head"] = head
    return m


def window_start(j, window):
    return ((j - 1) // (window - 1)) * (window - 1)


def recount_accuracy(model, tokens):
    """Score every target with its own prefill over exactly the context the evaluator uses."""
    w = model.config.max_seq_len
    hits = 0
    for j in range(1, len(tokens)):
        ctx = tokens[window_start(j, w):j]
        logits = forward_prefill(model, ctx, new_cache(model))
        hits += int(np.argmax(logits)) == tokens[j]
    return hits / (len(tokens) - 1)


def test_always_zero_model():
    m = constant_model(favourite=0)
    assert eval_next_token_accuracy(m, [0] * 40) == 1.0
    assert eval_next_token_accuracy(m, [0] + [3, 5, 7] * 13) == 0.0


def test_uniform_model_perplexity_is_vocab():
    m = constant_model(vocab=16, strength=0.0)
    assert eval_perplexity(m, list(range(16)) * 3) == pytest.approx(16, abs=1e-3)


def test_confident_correct_model_perplexity_is_one():
    m = constant_model(favourite=0, strength=200.0)
    assert eval_perplexity(m, [0] * 40) == pytest.approx(1.0, abs=1e-9)


def test_too_short():
    m = constant_model()
    for fn in (eval_next_token_accuracy, eval_perplexity):
        with pytest.raises(InvalidInput):
            fn(m, [1])


@pytest.mark.parametrize("n", [5, 32, 33, 80])
def test_accuracy_matches_recount(n):
    m = init_random(toy_config(), seed=3, std=0.3)
    toks = np.random.default_rng(n).integers(0, 64, n).tolist()
    assert eval_next_token_accuracy(m, toks) == recount_accuracy(m, toks)


def test_perplexity_matches_fp64_recount():
    m = init_random(toy_config(), seed=4, std=0.2)
    toks = np.random.default_rng(0).integers(0, 64, 30).tolist()
    logits = oracles.forward_fp64(m, toks[:-1])
    want = math.exp(math.fsum(oracles.nll_fp64(logits, toks[1:])) / (len(toks) - 1))
    assert eval_perplexity(m, toks) == pytest.approx(want, rel=1e-4)
    assert evaluate(m, toks, Metric.PERPLEXITY) == eval_perplexity(m, toks)


def test_every_target_scored_once_across_windows():
    # with window 32 and 80 tokens there are 79 targets; accuracy must be k/79
    m = init_random(toy_config(), seed=5, std=0.3)
    toks = np.random.default_rng(1).integers(0, 64, 80).tolist()
    acc = eval_next_token_accuracy(m, toks)
    assert round(acc * 79) == pytest.approx(acc * 79, abs=1e-9)


def test_relative_loss_arithmetic():
    assert relative_loss(0.8, 0.76, Metric.NEXT_TOKEN_ACCURACY) == pytest.approx(0.05)
    assert relative_loss(0.8, 0.84, Metric.NEXT_TOKEN_ACCURACY) == pytest.approx(-0.05)
    assert relative_loss(10.0, 10.5, Metric.PERPLEXITY) == pytest.approx(0.05)
    assert relative_loss(0.0, 0.0, Metric.NEXT_TOKEN_ACCURACY) == 0.0
    assert Metric.NEXT_TOKEN_ACCURACY.higher_is_better and not Metric.PERPLEXITY.higher_is_better
