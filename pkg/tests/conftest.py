from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from qinfer import modelio
from qinfer.corpus import split_tokens, synthetic_tokens
from qinfer.model import ActivationKind, ModelConfig, NormKind, init_random

# Tiny model trained once per cache directory and reused across sessions.
TRAIN_MODEL = dict(vocab_size=256, n_layers=2, n_heads=4, head_dim=32, ffn_dim=384, max_seq_len=128)
TRAIN_RUN = dict(steps=800, batch_size=16, seq_len=64, lr=3e-3, seed=0)
CORPUS_BYTES = 60_000
HOLDOUT = 0.1
EVAL_TOKENS = 3000

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_config(**kw) -> ModelConfig:
    base = dict(vocab_size=64, n_layers=2, n_heads=2, head_dim=16, ffn_dim=64, max_seq_len=32)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def toy_model():
    return init_random(toy_config(), seed=7, std=0.1)


@pytest.fixture(params=[(NormKind.RMSNORM, ActivationKind.SILU_GATED), (NormKind.LAYERNORM, ActivationKind.GELU)],
                ids=["rms-silu", "ln-gelu"])
def toy_variant(request):
    norm, act = request.param
    return init_random(toy_config(norm_kind=norm, activation_kind=act), seed=11, std=0.1)


@pytest.fixture(scope="session")
def corpus():
    toks = synthetic_tokens(CORPUS_BYTES, seed=0)
    train, held = split_tokens(toks, HOLDOUT)
    return train, held[:EVAL_TOKENS]


@pytest.fixture(scope="session")
def trained_model_path(request, corpus):
    pytest.importorskip("torch")
    from qinfer.train import TrainConfig, train

    key = hashlib.sha256(json.dumps([TRAIN_MODEL, TRAIN_RUN, CORPUS_BYTES, HOLDOUT]).encode()).hexdigest()[:12]
    path = Path(request.config.cache.mkdir("qinfer-trained")) / f"tiny-{key}.nqf"
    if not path.exists():
        model, _ = train(ModelConfig(**TRAIN_MODEL), corpus[0], TrainConfig(**TRAIN_RUN))
        modelio.save(model, path)
    return path


@pytest.fixture(scope="session")
def trained_model(trained_model_path):
    return modelio.load(trained_model_path)


@pytest.fixture(scope="session")
def eval_tokens_path(tmp_path_factory, corpus):
    p = tmp_path_factory.mktemp("eval") / "heldout.txt"
    p.write_bytes(bytes(corpus[1]))
    return p


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    results = item.config.stash.setdefault(_ACCEPTANCE_KEY, {})
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed:
        detail = (detail + "; " if detail else "") + f"failed in {rep.when}"
    results.setdefault(mark.args[0], {})[item.name] = (rep.passed, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE_KEY, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        parts = results[n]
        ok = all(p for p, _ in parts.values())
        detail = "; ".join(d for _, d in parts.values() if d)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
