"""Deterministic synthetic text corpus for training and evaluating tiny models."""
from __future__ import annotations

import numpy as np

_SUBJECTS = [
    "the cat", "a dog", "my friend", "the old man", "a small bird", "the teacher",
    "her brother", "the farmer", "a young girl", "the captain", "our neighbor", "the baker",
]
_VERBS = [
    "sees", "likes", "finds", "follows", "paints", "watches", "carries", "remembers",
]
_OBJECTS = [
    "the red ball", "a green tree", "the quiet river", "an open door", "the long road",
    "a wooden boat", "the bright moon", "a heavy stone", "the silver key", "a warm coat",
]
_ENDINGS = [".", " today.", " again.", " at night.", " in the morning.", " by the lake."]


def synthetic_text(n_sentences: int, seed: int = 0) -> str:
    """Sentences of the form ``<subject> <verb> <object><ending>`` joined by newlines."""
    rng = np.random.default_rng(seed)
    picks = [
        rng.integers(0, len(pool), n_sentences)
        for pool in (_SUBJECTS, _VERBS, _OBJECTS, _ENDINGS)
    ]
    lines = [
        f"{_SUBJECTS[s]} {_VERBS[v]} {_OBJECTS[o]}{_ENDINGS[e]}"
        for s, v, o, e in zip(*picks)
    ]
    return "\n".join(lines) + "\n"


def synthetic_tokens(n_bytes: int, seed: int = 0) -> list[int]:
    """At least ``n_bytes`` byte tokens of synthetic text, truncated to exactly that length."""
    text = synthetic_text(max(1, n_bytes // 20), seed)
    while len(text) < n_bytes:
        text += synthetic_text(max(1, n_bytes // 20), seed + len(text))
    return list(text.encode("ascii")[:n_bytes])


def split_tokens(tokens, holdout: float = 0.1) -> tuple[list[int], list[int]]:
    """Deterministic train / held-out split: the last ``holdout`` fraction is held out."""
    cut = int(len(tokens) * (1 - holdout))
    return list(tokens[:cut]), list(tokens[cut:])
