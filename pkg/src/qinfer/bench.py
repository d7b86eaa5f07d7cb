"""Per-token latency benchmark (prefill + decode), default 32 prompt / 32 new tokens."""
from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidConfig
from .kernels import KernelConfig
from .model import Model
from .runtime import GenParams, generate


@dataclass
class BenchRow:
    iter: int
    token_index: int
    ms: float
    phase: str  # "first" (prefill + first token) or "decode"


@dataclass
class BenchResult:
    rows: list[BenchRow] = field(default_factory=list)

    def _ms(self, phase: str) -> list[float]:
        return [r.ms for r in self.rows if r.phase == phase]

    @property
    def first_token_ms(self) -> list[float]:
        return self._ms("first")

    @property
    def decode_ms(self) -> list[float]:
        return self._ms("decode")

    def summary(self) -> dict[str, float]:
        first, dec = self.first_token_ms, self.decode_ms
        out = {
            "first_token_mean_ms": statistics.fmean(first) if first else float("nan"),
            "decode_mean_ms": statistics.fmean(dec) if dec else float("nan"),
            "decode_median_ms": statistics.median(dec) if dec else float("nan"),
        }
        out["decode_p90_ms"] = float(np.percentile(dec, 90)) if dec else float("nan")
        return out

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iter", "token_index", "ms", "phase"])
            for r in self.rows:
                w.writerow([r.iter, r.token_index, f"{r.ms:.6f}", r.phase])


def bench_prompt(model: Model, in_tokens: int, seed: int) -> list[int]:
    rng = np.random.default_rng(seed)
    return [int(t) for t in rng.integers(0, model.config.vocab_size, in_tokens)]


def run_bench(
    model: Model,
    in_tokens: int = 32,
    out_tokens: int = 32,
    warmup: int = 1,
    iters: int = 5,
    seed: int = 0,
    cfg: Optional[KernelConfig] = None,
) -> BenchResult:
    """Greedy generation repeated ``iters`` times after ``warmup`` unrecorded runs."""
    if in_tokens < 1 or out_tokens < 1 or iters < 1 or warmup < 0:
        raise InvalidConfig("bench needs in/out tokens >= 1, iters >= 1, warmup >= 0")
    prompt = bench_prompt(model, in_tokens, seed)
    params = GenParams(max_new_tokens=out_tokens, seed=seed)
    for _ in range(warmup):
        generate(model, prompt, params, cfg)
    res = BenchResult()
    for it in range(iters):
        gen = generate(model, prompt, params, cfg)
        res.rows.append(BenchRow(it, 0, gen.first_token_ms, "first"))
        res.rows.extend(BenchRow(it, i + 1, ms, "decode") for i, ms in enumerate(gen.token_ms))
    return res
