"""Automatic INT4 quantization flow.

Quantize the FP32 model with each candidate recipe in order, measure the
metric against the FP32 baseline on the same tokens, and stop at the first
recipe within the target relative loss. When nothing passes, the candidate
with the smallest loss is returned with ``passed=False``.
"""
from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .errors import InvalidConfig, NoRecipeMet, ShapeError
from .evaluate import Metric, evaluate, relative_loss
from .kernels import KernelConfig
from .model import Model, quantize_model
from .quant import QuantRecipe

DEFAULT_RECIPE_ORDER = tuple(
    QuantRecipe.parse(s)
    for s in (
        "rtn-asym-g32-int8",
        "rtn-asym-g64-int8",
        "rtn-asym-g128-int8",
        "rtn-sym-g32-int8",
        "rtn-asym-g32-fp32",
        "rtn-asym-pc-int8",
        "rtn-sym-pc-int8",
    )
)


@dataclass
class TuneConfig:
    eval_tokens: Sequence[int]
    target_relative_loss: float = 0.01
    recipe_order: Sequence[QuantRecipe] = DEFAULT_RECIPE_ORDER
    metric: Metric = Metric.NEXT_TOKEN_ACCURACY
    quantize_lm_head: bool = True

    def __post_init__(self):
        if not 0 <= self.target_relative_loss <= 1:
            raise InvalidConfig(f"target must be in [0, 1], got {self.target_relative_loss}")
        if not self.recipe_order:
            raise InvalidConfig("recipe order is empty")


@dataclass
class EvalReport:
    recipe: QuantRecipe
    metric: Metric
    baseline_metric: float
    candidate_metric: Optional[float]
    relative_loss: Optional[float]
    passed: bool
    wall_time_s: float = 0.0
    error: Optional[str] = None  # recipe not applicable to this model

    def to_record(self) -> dict:
        rec = {
            "recipe": str(self.recipe),
            "metric": self.metric.value,
            "baseline": self.baseline_metric,
            "candidate": self.candidate_metric,
            "relative_loss": self.relative_loss,
            "passed": self.passed,
            "wall_time_s": self.wall_time_s,
        }
        if self.error is not None:
            rec["error"] = self.error
        return rec


@dataclass
class TuneResult:
    model: Optional[Model]
    report: EvalReport
    trail: list[EvalReport] = field(default_factory=list)

    @property
    def met(self) -> bool:
        return self.report.passed


def evaluate_recipe(
    fp32_model: Model,
    recipe: QuantRecipe,
    baseline: float,
    cfg: TuneConfig,
    kernel_cfg: Optional[KernelConfig] = None,
) -> tuple[Optional[Model], EvalReport]:
    t0 = time.perf_counter()
    try:
        qmodel = quantize_model(fp32_model, recipe, quantize_lm_head=cfg.quantize_lm_head)
    except ShapeError as e:
        return None, EvalReport(recipe, cfg.metric, baseline, None, None, False,
                                time.perf_counter() - t0, error=str(e))
    cand = evaluate(qmodel, cfg.eval_tokens, cfg.metric, kernel_cfg)
    loss = relative_loss(baseline, cand, cfg.metric)
    return qmodel, EvalReport(
        recipe, cfg.metric, baseline, cand, loss,
        passed=loss <= cfg.target_relative_loss,
        wall_time_s=time.perf_counter() - t0,
    )


def tune(fp32_model: Model, cfg: TuneConfig, kernel_cfg: Optional[KernelConfig] = None) -> TuneResult:
    if fp32_model.is_quantized:
        raise InvalidConfig("tuning needs an FP32 model")
    baseline = evaluate(fp32_model, cfg.eval_tokens, cfg.metric, kernel_cfg)
    trail: list[EvalReport] = []
    best: Optional[tuple[Optional[Model], EvalReport]] = None
    for recipe in cfg.recipe_order:
        qmodel, rep = evaluate_recipe(fp32_model, recipe, baseline, cfg, kernel_cfg)
        trail.append(rep)
        if rep.passed:
            return TuneResult(qmodel, rep, trail)
        if rep.relative_loss is not None and (best is None or rep.relative_loss < best[1].relative_loss):
            best = (qmodel, rep)
    if best is None:
        best = (None, trail[0])
    warnings.warn(
        f"no recipe met relative loss <= {cfg.target_relative_loss}; "
        f"best was {best[1].recipe} at {best[1].relative_loss}",
        NoRecipeMet,
        stacklevel=2,
    )
    return TuneResult(best[0], best[1], trail)


def trail_lines(trail: Sequence[EvalReport], include_timing: bool = True) -> list[str]:
    out = []
    for rep in trail:
        rec = rep.to_record()
        if not include_timing:
            rec.pop("wall_time_s")
        out.append(json.dumps(rec, sort_keys=True))
    return out


def write_trail(trail: Sequence[EvalReport], path) -> None:
    Path(path).write_text("".join(line + "\n" for line in trail_lines(trail)))


def read_trail(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
