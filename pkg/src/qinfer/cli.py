"""Command-line entry point.

Exit codes: 0 success, 1 internal error, 2 usage or input error,
3 tuning finished best-effort without meeting the target.
"""
from __future__ import annotations

import argparse
import statistics
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

from . import autotune, bench, modelio
from .errors import EngineError, InvalidConfig, NoRecipeMet
from .evaluate import Metric, evaluate, relative_loss
from .kernels import KernelConfig
from .model import Model, quantize_model
from .quant import QuantRecipe
from .runtime import ByteTokenizer, GenParams, Sampling, generate

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_BEST_EFFORT = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _recipe(text: str) -> QuantRecipe:
    try:
        return QuantRecipe.parse(text)
    except InvalidConfig as e:
        raise argparse.ArgumentTypeError(str(e))


def _recipes(text: str) -> list[QuantRecipe]:
    return [_recipe(s) for s in text.split(",") if s.strip()]


def _sampling(text: str) -> Sampling:
    try:
        return Sampling.parse(text)
    except InvalidConfig as e:
        raise argparse.ArgumentTypeError(str(e))


def _metric(text: str) -> Metric:
    try:
        return Metric(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"metric must be one of {[m.value for m in Metric]}")


def read_tokens(path) -> list[int]:
    """Token file: ``*.ids`` holds whitespace-separated ids, anything else is raw bytes."""
    p = Path(path)
    if p.suffix == ".ids":
        try:
            return [int(t) for t in p.read_text().split()]
        except ValueError as e:
            raise UsageError(f"{path}: {e}") from None
    return list(p.read_bytes())


def _load_model(path) -> Model:
    if not Path(path).is_file():
        raise UsageError(f"model file not found: {path}")
    model = modelio.load(path)
    model.validate()
    return model


def _kernel_cfg(args) -> KernelConfig:
    return KernelConfig(threads=args.threads)


def _print_config(args) -> None:
    parts = []
    for k, v in sorted(vars(args).items()):
        if k == "func":
            continue
        if isinstance(v, list):
            v = ",".join(map(str, v))
        elif isinstance(v, Metric):
            v = v.value
        parts.append(f"{k}={v}")
    print("# config: " + " ".join(parts))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_quantize(args) -> int:
    model = _load_model(args.model)
    if model.is_quantized:
        raise UsageError("input model is already quantized")
    qmodel = quantize_model(model, args.recipe, quantize_lm_head=not args.keep_lm_head)
    modelio.save(qmodel, args.out)
    print(modelio.memory_report(qmodel).format())
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_tune(args) -> int:
    model = _load_model(args.model)
    cfg = autotune.TuneConfig(
        eval_tokens=read_tokens(args.eval_tokens),
        target_relative_loss=args.target,
        recipe_order=args.recipes or autotune.DEFAULT_RECIPE_ORDER,
        metric=args.metric,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NoRecipeMet)
        result = autotune.tune(model, cfg, _kernel_cfg(args))
    for line in autotune.trail_lines(result.trail, include_timing=False):
        print(f"# trial {line}")
    if args.trail_out:
        autotune.write_trail(result.trail, args.trail_out)
    if args.out and result.model is not None:
        modelio.save(result.model, args.out)
    rep = result.report
    status = "PASS" if result.met else "NoRecipeMet"
    print(
        f"{status} recipe={rep.recipe} baseline={rep.baseline_metric:.6f} "
        f"candidate={rep.candidate_metric} relative_loss={rep.relative_loss} "
        f"target={args.target} tried={len(result.trail)}"
    )
    return EXIT_OK if result.met else EXIT_BEST_EFFORT


def cmd_run(args) -> int:
    model = _load_model(args.model)
    if args.recipe is not None:
        model = quantize_model(model, args.recipe)
    tok = ByteTokenizer()
    prompt = tok.encode(args.prompt)
    params = GenParams(args.max_new, args.sampling, args.seed, args.temperature)
    res = generate(model, prompt, params, _kernel_cfg(args))
    print(args.prompt + tok.decode(res.tokens))
    first = f"{res.first_token_ms:.3f}" if res.first_token_ms is not None else "n/a"
    if res.token_ms:
        mean = f"{statistics.fmean(res.token_ms):.3f}"
        median = f"{statistics.median(res.token_ms):.3f}"
    else:
        mean = median = "n/a"
    print(f"# latency: first_token_ms={first} decode_mean_ms={mean} "
          f"decode_median_ms={median} new_tokens={len(res.tokens)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    if args.recipe is not None:
        model = quantize_model(model, args.recipe)
    tokens = read_tokens(args.tokens)
    value = evaluate(model, tokens, args.metric, _kernel_cfg(args))
    print(f"{args.metric.value}={value:.6f} tokens={len(tokens)}")
    if args.baseline:
        base = evaluate(_load_model(args.baseline), tokens, args.metric, _kernel_cfg(args))
        loss = relative_loss(base, value, args.metric)
        print(f"baseline={base:.6f} relative_loss={loss:.6f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    model = _load_model(args.model)
    if args.recipe is not None:
        model = quantize_model(model, args.recipe)
    res = bench.run_bench(model, args.in_tokens, args.out_tokens, args.warmup, args.iters,
                          args.seed, _kernel_cfg(args))
    if args.csv:
        res.write_csv(args.csv)
    s = res.summary()
    print(" ".join(f"{k}={v:.3f}" for k, v in s.items()))
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = modelio.load(args.model)
    print(modelio.format_config_text(model.config), end="")
    print(f"tensors = {len(model.tensors)}")
    print(modelio.memory_report(model).format())
    return EXIT_OK


def cmd_train(args) -> int:
    from .corpus import split_tokens, synthetic_tokens
    from .train import TrainConfig, train

    cfg = modelio.load_config(args.config)
    tokens = read_tokens(args.corpus) if args.corpus else synthetic_tokens(args.synthetic_bytes, args.seed)
    train_toks, _ = split_tokens(tokens, args.holdout)
    tc = TrainConfig(steps=args.steps, batch_size=args.batch_size, seq_len=args.seq_len,
                     lr=args.lr, seed=args.seed)
    model, losses = train(cfg, train_toks, tc, log=lambda s, l: print(f"step {s} loss {l:.4f}"))
    modelio.save(model, args.out)
    print(f"final loss {losses[-1]:.4f}; wrote {args.out}")
    return EXIT_OK


def cmd_corpus(args) -> int:
    from .corpus import split_tokens, synthetic_tokens

    toks = synthetic_tokens(args.bytes, args.seed)
    if args.holdout_out:
        train_toks, held = split_tokens(toks, args.holdout)
        Path(args.out).write_bytes(bytes(train_toks))
        Path(args.holdout_out).write_bytes(bytes(held))
    else:
        Path(args.out).write_bytes(bytes(toks))
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qinfer", description="INT4 weight-only CPU inference engine")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=func)
        return sp

    def threads(sp):
        sp.add_argument("--threads", type=int, default=1, help="kernel thread budget")

    sp = add("quantize", cmd_quantize, "quantize an FP32 model file")
    sp.add_argument("--model", required=True)
    sp.add_argument("--recipe", type=_recipe, required=True, help="e.g. rtn-asym-g32-int8")
    sp.add_argument("--out", required=True)
    sp.add_argument("--keep-lm-head", action="store_true", help="leave the LM head in FP32")

    sp = add("tune", cmd_tune, "search quantization recipes against an accuracy target")
    sp.add_argument("--model", required=True)
    sp.add_argument("--eval-tokens", required=True)
    sp.add_argument("--target", type=float, default=0.01, help="max relative loss vs FP32")
    sp.add_argument("--recipes", type=_recipes, default=None, help="comma-separated recipe order")
    sp.add_argument("--metric", type=_metric, default=Metric.NEXT_TOKEN_ACCURACY)
    sp.add_argument("--trail-out", default=None, help="write the JSON-lines tuning trail here")
    sp.add_argument("--out", default=None, help="save the selected quantized model")
    threads(sp)

    sp = add("run", cmd_run, "generate text")
    sp.add_argument("--model", required=True)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--max-new", type=int, default=32)
    sp.add_argument("--sampling", type=_sampling, default=Sampling())
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--recipe", type=_recipe, default=None, help="quantize on load")
    threads(sp)

    sp = add("eval", cmd_eval, "teacher-forced accuracy or perplexity")
    sp.add_argument("--model", required=True)
    sp.add_argument("--tokens", required=True)
    sp.add_argument("--metric", type=_metric, default=Metric.NEXT_TOKEN_ACCURACY)
    sp.add_argument("--baseline", default=None, help="FP32 model for relative loss")
    sp.add_argument("--recipe", type=_recipe, default=None, help="quantize on load")
    threads(sp)

    sp = add("bench", cmd_bench, "per-token latency benchmark")
    sp.add_argument("--model", required=True)
    sp.add_argument("--in-tokens", type=int, default=32)
    sp.add_argument("--out-tokens", type=int, default=32)
    sp.add_argument("--warmup", type=int, default=1)
    sp.add_argument("--iters", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--csv", default=None)
    sp.add_argument("--recipe", type=_recipe, default=None, help="quantize on load")
    threads(sp)

    sp = add("inspect", cmd_inspect, "print config, tensor table and memory report")
    sp.add_argument("--model", required=True)

    sp = add("train", cmd_train, "train a small FP32 model (needs torch)")
    sp.add_argument("--config", required=True, help="key = value model config file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--corpus", default=None, help="training text (raw bytes); default synthetic")
    sp.add_argument("--synthetic-bytes", type=int, default=60000)
    sp.add_argument("--holdout", type=float, default=0.1)
    sp.add_argument("--steps", type=int, default=800)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--seq-len", type=int, default=64)
    sp.add_argument("--lr", type=float, default=3e-3)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("corpus", cmd_corpus, "write the synthetic corpus as raw bytes")
    sp.add_argument("--out", required=True)
    sp.add_argument("--bytes", type=int, default=60000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--holdout", type=float, default=0.1)
    sp.add_argument("--holdout-out", default=None, help="also split off the held-out tail here")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _print_config(args)
    try:
        return args.func(args)
    except (UsageError, EngineError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
