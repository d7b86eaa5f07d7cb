"""Linear-layer kernels.

Three compute routes share one accumulation order so that any tiling or
thread count produces bit-identical output:

* ``dense_linear``  FP32 weights, FP32 math
* ``qlinear_fp32``  INT4 weights dequantized group by group inside the reduction
* ``qlinear_int8``  INT4 weights times dynamically quantized INT8 activations,
  integer dot per group, rescaled into an FP32 accumulator

For every output element the reduction runs over the input dimension in
ascending order (ascending group, ascending index within a group) into a
single float32 accumulator. Tiles only partition the *output*, and
reduction blocks carry the accumulator through ``out``, so blocking never
changes the arithmetic.
"""
from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numba as nb
import numpy as np

from .errors import InvalidConfig, ShapeError
from .quant import (
    ComputePath,
    DynQuantActivation,
    QuantizedTensor,
    quantize_activations,
)

# rows unpacked together; amortizes nibble extraction across the batch
_ROW_BLOCK = 8


@dataclass(frozen=True)
class KernelConfig:
    tile_rows: int = 32  # batch rows per tile
    tile_cols: int = 256  # output channels per tile
    reduction_block: int = 1024  # input channels per reduction block
    threads: int = 1

    def __post_init__(self):
        for f in ("tile_rows", "tile_cols", "reduction_block", "threads"):
            if getattr(self, f) < 1:
                raise InvalidConfig(f"KernelConfig.{f} must be >= 1")

    def groups_per_block(self, cols: int, group_size: int) -> int:
        """Reduction block length in groups; the block must hold whole groups."""
        if self.reduction_block >= cols:
            return cols // group_size
        if self.reduction_block % group_size:
            raise InvalidConfig(
                f"reduction_block {self.reduction_block} not divisible by group size {group_size}"
            )
        return self.reduction_block // group_size


# ---------------------------------------------------------------------------
# parallel-for
# ---------------------------------------------------------------------------

_pools: dict[int, ThreadPoolExecutor] = {}
_pools_lock = threading.Lock()


def _pool(threads: int) -> ThreadPoolExecutor:
    with _pools_lock:
        pool = _pools.get(threads)
        if pool is None:
            pool = _pools[threads] = ThreadPoolExecutor(threads, thread_name_prefix="qinfer")
        return pool


def parallel_for(tasks: Sequence, fn: Callable, threads: int) -> None:
    """Run ``fn(task)`` for every task. Tasks must write disjoint outputs."""
    if threads <= 1 or len(tasks) <= 1:
        for t in tasks:
            fn(t)
        return
    for f in [_pool(threads).submit(fn, t) for t in tasks]:
        f.result()


def _tiles(batch: int, rows: int, cfg: KernelConfig):
    return [
        (b0, min(b0 + cfg.tile_rows, batch), r0, min(r0 + cfg.tile_cols, rows))
        for r0 in range(0, rows, cfg.tile_cols)
        for b0 in range(0, batch, cfg.tile_rows)
    ]


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@nb.njit(nogil=True, cache=True)
def _gemm_ref_kernel(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc


@nb.njit(nogil=True, cache=True)
def _dense_tile(x, w, out, b0, b1, r0, r1, kblock):
    k_total = x.shape[1]
    for k0 in range(0, k_total, kblock):
        k1 = min(k0 + kblock, k_total)
        for b in range(b0, b1):
            xb = x[b]
            for r in range(r0, r1):
                wr = w[r]
                acc = out[b, r]
                for k in range(k0, k1):
                    acc += xb[k] * wr[k]
                out[b, r] = acc


@nb.njit(nogil=True, cache=True)
def _fp32_tile(x, packed, wscale, wzp, group, out, b0, b1, r0, r1, kgroups):
    ngroups = wscale.shape[1]
    deq = np.empty((_ROW_BLOCK, kgroups * group), np.float32)
    for rb0 in range(r0, r1, _ROW_BLOCK):
        rb1 = min(rb0 + _ROW_BLOCK, r1)
        for g0 in range(0, ngroups, kgroups):
            g1 = min(g0 + kgroups, ngroups)
            k0 = g0 * group
            for rr in range(rb1 - rb0):
                r = rb0 + rr
                row = packed[r]
                for g in range(g0, g1):
                    s = wscale[r, g]
                    z = np.int32(wzp[r, g])
                    base = g * group
                    for j in range(base // 2, (base + group) // 2):
                        v = np.int32(row[j])
                        deq[rr, 2 * j - k0] = s * np.float32((v & 15) - z)
                        deq[rr, 2 * j + 1 - k0] = s * np.float32((v >> 4) - z)
            n = (g1 - g0) * group
            for b in range(b0, b1):
                xb = x[b]
                for rr in range(rb1 - rb0):
                    r = rb0 + rr
                    d = deq[rr]
                    acc = out[b, r]
                    for k in range(n):
                        acc += xb[k0 + k] * d[k]
                    out[b, r] = acc


@nb.njit(nogil=True, cache=True)
def _int8_tile(
    a_even, a_odd, a_sum, a_scale, packed, wscale, wzp, group,
    out, gacc, record, b0, b1, r0, r1, kgroups,
):
    ngroups = wscale.shape[1]
    half = group // 2
    prod = np.empty(kgroups * half, np.int32)
    for g0 in range(0, ngroups, kgroups):
        g1 = min(g0 + kgroups, ngroups)
        j0 = g0 * half
        n = (g1 - g0) * half
        for b in range(b0, b1):
            ae = a_even[b, j0:j0 + n]
            ao = a_odd[b, j0:j0 + n]
            for r in range(r0, r1):
                row = packed[r, j0:j0 + n]
                for j in range(n):
                    v = np.int32(row[j])
                    prod[j] = ae[j] * (v & 15) + ao[j] * (v >> 4)
                acc = out[b, r]
                for g in range(g0, g1):
                    s = (g - g0) * half
                    idot = prod[s:s + half].sum()
                    corr = idot - np.int64(wzp[r, g]) * np.int64(a_sum[b, g])
                    if record:
                        gacc[b, r, g] = corr
                    acc += np.float32(corr) * (a_scale[b, g] * wscale[r, g])
                out[b, r] = acc


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def _as_batch(x) -> np.ndarray:
    a = np.ascontiguousarray(x, dtype=np.float32)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"activations must be 1-D or 2-D, got shape {a.shape}")
    return a


def _finish(out: np.ndarray, bias) -> np.ndarray:
    if bias is not None:
        b = np.asarray(bias, dtype=np.float32)
        if b.shape != (out.shape[1],):
            raise ShapeError(f"bias shape {b.shape} does not match output width {out.shape[1]}")
        out += b
    return out


def gemm_ref(a, b) -> np.ndarray:
    """Naive triple-loop product, float32 accumulation, ascending k."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    _gemm_ref_kernel(a, b, out)
    return out


def dense_linear(x, w: np.ndarray, bias=None, cfg: Optional[KernelConfig] = None) -> np.ndarray:
    """``x @ w.T (+ bias)`` for an FP32 weight of shape (out, in)."""
    x = _as_batch(x)
    w = np.ascontiguousarray(w, dtype=np.float32)
    if w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"input width {x.shape[1]} does not match weight {w.shape}")
    batch, rows = x.shape[0], w.shape[0]
    out = np.zeros((batch, rows), dtype=np.float32)
    if cfg is None:
        _dense_tile(x, w, out, 0, batch, 0, rows, x.shape[1])
    else:
        kb = min(cfg.reduction_block, x.shape[1])
        parallel_for(
            _tiles(batch, rows, cfg),
            lambda t: _dense_tile(x, w, out, t[0], t[1], t[2], t[3], kb),
            cfg.threads,
        )
    return _finish(out, bias)


def _check_q(x: np.ndarray, w: QuantizedTensor) -> None:
    if x.shape[1] != w.cols:
        raise ShapeError(f"input width {x.shape[1]} does not match weight cols {w.cols}")


def qlinear_fp32(x, w: QuantizedTensor, bias=None, cfg: Optional[KernelConfig] = None) -> np.ndarray:
    """INT4 weights, FP32 compute: dequantize one reduction block of rows at a time."""
    x = _as_batch(x)
    _check_q(x, w)
    batch, rows, gs = x.shape[0], w.rows, w.group_size
    out = np.zeros((batch, rows), dtype=np.float32)
    zp = w.effective_zero_points
    if cfg is None:
        _fp32_tile(x, w.packed, w.scales, zp, gs, out, 0, batch, 0, rows, w.groups_per_row)
    else:
        kg = cfg.groups_per_block(w.cols, gs)
        parallel_for(
            _tiles(batch, rows, cfg),
            lambda t: _fp32_tile(x, w.packed, w.scales, zp, gs, out, t[0], t[1], t[2], t[3], kg),
            cfg.threads,
        )
    return _finish(out, bias)


def _split_activation(act: DynQuantActivation):
    codes = act.codes.astype(np.int32)
    even = np.ascontiguousarray(codes[:, 0::2])
    odd = np.ascontiguousarray(codes[:, 1::2])
    batch, cols = codes.shape
    sums = codes.reshape(batch, cols // act.group_size, act.group_size).sum(axis=-1, dtype=np.int64)
    return even, odd, sums, act.scales


def _run_int8(act: DynQuantActivation, w: QuantizedTensor, cfg, gacc=None) -> np.ndarray:
    if act.codes.shape[1] != w.cols:
        raise ShapeError(f"input width {act.codes.shape[1]} does not match weight cols {w.cols}")
    if act.group_size != w.group_size:
        raise ShapeError(
            f"activation group size {act.group_size} differs from weight group size {w.group_size}"
        )
    even, odd, sums, ascale = _split_activation(act)
    batch, rows, gs = act.codes.shape[0], w.rows, w.group_size
    zp = w.effective_zero_points
    out = np.zeros((batch, rows), dtype=np.float32)
    record = gacc is not None
    if gacc is None:
        gacc = np.zeros((1, 1, 1), dtype=np.int64)
    if cfg is None:
        _int8_tile(even, odd, sums, ascale, w.packed, w.scales, zp, gs,
                   out, gacc, record, 0, batch, 0, rows, w.groups_per_row)
    else:
        kg = cfg.groups_per_block(w.cols, gs)
        parallel_for(
            _tiles(batch, rows, cfg),
            lambda t: _int8_tile(even, odd, sums, ascale, w.packed, w.scales, zp, gs,
                                 out, gacc, record, t[0], t[1], t[2], t[3], kg),
            cfg.threads,
        )
    return out


def qlinear_int8(
    x,
    w: QuantizedTensor,
    bias=None,
    cfg: Optional[KernelConfig] = None,
    act: Optional[DynQuantActivation] = None,
) -> np.ndarray:
    """INT4 weights, INT8 compute.

    ``act`` may carry an already-quantized activation so that several
    projections of the same input (q/k/v) share one quantization pass.
    """
    if act is None:
        xb = _as_batch(x)
        _check_q(xb, w)
        act = quantize_activations(xb, w.group_size)
    return _finish(_run_int8(act, w, cfg), bias)


def int8_group_accumulators(x, w: QuantizedTensor) -> np.ndarray:
    """Per-(batch, row, group) integer sums the INT8 kernel feeds into its rescale.

    Each entry is ``sum(a_code * w_code) - zero_point * sum(a_code)``.
    """
    xb = _as_batch(x)
    _check_q(xb, w)
    act = quantize_activations(xb, w.group_size)
    gacc = np.zeros((xb.shape[0], w.rows, w.groups_per_row), dtype=np.int64)
    _run_int8(act, w, None, gacc)
    return gacc


def qlinear(x, w: QuantizedTensor, bias=None, cfg: Optional[KernelConfig] = None, act=None) -> np.ndarray:
    """Dispatch on the weight recipe's compute path."""
    if w.recipe.compute_path is ComputePath.INT8:
        return qlinear_int8(x, w, bias, cfg, act=act)
    return qlinear_fp32(x, w, bias, cfg)


def linear(x, w, bias=None, cfg: Optional[KernelConfig] = None, act=None) -> np.ndarray:
    if isinstance(w, QuantizedTensor):
        return qlinear(x, w, bias, cfg, act=act)
    return dense_linear(x, w, bias, cfg)
