"""Group-wise round-to-nearest INT4 weight quantization and dynamic INT8
activation quantization.

Weights are quantized per output row, in contiguous groups along the input
dimension. Codes are 4-bit unsigned values in [0, 15]:

* asymmetric: ``w ~= scale * (code - zero_point)`` with one zero-point per group
* symmetric:  ``w ~= scale * (code - 8)``, scale = absmax / 7

Rounding is half-away-from-zero everywhere.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import FormatError, InvalidConfig, InvalidInput, ShapeError

ALLOWED_GROUP_SIZES = (32, 64, 128, 256, 512, 1024)
SYMMETRIC_OFFSET = 8


class QuantScheme(enum.Enum):
    SYMMETRIC = "sym"
    ASYMMETRIC = "asym"


class ComputePath(enum.Enum):
    FP32 = "fp32"
    INT8 = "int8"


@dataclass(frozen=True)
class QuantGranularity:
    """``group_size=None`` means per-channel: one group spanning the whole row."""

    group_size: Optional[int] = None

    def __post_init__(self):
        if self.group_size is not None and self.group_size not in ALLOWED_GROUP_SIZES:
            raise InvalidConfig(
                f"group size {self.group_size} not in {ALLOWED_GROUP_SIZES}"
            )

    @classmethod
    def per_channel(cls) -> "QuantGranularity":
        return cls(None)

    @classmethod
    def grouped(cls, group_size: int) -> "QuantGranularity":
        return cls(group_size)

    @property
    def is_per_channel(self) -> bool:
        return self.group_size is None

    def effective_group_size(self, cols: int) -> int:
        return cols if self.group_size is None else self.group_size

    def __str__(self) -> str:
        return "pc" if self.group_size is None else f"g{self.group_size}"


_RECIPE_RE = re.compile(r"^rtn-(sym|asym)-(pc|g(\d+))-(fp32|int8)$")


@dataclass(frozen=True)
class QuantRecipe:
    scheme: QuantScheme = QuantScheme.ASYMMETRIC
    granularity: QuantGranularity = QuantGranularity(32)
    compute_path: ComputePath = ComputePath.INT8

    def __str__(self) -> str:
        return f"rtn-{self.scheme.value}-{self.granularity}-{self.compute_path.value}"

    @classmethod
    def parse(cls, text: str) -> "QuantRecipe":
        """Parse the canonical form, e.g. ``rtn-asym-g32-int8`` or ``rtn-sym-pc-fp32``."""
        m = _RECIPE_RE.match(text.strip())
        if m is None:
            raise InvalidConfig(
                f"bad recipe {text!r}; expected rtn-<sym|asym>-<g32..g1024|pc>-<fp32|int8>"
            )
        scheme = QuantScheme(m.group(1))
        gran = QuantGranularity(None if m.group(2) == "pc" else int(m.group(3)))
        return cls(scheme, gran, ComputePath(m.group(4)))


@dataclass
class GroupQuant:
    scale: float
    zero_point: Optional[int]
    codes: np.ndarray  # uint8 stored codes in [0, 15]


@dataclass
class QuantizedTensor:
    """Packed INT4 weight matrix (rows = output channels, cols = input channels)."""

    rows: int
    cols: int
    recipe: QuantRecipe
    packed: np.ndarray  # uint8, shape (rows, cols // 2)
    scales: np.ndarray  # float32, shape (rows, groups_per_row)
    zero_points: Optional[np.ndarray] = None  # uint8, shape (rows, groups_per_row)

    def __post_init__(self):
        if self.cols % 2 or self.cols <= 0 or self.rows <= 0:
            raise FormatError(f"bad quantized tensor dims {self.rows}x{self.cols}")
        g = self.group_size
        if self.cols % g:
            raise FormatError(f"cols {self.cols} not divisible by group size {g}")
        gpr = self.cols // g
        if self.packed.dtype != np.uint8 or self.packed.shape != (self.rows, self.cols // 2):
            raise FormatError(
                f"packed codes have shape {self.packed.shape}, expected {(self.rows, self.cols // 2)}"
            )
        if self.scales.dtype != np.float32 or self.scales.shape != (self.rows, gpr):
            raise FormatError(f"scales have shape {self.scales.shape}, expected {(self.rows, gpr)}")
        asym = self.recipe.scheme is QuantScheme.ASYMMETRIC
        if asym:
            if (
                self.zero_points is None
                or self.zero_points.dtype != np.uint8
                or self.zero_points.shape != (self.rows, gpr)
            ):
                raise FormatError("asymmetric tensor needs uint8 zero-points, one per group")
            if self.zero_points.max(initial=0) > 15:
                raise FormatError("zero-point outside [0, 15]")
        elif self.zero_points is not None:
            raise FormatError("symmetric tensor must not carry zero-points")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def group_size(self) -> int:
        return self.recipe.granularity.effective_group_size(self.cols)

    @property
    def groups_per_row(self) -> int:
        return self.cols // self.group_size

    @property
    def effective_zero_points(self) -> np.ndarray:
        """Zero-points as uint8 for both schemes (symmetric is a constant 8)."""
        if self.zero_points is not None:
            return self.zero_points
        return np.full(self.scales.shape, SYMMETRIC_OFFSET, dtype=np.uint8)

    @property
    def nbytes(self) -> int:
        n = self.packed.nbytes + self.scales.nbytes
        if self.zero_points is not None:
            n += self.zero_points.nbytes
        return n


@dataclass
class DynQuantActivation:
    codes: np.ndarray  # int8, shape (batch, cols)
    scales: np.ndarray  # float32, shape (batch, cols // group_size)
    group_size: int


def round_half_away(x: np.ndarray) -> np.ndarray:
    t = np.trunc(x)
    return t + np.where(np.abs(x - t) >= 0.5, np.sign(x), 0.0)


def _check_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise InvalidInput(f"{what} contains non-finite values")


def _quantize_groups(groups: np.ndarray, scheme: QuantScheme):
    """Quantize the last axis of ``groups``; returns (codes u8, scales f32, zps u8|None)."""
    g = groups.astype(np.float64)
    if scheme is QuantScheme.ASYMMETRIC:
        # range always contains 0 so the zero-point lands in [0, 15] unclamped
        lo = np.minimum(g.min(axis=-1), 0.0)
        hi = np.maximum(g.max(axis=-1), 0.0)
        scale = ((hi - lo) / 15.0).astype(np.float32)
        scale[scale == 0] = 1.0
        s = scale.astype(np.float64)[..., None]
        zp = np.clip(round_half_away(-lo / s[..., 0]), 0, 15)
        codes = np.clip(round_half_away(g / s) + zp[..., None], 0, 15)
        return codes.astype(np.uint8), scale, zp.astype(np.uint8)
    absmax = np.abs(g).max(axis=-1)
    scale = (absmax / 7.0).astype(np.float32)
    scale[scale == 0] = 1.0
    s = scale.astype(np.float64)[..., None]
    codes = np.clip(round_half_away(g / s), -8, 7) + SYMMETRIC_OFFSET
    return codes.astype(np.uint8), scale, None


def quantize_group(values, scheme: QuantScheme) -> GroupQuant:
    v = np.asarray(values, dtype=np.float32).ravel()
    if v.size == 0:
        raise InvalidInput("cannot quantize an empty group")
    _check_finite(v, "group")
    codes, scale, zp = _quantize_groups(v[None, :], scheme)
    return GroupQuant(
        scale=float(scale[0]),
        zero_point=None if zp is None else int(zp[0]),
        codes=codes[0],
    )


def dequantize_group(gq: GroupQuant, scheme: QuantScheme) -> np.ndarray:
    zp = SYMMETRIC_OFFSET if scheme is QuantScheme.SYMMETRIC else gq.zero_point
    if zp is None:
        raise InvalidInput("asymmetric group needs a zero-point")
    return np.float32(gq.scale) * (np.asarray(gq.codes).astype(np.float32) - np.float32(zp))


def pack_nibbles(codes) -> np.ndarray:
    """Pack 4-bit codes two per byte; the even index goes in the low nibble."""
    c = np.asarray(codes)
    if c.shape[-1] % 2:
        raise FormatError(f"nibble packing needs an even length, got {c.shape[-1]}")
    if c.size and (c.min() < 0 or c.max() > 15):
        raise FormatError("codes must lie in [0, 15]")
    c = c.astype(np.uint8)
    return c[..., 0::2] | (c[..., 1::2] << 4)


def unpack_nibbles(packed) -> np.ndarray:
    p = np.asarray(packed)
    if p.dtype != np.uint8:
        if p.size and (p.min() < 0 or p.max() > 255):
            raise FormatError("packed bytes must lie in [0, 255]")
        p = p.astype(np.uint8)
    out = np.empty(p.shape[:-1] + (p.shape[-1] * 2,), dtype=np.uint8)
    out[..., 0::2] = p & 0x0F
    out[..., 1::2] = p >> 4
    return out


def quantize_tensor(weights, recipe: QuantRecipe, name: str = "tensor") -> QuantizedTensor:
    w = np.asarray(weights, dtype=np.float32)
    if w.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D weight matrix, got shape {w.shape}")
    rows, cols = w.shape
    gs = recipe.granularity.effective_group_size(cols)
    if cols == 0 or cols % gs or cols % 2:
        raise ShapeError(f"{name}: input dim {cols} not divisible by group size {gs}")
    _check_finite(w, name)
    codes, scales, zps = _quantize_groups(w.reshape(rows, cols // gs, gs), recipe.scheme)
    return QuantizedTensor(
        rows=rows,
        cols=cols,
        recipe=recipe,
        packed=pack_nibbles(codes.reshape(rows, cols)),
        scales=scales,
        zero_points=zps,
    )


def dequantize_tensor(qt: QuantizedTensor) -> np.ndarray:
    if qt.packed.shape != (qt.rows, qt.cols // 2):
        raise FormatError("packed length does not match tensor dims")
    gs = qt.group_size
    codes = unpack_nibbles(qt.packed).reshape(qt.rows, qt.cols // gs, gs).astype(np.float32)
    zp = qt.effective_zero_points.astype(np.float32)[..., None]
    return (qt.scales[..., None] * (codes - zp)).reshape(qt.rows, qt.cols)


def quantize_activations(x, group_size: int) -> DynQuantActivation:
    """Per-group symmetric INT8 quantization of activations (scale = absmax / 127)."""
    a = np.asarray(x, dtype=np.float32)
    if a.ndim == 1:
        a = a[None, :]
    batch, cols = a.shape
    if group_size <= 0 or cols % group_size:
        raise ShapeError(f"activation width {cols} not divisible by group size {group_size}")
    _check_finite(a, "activations")
    g = a.reshape(batch, cols // group_size, group_size).astype(np.float64)
    scale = (np.abs(g).max(axis=-1) / 127.0).astype(np.float32)
    scale[scale == 0] = 1.0
    codes = np.clip(round_half_away(g / scale.astype(np.float64)[..., None]), -127, 127)
    return DynQuantActivation(
        codes=codes.astype(np.int8).reshape(batch, cols),
        scales=scale,
        group_size=group_size,
    )
