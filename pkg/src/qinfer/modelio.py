"""NQF model container, plain-text config files, and memory footprint reports.

NQF layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"NQF1"
    4       2     format version (1)
    6       2     reserved (0)
    8       8     total file size in bytes, CRC included
    16      48    model config (see _CONFIG)
    64      4     tensor count
    68      ...   tensor table, one entry per tensor:
                    u16 name length, UTF-8 name,
                    u8 dtype (0 = FP32, 1 = INT4),
                    u8 recipe length, ASCII recipe (empty for FP32),
                    u8 ndim, u32 dims[ndim],
                    u64 blob offset, u64 blob size
    ...           zero padding to a 64-byte boundary
    ...           tensor blobs, each starting on a 64-byte boundary:
                    FP32: row-major float32 values
                    INT4: packed codes, float32 scales, uint8 zero-points (asym only)
    end-4   4     CRC32 of every preceding byte

The loader checks magic, declared size, and CRC before it parses anything,
then bounds-checks every table entry against the analytic blob size.
"""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .errors import (
    BadMagic,
    ChecksumMismatch,
    EngineError,
    FormatError,
    InvalidConfig,
    TruncatedFile,
)
from .model import ActivationKind, Model, ModelConfig, NormKind
from .quant import QuantizedTensor, QuantRecipe, QuantScheme

MAGIC = b"NQF1"
VERSION = 1
ALIGN = 64
DTYPE_FP32 = 0
DTYPE_INT4 = 1

_PREAMBLE = struct.Struct("<4sHHQ")
_CONFIG = struct.Struct("<7IBBHdd")
_COUNT = struct.Struct("<I")
_HEADER_SIZE = _PREAMBLE.size + _CONFIG.size + _COUNT.size
_CRC = struct.Struct("<I")

_NORM_TAGS = {NormKind.LAYERNORM: 0, NormKind.RMSNORM: 1}
_ACT_TAGS = {ActivationKind.GELU: 0, ActivationKind.SILU_GATED: 1}

PathLike = Union[str, os.PathLike]


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def int4_nbytes(rows: int, cols: int, recipe: QuantRecipe) -> int:
    """Stored bytes of an INT4 tensor: codes + f32 scales (+ u8 zero-points if asymmetric)."""
    groups = cols // recipe.granularity.effective_group_size(cols)
    n = rows * cols // 2 + rows * groups * 4
    if recipe.scheme is QuantScheme.ASYMMETRIC:
        n += rows * groups
    return n


def fp32_nbytes(shape) -> int:
    return 4 * int(np.prod(shape, dtype=np.int64))


def tensor_nbytes(t) -> int:
    if isinstance(t, QuantizedTensor):
        return int4_nbytes(t.rows, t.cols, t.recipe)
    return fp32_nbytes(t.shape)


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------


def _pack_config(cfg: ModelConfig) -> bytes:
    return _CONFIG.pack(
        cfg.vocab_size, cfg.n_layers, cfg.n_heads, cfg.head_dim, cfg.hidden_dim,
        cfg.ffn_dim, cfg.max_seq_len,
        _NORM_TAGS[cfg.norm_kind], _ACT_TAGS[cfg.activation_kind], 0,
        cfg.rope_theta, cfg.norm_eps,
    )


def _blob(t) -> bytes:
    if isinstance(t, QuantizedTensor):
        parts = [t.packed.tobytes(), t.scales.astype("<f4").tobytes()]
        if t.zero_points is not None:
            parts.append(t.zero_points.tobytes())
        return b"".join(parts)
    return np.ascontiguousarray(t, dtype="<f4").tobytes()


def _entry(name: str, t, offset: int, size: int) -> bytes:
    raw = name.encode("utf-8")
    if isinstance(t, QuantizedTensor):
        dtype, recipe, dims = DTYPE_INT4, str(t.recipe).encode("ascii"), (t.rows, t.cols)
    else:
        dtype, recipe, dims = DTYPE_FP32, b"", tuple(t.shape)
    if len(raw) > 0xFFFF or len(dims) > 0xFF:
        raise FormatError(f"tensor {name!r} cannot be encoded")
    return b"".join([
        struct.pack("<H", len(raw)), raw,
        struct.pack("<BB", dtype, len(recipe)), recipe,
        struct.pack("<B", len(dims)), struct.pack(f"<{len(dims)}I", *dims),
        struct.pack("<QQ", offset, size),
    ])


def to_bytes(model: Model) -> bytes:
    entries = list(model.items())
    blobs = [_blob(t) for _, t in entries]
    # table size does not depend on offset values, so size it with zeros first
    table_len = sum(len(_entry(n, t, 0, 0)) for n, t in entries)
    offset = _align(_HEADER_SIZE + table_len)
    offsets = []
    for b in blobs:
        offsets.append(offset)
        offset = _align(offset + len(b))
    payload_end = offsets[-1] + len(blobs[-1]) if blobs else _align(_HEADER_SIZE + table_len)
    total = payload_end + _CRC.size

    buf = bytearray(payload_end)
    table = b"".join(_entry(n, t, o, len(b)) for (n, t), o, b in zip(entries, offsets, blobs))
    head = _PREAMBLE.pack(MAGIC, VERSION, 0, total) + _pack_config(model.config) + _COUNT.pack(len(entries))
    buf[: len(head)] = head
    buf[len(head): len(head) + len(table)] = table
    for o, b in zip(offsets, blobs):
        buf[o: o + len(b)] = b
    buf += _CRC.pack(zlib.crc32(buf))
    return bytes(buf)


def save(model: Model, path: PathLike) -> None:
    data = to_bytes(model)
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# reading
# ---------------------------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes, start: int, end: int):
        self.data, self.pos, self.end = data, start, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise FormatError("tensor table runs past the payload")
        out = self.data[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(s))


def _unpack_config(raw: bytes) -> ModelConfig:
    (vocab, layers, heads, head_dim, hidden, ffn, max_seq,
     norm_tag, act_tag, _pad, theta, eps) = _CONFIG.unpack(raw)
    norms = {v: k for k, v in _NORM_TAGS.items()}
    acts = {v: k for k, v in _ACT_TAGS.items()}
    if norm_tag not in norms or act_tag not in acts:
        raise FormatError("unknown norm or activation tag")
    try:
        cfg = ModelConfig(vocab, layers, heads, head_dim, ffn, max_seq,
                          norms[norm_tag], acts[act_tag], theta, eps)
    except InvalidConfig as e:
        raise FormatError(f"bad model config: {e}") from None
    if cfg.hidden_dim != hidden:
        raise FormatError(f"hidden_dim {hidden} != n_heads * head_dim {cfg.hidden_dim}")
    return cfg


def from_bytes(data: bytes) -> Model:
    if len(data) < len(MAGIC):
        raise TruncatedFile(f"file is {len(data)} bytes, too short for a header")
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < _HEADER_SIZE + _CRC.size:
        raise TruncatedFile(f"file is {len(data)} bytes, too short for a header")
    _, version, reserved, total = _PREAMBLE.unpack_from(data, 0)
    if len(data) < total:
        raise TruncatedFile(f"file is {len(data)} bytes, header declares {total}")
    if len(data) > total:
        raise FormatError(f"{len(data) - total} trailing bytes after declared end")
    (crc,) = _CRC.unpack_from(data, total - _CRC.size)
    if zlib.crc32(data[: total - _CRC.size]) != crc:
        raise ChecksumMismatch("CRC32 mismatch; file is corrupt")
    if version != VERSION or reserved != 0:
        raise FormatError(f"unsupported format version {version}")

    cfg = _unpack_config(data[_PREAMBLE.size: _PREAMBLE.size + _CONFIG.size])
    (count,) = _COUNT.unpack_from(data, _PREAMBLE.size + _CONFIG.size)
    payload_end = total - _CRC.size
    r = _Reader(data, _HEADER_SIZE, payload_end)

    tensors = {}
    prev_end = None
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8") from None
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}")
        dtype, recipe_len = r.unpack("<BB")
        recipe_raw = r.take(recipe_len)
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I")
        offset, size = r.unpack("<QQ")
        tensors[name] = (dtype, recipe_raw, dims, offset, size)

    table_end = r.pos
    out = {}
    for name, (dtype, recipe_raw, dims, offset, size) in tensors.items():
        if offset % ALIGN or offset < _align(table_end) or offset + size > payload_end:
            raise FormatError(f"{name}: blob [{offset}, {offset + size}) out of bounds")
        if prev_end is not None and offset < prev_end:
            raise FormatError(f"{name}: blob overlaps the previous tensor")
        prev_end = offset + size
        blob = data[offset: offset + size]
        if dtype == DTYPE_FP32:
            if recipe_raw:
                raise FormatError(f"{name}: FP32 tensor carries a recipe")
            if size != fp32_nbytes(dims):
                raise FormatError(f"{name}: size {size} != {fp32_nbytes(dims)} for dims {dims}")
            out[name] = np.frombuffer(blob, dtype="<f4").astype(np.float32).reshape(dims)
        elif dtype == DTYPE_INT4:
            out[name] = _read_int4(name, recipe_raw, dims, blob)
        else:
            raise FormatError(f"{name}: unknown dtype tag {dtype}")
    return Model(cfg, out)


def _read_int4(name: str, recipe_raw: bytes, dims, blob: bytes) -> QuantizedTensor:
    try:
        recipe = QuantRecipe.parse(recipe_raw.decode("ascii"))
    except (UnicodeDecodeError, InvalidConfig):
        raise FormatError(f"{name}: bad recipe {recipe_raw!r}") from None
    if len(dims) != 2:
        raise FormatError(f"{name}: INT4 tensor must be 2-D, got dims {dims}")
    rows, cols = dims
    if rows == 0 or cols == 0 or cols % 2:
        raise FormatError(f"{name}: bad INT4 dims {dims}")
    gs = recipe.granularity.effective_group_size(cols)
    if cols % gs:
        raise FormatError(f"{name}: cols {cols} not divisible by group size {gs}")
    if len(blob) != int4_nbytes(rows, cols, recipe):
        raise FormatError(f"{name}: size {len(blob)} != {int4_nbytes(rows, cols, recipe)}")
    groups = cols // gs
    n_codes = rows * cols // 2
    n_scales = rows * groups * 4
    packed = np.frombuffer(blob, dtype=np.uint8, count=n_codes).reshape(rows, cols // 2).copy()
    scales = np.frombuffer(blob, dtype="<f4", count=rows * groups, offset=n_codes)
    scales = scales.astype(np.float32).reshape(rows, groups)
    zps = None
    if recipe.scheme is QuantScheme.ASYMMETRIC:
        zps = np.frombuffer(blob, dtype=np.uint8, offset=n_codes + n_scales).reshape(rows, groups).copy()
    if not np.all(np.isfinite(scales)) or np.any(scales <= 0):
        raise FormatError(f"{name}: scales must be finite and positive")
    try:
        return QuantizedTensor(rows, cols, recipe, packed, scales, zps)
    except EngineError as e:
        raise FormatError(f"{name}: {e}") from None


def load(path: PathLike) -> Model:
    return from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# text config
# ---------------------------------------------------------------------------

_CONFIG_KEYS = (
    "vocab_size", "n_layers", "n_heads", "head_dim", "ffn_dim", "max_seq_len",
    "norm_kind", "activation_kind", "rope_theta", "norm_eps",
)


def parse_config_text(text: str) -> ModelConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. ``hidden_dim`` is checked if present."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep or not key:
            raise InvalidConfig(f"line {lineno}: expected 'key = value'")
        if key not in _CONFIG_KEYS and key != "hidden_dim":
            raise InvalidConfig(f"line {lineno}: unknown key {key!r}")
        values[key] = value
    try:
        kwargs = {k: int(values[k]) for k in _CONFIG_KEYS[:6]}
    except KeyError as e:
        raise InvalidConfig(f"missing config key {e.args[0]!r}") from None
    except ValueError as e:
        raise InvalidConfig(str(e)) from None
    try:
        if "norm_kind" in values:
            kwargs["norm_kind"] = NormKind(values["norm_kind"])
        if "activation_kind" in values:
            kwargs["activation_kind"] = ActivationKind(values["activation_kind"])
        for k in ("rope_theta", "norm_eps"):
            if k in values:
                kwargs[k] = float(values[k])
    except ValueError as e:
        raise InvalidConfig(str(e)) from None
    cfg = ModelConfig(**kwargs)
    if "hidden_dim" in values and int(values["hidden_dim"]) != cfg.hidden_dim:
        raise InvalidConfig(f"hidden_dim {values['hidden_dim']} != n_heads * head_dim")
    return cfg


def format_config_text(cfg: ModelConfig) -> str:
    lines = []
    for k in _CONFIG_KEYS:
        v = getattr(cfg, k)
        lines.append(f"{k} = {v.value if hasattr(v, 'value') else v}")
    lines.insert(4, f"hidden_dim = {cfg.hidden_dim}")
    return "\n".join(lines) + "\n"


def load_config(path: PathLike) -> ModelConfig:
    return parse_config_text(Path(path).read_text())


# ---------------------------------------------------------------------------
# memory report
# ---------------------------------------------------------------------------


@dataclass
class TensorFootprint:
    name: str
    shape: tuple[int, ...]
    fp32_bytes: int
    stored_bytes: int
    dtype: str


@dataclass
class MemoryReport:
    tensors: list[TensorFootprint] = field(default_factory=list)

    @property
    def fp32_bytes(self) -> int:
        return sum(t.fp32_bytes for t in self.tensors)

    @property
    def stored_bytes(self) -> int:
        return sum(t.stored_bytes for t in self.tensors)

    @property
    def ratio(self) -> float:
        return self.fp32_bytes / self.stored_bytes if self.stored_bytes else 1.0

    def format(self) -> str:
        w = max([len(t.name) for t in self.tensors] + [6])
        out = [f"{'tensor':<{w}}  {'dtype':<18} {'fp32 bytes':>12} {'stored bytes':>12}"]
        for t in self.tensors:
            out.append(f"{t.name:<{w}}  {t.dtype:<18} {t.fp32_bytes:>12} {t.stored_bytes:>12}")
        out.append(
            f"{'total':<{w}}  {'':<18} {self.fp32_bytes:>12} {self.stored_bytes:>12}"
            f"  ratio {self.ratio:.2f}x"
        )
        return "\n".join(out)


def memory_report(model: Model) -> MemoryReport:
    rep = MemoryReport()
    for name, t in model.items():
        shape = tuple(t.shape)
        dtype = str(t.recipe) if isinstance(t, QuantizedTensor) else "fp32"
        rep.tensors.append(TensorFootprint(name, shape, fp32_nbytes(shape), tensor_nbytes(t), dtype))
    return rep
