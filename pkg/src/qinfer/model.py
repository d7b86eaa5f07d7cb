"""Model configuration and weight container."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterator, Union

import numpy as np

from .errors import InvalidConfig, ShapeError
from .quant import QuantizedTensor, QuantRecipe, quantize_tensor

Tensor = Union[np.ndarray, QuantizedTensor]


class NormKind(enum.Enum):
    LAYERNORM = "layernorm"
    RMSNORM = "rmsnorm"


class ActivationKind(enum.Enum):
    GELU = "gelu"
    SILU_GATED = "silu_gated"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int
    n_heads: int
    head_dim: int
    ffn_dim: int
    max_seq_len: int
    norm_kind: NormKind = NormKind.RMSNORM
    activation_kind: ActivationKind = ActivationKind.SILU_GATED
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        for f in ("vocab_size", "n_layers", "n_heads", "head_dim", "ffn_dim", "max_seq_len"):
            if getattr(self, f) < 1:
                raise InvalidConfig(f"{f} must be positive, got {getattr(self, f)}")
        if self.head_dim % 2:
            raise InvalidConfig(f"head_dim must be even for rotary embedding, got {self.head_dim}")
        if not self.rope_theta > 0 or not self.norm_eps > 0:
            raise InvalidConfig("rope_theta and norm_eps must be positive")

    @property
    def hidden_dim(self) -> int:
        return self.n_heads * self.head_dim


LINEAR_SUFFIXES = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.w2", "ffn.w3")


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every tensor a model with ``cfg`` carries, in file order."""
    h, f = cfg.hidden_dim, cfg.ffn_dim
    layernorm = cfg.norm_kind is NormKind.LAYERNORM
    shapes: dict[str, tuple[int, ...]] = {"tok_embeddings": (cfg.vocab_size, h)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm.weight"] = (h,)
        if layernorm:
            shapes[p + "attn_norm.bias"] = (h,)
        for name in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
            shapes[p + name] = (h, h)
        shapes[p + "ffn_norm.weight"] = (h,)
        if layernorm:
            shapes[p + "ffn_norm.bias"] = (h,)
        shapes[p + "ffn.w1"] = (f, h)
        shapes[p + "ffn.w2"] = (h, f)
        if cfg.activation_kind is ActivationKind.SILU_GATED:
            shapes[p + "ffn.w3"] = (f, h)
    shapes["norm.weight"] = (h,)
    if layernorm:
        shapes["norm.bias"] = (h,)
    shapes["lm_head"] = (cfg.vocab_size, h)
    return shapes


def is_linear(name: str) -> bool:
    return name == "lm_head" or name.endswith(LINEAR_SUFFIXES)


@dataclass
class Model:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    @property
    def is_quantized(self) -> bool:
        return any(isinstance(t, QuantizedTensor) for t in self.tensors.values())

    def validate(self) -> None:
        """Check the tensor set is complete and shaped per the config."""
        want = expected_shapes(self.config)
        missing = [n for n in want if n not in self.tensors]
        if missing:
            raise ShapeError(f"model is missing tensors: {missing[:4]}{'...' if len(missing) > 4 else ''}")
        for name, shape in want.items():
            t = self.tensors[name]
            got = t.shape
            if tuple(got) != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {tuple(got)}")
            if isinstance(t, QuantizedTensor) and not is_linear(name):
                raise ShapeError(f"{name}: only linear layers may be quantized")


def init_random(cfg: ModelConfig, seed: int = 0, std: float = 0.02) -> Model:
    """Randomly initialised FP32 model (norm weights one, biases zero)."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in expected_shapes(cfg).items():
        if name.endswith("norm.weight"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith("norm.bias"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    return Model(cfg, tensors)


def quantize_model(model: Model, recipe: QuantRecipe, quantize_lm_head: bool = True) -> Model:
    """Quantize every linear weight with ``recipe``; norms and embeddings stay FP32."""
    out: dict[str, Tensor] = {}
    for name, t in model.items():
        if isinstance(t, QuantizedTensor) or not is_linear(name):
            out[name] = t
        elif name == "lm_head" and not quantize_lm_head:
            out[name] = t
        else:
            out[name] = quantize_tensor(t, recipe, name=name)
    return replace(model, tensors=out)
