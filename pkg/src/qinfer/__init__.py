"""INT4 weight-only quantization and CPU inference for decoder-only transformers."""

from .errors import (
    BadMagic,
    CapacityExceeded,
    ChecksumMismatch,
    EngineError,
    FormatError,
    InvalidConfig,
    InvalidInput,
    NoRecipeMet,
    ShapeError,
    TruncatedFile,
)
from .kernels import KernelConfig, dense_linear, gemm_ref, linear, qlinear, qlinear_fp32, qlinear_int8
from .kvcache import KvCache, NaiveKvCache, kv_append, kv_new, kv_view
from .model import ActivationKind, Model, ModelConfig, NormKind, init_random, quantize_model
from .quant import (
    ComputePath,
    QuantGranularity,
    QuantizedTensor,
    QuantRecipe,
    QuantScheme,
    dequantize_group,
    dequantize_tensor,
    pack_nibbles,
    quantize_activations,
    quantize_group,
    quantize_tensor,
    unpack_nibbles,
)
from .runtime import GenParams, Sampling, forward_decode, forward_prefill, generate

__version__ = "0.1.0"
