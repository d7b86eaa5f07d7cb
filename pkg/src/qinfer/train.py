"""Train small FP32 models with PyTorch and export them to the engine's layout.

The torch module below mirrors ``runtime`` exactly (pre-norm, interleaved
rotary pairs, causal attention, GELU-tanh or SiLU-gated MLP, untied LM head),
so exported weights reproduce the torch logits in the numpy runtime.
Requires the optional ``torch`` dependency.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import ActivationKind, Model, ModelConfig, NormKind, expected_shapes

try:
    import torch
    import torch.nn.functional as F
    from torch import nn
except ImportError:  # pragma: no cover
    torch = None


def _require_torch():
    if torch is None:
        raise RuntimeError("training needs PyTorch: pip install 'artifact[train]'")


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    seq_len: int = 64
    lr: float = 3e-3
    warmup: int = 50
    weight_decay: float = 0.0
    seed: int = 0


if torch is not None:

    class _Norm(nn.Module):
        def __init__(self, cfg: ModelConfig):
            super().__init__()
            self.kind = cfg.norm_kind
            self.eps = cfg.norm_eps
            self.weight = nn.Parameter(torch.ones(cfg.hidden_dim))
            if self.kind is NormKind.LAYERNORM:
                self.bias = nn.Parameter(torch.zeros(cfg.hidden_dim))

        def forward(self, x):
            if self.kind is NormKind.LAYERNORM:
                return F.layer_norm(x, x.shape[-1:], self.weight, self.bias, self.eps)
            return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight

    def _rope(x, theta: float):
        # x: (B, heads, T, D)
        t_len, d = x.shape[-2], x.shape[-1]
        inv = theta ** (-torch.arange(0, d, 2, dtype=torch.float64) / d)
        ang = torch.arange(t_len, dtype=torch.float64)[:, None] * inv
        cos, sin = ang.cos().to(x.dtype), ang.sin().to(x.dtype)
        x0, x1 = x[..., 0::2], x[..., 1::2]
        return torch.stack([x0 * cos - x1 * sin, x0 * sin + x1 * cos], dim=-1).flatten(-2)

    class _Block(nn.Module):
        def __init__(self, cfg: ModelConfig):
            super().__init__()
            h, f = cfg.hidden_dim, cfg.ffn_dim
            self.cfg = cfg
            self.attn_norm = _Norm(cfg)
            self.wq, self.wk, self.wv, self.wo = (nn.Linear(h, h, bias=False) for _ in range(4))
            self.ffn_norm = _Norm(cfg)
            self.w1 = nn.Linear(h, f, bias=False)
            self.w2 = nn.Linear(f, h, bias=False)
            if cfg.activation_kind is ActivationKind.SILU_GATED:
                self.w3 = nn.Linear(h, f, bias=False)

        def forward(self, x):
            cfg = self.cfg
            b, t, _ = x.shape
            h = self.attn_norm(x)
            split = lambda y: y.view(b, t, cfg.n_heads, cfg.head_dim).transpose(1, 2)
            q = _rope(split(self.wq(h)), cfg.rope_theta)
            k = _rope(split(self.wk(h)), cfg.rope_theta)
            v = split(self.wv(h))
            a = F.scaled_dot_product_attention(q, k, v, is_causal=True)
            x = x + self.wo(a.transpose(1, 2).reshape(b, t, cfg.hidden_dim))
            h = self.ffn_norm(x)
            if cfg.activation_kind is ActivationKind.SILU_GATED:
                m = F.silu(self.w1(h)) * self.w3(h)
            else:
                m = F.gelu(self.w1(h), approximate="tanh")
            return x + self.w2(m)

    class TorchLM(nn.Module):
        def __init__(self, cfg: ModelConfig):
            super().__init__()
            self.cfg = cfg
            self.tok_embeddings = nn.Embedding(cfg.vocab_size, cfg.hidden_dim)
            self.layers = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
            self.norm = _Norm(cfg)
            self.lm_head = nn.Linear(cfg.hidden_dim, cfg.vocab_size, bias=False)
            for name, p in self.named_parameters():
                if p.dim() == 2:
                    nn.init.normal_(p, std=0.02)

        def forward(self, ids):
            x = self.tok_embeddings(ids)
            for layer in self.layers:
                x = layer(x)
            return self.lm_head(self.norm(x))


_TORCH_NAMES = {
    "attn.wq": "wq", "attn.wk": "wk", "attn.wv": "wv", "attn.wo": "wo",
    "ffn.w1": "w1", "ffn.w2": "w2", "ffn.w3": "w3",
}


def _torch_name(name: str) -> str:
    if name in ("tok_embeddings", "lm_head"):
        return name + ".weight"
    parts = name.split(".")
    if parts[0] == "layers":
        rest = ".".join(parts[2:])
        if rest in _TORCH_NAMES:
            return f"layers.{parts[1]}.{_TORCH_NAMES[rest]}.weight"
    return name


def export(module: "TorchLM") -> Model:
    """Copy torch parameters into an FP32 :class:`Model`."""
    state = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    tensors = {
        name: np.ascontiguousarray(state[_torch_name(name)], dtype=np.float32)
        for name in expected_shapes(module.cfg)
    }
    return Model(module.cfg, tensors)


def train(
    cfg: ModelConfig,
    tokens: Sequence[int],
    tc: TrainConfig = TrainConfig(),
    log: Optional[callable] = None,
) -> tuple[Model, list[float]]:
    """Next-token cross-entropy training on random windows of ``tokens``."""
    _require_torch()
    torch.manual_seed(tc.seed)
    rng = np.random.default_rng(tc.seed)
    data = torch.tensor(np.asarray(tokens, dtype=np.int64))
    seq = min(tc.seq_len, cfg.max_seq_len)
    if data.numel() <= seq + 1:
        raise ValueError(f"need more than {seq + 1} training tokens, got {data.numel()}")
    module = TorchLM(cfg)
    opt = torch.optim.AdamW(module.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)

    def lr_at(step):
        if step < tc.warmup:
            return tc.lr * (step + 1) / tc.warmup
        frac = (step - tc.warmup) / max(1, tc.steps - tc.warmup)
        return tc.lr * 0.5 * (1 + math.cos(math.pi * frac))

    losses = []
    module.train()
    for step in range(tc.steps):
        starts = torch.from_numpy(rng.integers(0, data.numel() - seq - 1, tc.batch_size))
        idx = starts[:, None] + torch.arange(seq + 1)
        batch = data[idx]
        logits = module(batch[:, :-1])
        loss = F.cross_entropy(logits.reshape(-1, cfg.vocab_size), batch[:, 1:].reshape(-1))
        for g in opt.param_groups:
            g["lr"] = lr_at(step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log is not None and (step % 100 == 0 or step == tc.steps - 1):
            log(step, losses[-1])
    module.eval()
    return export(module), losses
