"""Small neural building blocks shared by the conditioning encoders and the denoiser."""

from __future__ import annotations

import math
import zlib

import torch
import torch.nn as nn
import torch.nn.functional as F


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    module._zero_init = True
    return module


def attention(q, k, v, key_mask=None):
    """Scaled dot-product attention over (B, heads, N, d) tensors.

    ``key_mask`` is a bool (B, M) tensor, True = attend. Rows with no valid
    key return zeros instead of NaN.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = torch.matmul(q, k.transpose(-1, -2)) * scale
    if key_mask is None:
        return torch.matmul(scores.softmax(dim=-1), v)
    m = key_mask[:, None, None, :]
    scores = scores.masked_fill(~m, float("-inf"))
    any_valid = m.any(dim=-1, keepdim=True)
    scores = torch.where(any_valid, scores, torch.zeros((), dtype=scores.dtype))
    probs = scores.softmax(dim=-1) * any_valid
    return torch.matmul(probs, v)


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    B, N, C = x.shape
    return x.view(B, N, heads, C // heads).transpose(1, 2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    B, H, N, d = x.shape
    return x.transpose(1, 2).reshape(B, N, H * d)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, key_mask=None):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        h = attention(split_heads(q, self.heads), split_heads(k, self.heads),
                      split_heads(v, self.heads), key_mask)
        return self.out(merge_heads(h))


def norm(ch: int, groups: int = 8) -> nn.GroupNorm:
    g = math.gcd(groups, ch)
    return nn.GroupNorm(g, ch)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def seeded_reset(model: nn.Module, seed: int) -> None:
    """Re-initialize every submodule from a generator keyed on (seed, module path).

    Adding or removing a submodule leaves every other module's weights
    unchanged, which keeps ablation variants comparable at step 0. Modules
    built with ``zero_module`` are re-zeroed afterwards.
    """
    state = torch.random.get_rng_state()
    try:
        for name, mod in model.named_modules():
            if hasattr(mod, "reset_parameters") and any(
                True for _ in mod.parameters(recurse=False)
            ):
                torch.manual_seed((seed * 1_000_003 + zlib.crc32(name.encode())) % (2 ** 63))
                mod.reset_parameters()
        for name, mod in model.named_modules():
            if getattr(mod, "_zero_init", False):
                for p in mod.parameters():
                    nn.init.zeros_(p)
        for name, mod in model.named_modules():
            if hasattr(mod, "reset_extra"):
                torch.manual_seed((seed * 1_000_003 + zlib.crc32(name.encode()) + 1) % (2 ** 63))
                mod.reset_extra()
    finally:
        torch.random.set_rng_state(state)
