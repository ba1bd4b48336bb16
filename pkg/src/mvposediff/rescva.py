"""Cross-view attention over the four grid quadrants, plus its residual form.

A grid feature map (B, C, 2h, 2w) is split into four view maps stacked on a
new axis, (B, 4, C, h, w), using the same slot order as the view grid. At
every spatial position the four view features form a length-4 sequence that
is mixed by multi-head self-attention. The output projection starts at zero.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .layers import SelfAttention, zero_module

NUM_VIEWS = 4


def split_views(feat: torch.Tensor) -> torch.Tensor:
    """(B, C, 2h, 2w) -> (B, 4, C, h, w)."""
    H, W = feat.shape[-2:]
    if H % 2 or W % 2:
        raise ValueError(f"split_views needs even spatial dims, got {H}x{W}")
    B, C = feat.shape[:2]
    h, w = H // 2, W // 2
    x = feat.reshape(B, C, 2, h, 2, w)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(B, NUM_VIEWS, C, h, w)


def restack_views(views: torch.Tensor) -> torch.Tensor:
    """(B, 4, C, h, w) -> (B, C, 2h, 2w)."""
    B, V, C, h, w = views.shape
    if V != NUM_VIEWS:
        raise ValueError(f"expected 4 views, got {V}")
    x = views.reshape(B, 2, 2, C, h, w).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(B, C, 2 * h, 2 * w)


class CrossViewAttention(nn.Module):
    def __init__(self, channels: int, heads: int = 4, view_embedding: bool = False):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.norm = nn.LayerNorm(channels)
        self.attn = SelfAttention(channels, heads)
        zero_module(self.attn.out)
        self.view_embed = nn.Parameter(torch.zeros(NUM_VIEWS, channels)) if view_embedding else None

    def reset_extra(self):
        if self.view_embed is not None:
            nn.init.normal_(self.view_embed, std=0.02)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        v = split_views(feat)
        B, V, C, h, w = v.shape
        tokens = v.permute(0, 3, 4, 1, 2).reshape(B * h * w, V, C)
        x = self.norm(tokens)
        if self.view_embed is not None:
            x = x + self.view_embed
        y = self.attn(x)
        y = y.reshape(B, h, w, V, C).permute(0, 3, 4, 1, 2)
        return restack_views(y)


class ResCVA(nn.Module):
    """``y = x + cva(x)``."""

    def __init__(self, channels: int, heads: int = 4, view_embedding: bool = False):
        super().__init__()
        self.cva = CrossViewAttention(channels, heads, view_embedding)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return feat + self.cva(feat)
