"""Pose, image-prompt and text conditioning, and the decoupled cross-attention that consumes them."""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .gridcodec import ViewMask
from .layers import SelfAttention, attention, merge_heads, norm, split_heads, zero_module

PAD, UNK = "<pad>", "<unk>"


def _asset_lines(name: str) -> list[str]:
    text = resources.files("mvposediff").joinpath("assets").joinpath(name).read_text()
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]


def asset_hash(name: str) -> str:
    data = resources.files("mvposediff").joinpath("assets").joinpath(name).read_bytes()
    return hashlib.sha256(data).hexdigest()[:16]


STOPWORDS = frozenset(_asset_lines("stopwords.txt"))


class TokenVocabulary:
    def __init__(self, words: Sequence[str] | None = None):
        words = list(words) if words is not None else _asset_lines("vocab.txt")
        self.itos = [PAD, UNK] + words
        if len(set(self.itos)) != len(self.itos):
            raise ValueError("duplicate vocabulary entries")
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        self.hash = hashlib.sha256("\n".join(self.itos).encode()).hexdigest()[:16]

    def __len__(self):
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.stoi.get(w, self.unk_id) for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]


def _words(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


def summarize_text(text: str, max_len: int = 8) -> str:
    """Keyword summary: lowercase, drop stopwords, drop repeats (first kept), truncate."""
    seen: set[str] = set()
    out = []
    for w in _words(text):
        if w in STOPWORDS or w in seen:
            continue
        seen.add(w)
        out.append(w)
    return " ".join(out[:max_len])


def truncate_text(text: str, max_len: int = 8) -> str:
    """No summarization: first ``max_len`` raw words."""
    return " ".join(_words(text)[:max_len])


def tokenize(text: str, vocab: TokenVocabulary, n_t: int) -> tuple[np.ndarray, np.ndarray]:
    """Word ids padded to ``n_t`` and the valid-position mask."""
    ids = vocab.encode(_words(text))[:n_t]
    out = np.full(n_t, vocab.pad_id, dtype=np.int64)
    out[: len(ids)] = ids
    valid = np.zeros(n_t, dtype=bool)
    valid[: len(ids)] = True
    return out, valid


def choose_prompt_slot(mask: ViewMask, rng: np.random.Generator) -> int | None:
    """Uniform choice among known source slots; None when every source is masked."""
    slots = mask.known_sources
    if not slots:
        return None
    return int(slots[rng.integers(len(slots))])


# -- encoders ---------------------------------------------------------------


class TextEncoder(nn.Module):
    """Embedding + learned positions + one pre-norm self-attention layer."""

    def __init__(self, vocab_size: int, d_c: int = 128, n_t: int = 8, heads: int = 4):
        super().__init__()
        self.n_t = n_t
        self.embed = nn.Embedding(vocab_size, d_c)
        self.pos = nn.Parameter(torch.zeros(n_t, d_c))
        self.norm1 = nn.LayerNorm(d_c)
        self.attn = SelfAttention(d_c, heads)
        self.norm2 = nn.LayerNorm(d_c)
        self.ff = nn.Sequential(nn.Linear(d_c, 2 * d_c), nn.GELU(), nn.Linear(2 * d_c, d_c))
        self.reset_extra()

    def reset_extra(self):
        nn.init.normal_(self.pos, std=0.02)

    def forward(self, ids: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        if ids.shape[-1] != self.n_t:
            raise ValueError(f"expected {self.n_t} token ids, got {ids.shape[-1]}")
        x = self.embed(ids) + self.pos
        x = x + self.attn(self.norm1(x), key_mask=valid)
        x = x + self.ff(self.norm2(x))
        return x * valid[..., None]


class ImagePromptEncoder(nn.Module):
    """Conv features pooled to a 2x2 grid, giving n_i = 4 tokens regardless of input size."""

    def __init__(self, d_c: int = 128, width: int = 32, n_i: int = 4):
        super().__init__()
        side = int(round(math.sqrt(n_i)))
        if side * side != n_i:
            raise ValueError(f"n_i must be a perfect square, got {n_i}")
        self.n_i = n_i
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(side),
        )
        self.proj = nn.Linear(2 * width, d_c)
        self.norm = nn.LayerNorm(d_c)

    def forward(self, view: torch.Tensor) -> torch.Tensor:
        h = self.net(view)                      # (B, 2w, s, s)
        h = h.flatten(2).transpose(1, 2)        # (B, n_i, 2w)
        return self.norm(self.proj(h))


class PoseEncoder(nn.Module):
    """Strided conv pyramid from a pose grid to the denoiser's injection sites.

    Produces one map per down level plus one for the mid block. Every output
    passes through a zero-initialized 1x1 conv.
    """

    def __init__(self, f: int, level_channels: Sequence[int], mid_channels: int, width: int = 32):
        super().__init__()
        self.f = f
        self.n_levels = len(level_channels)
        stem: list[nn.Module] = [nn.Conv2d(3, width, 3, padding=1), nn.SiLU()]
        for _ in range(int(math.log2(f))):
            stem += [nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU()]
        self.stem = nn.Sequential(*stem)
        self.levels = nn.ModuleList()
        for i in range(self.n_levels):
            stride = 1 if i == 0 else 2
            self.levels.append(nn.Sequential(
                nn.Conv2d(width, width, 3, stride=stride, padding=1), norm(width), nn.SiLU()))
        self.proj = nn.ModuleList(
            zero_module(nn.Conv2d(width, c, 1)) for c in list(level_channels) + [mid_channels])

    def forward(self, pose_grid: torch.Tensor) -> list[torch.Tensor]:
        H, W = pose_grid.shape[-2:]
        div = 2 * self.f * 2 ** (self.n_levels - 1)
        if H % div or W % div:
            raise ValueError(
                f"pose grid {H}x{W} must be divisible by {div} (f={self.f}, {self.n_levels} levels)")
        h = self.stem(pose_grid)
        feats = []
        for level in self.levels:
            h = level(h)
            feats.append(h)
        feats.append(h)
        return [p(x) for p, x in zip(self.proj, feats)]


# -- context / cross-attention ---------------------------------------------


@dataclass
class ConditionBundle:
    """Everything the denoiser needs besides the latents.

    ``pose_feats`` is None when pose is switched off for the whole batch.
    """

    pose_feats: list[torch.Tensor] | None
    image_tokens: torch.Tensor        # (B, n_i, d_c)
    text_tokens: torch.Tensor         # (B, n_t, d_c)
    text_valid: torch.Tensor          # (B, n_t) bool
    has_image_text: torch.Tensor      # (B,) bool

    def without_pose(self) -> "ConditionBundle":
        return ConditionBundle(None, self.image_tokens, self.text_tokens,
                               self.text_valid, self.has_image_text)


@dataclass
class FusedContext:
    mode: str
    text_tokens: torch.Tensor
    text_valid: torch.Tensor
    image_tokens: torch.Tensor | None


def fuse_conditions(image_tokens, text_tokens, text_valid, mode: str = "decoupled") -> FusedContext:
    """Package conditioning tokens for cross-attention.

    ``decoupled``: text and image tokens keep separate key/value projections
    and the attention results are summed. ``concat``: a single token list of
    length n_t + n_i behind one shared projection.
    """
    if image_tokens.shape[-1] != text_tokens.shape[-1]:
        raise ValueError(
            f"token dim mismatch: image {image_tokens.shape[-1]} vs text {text_tokens.shape[-1]}")
    if mode == "decoupled":
        return FusedContext(mode, text_tokens, text_valid, image_tokens)
    if mode == "concat":
        img_valid = torch.ones(image_tokens.shape[:2], dtype=torch.bool, device=image_tokens.device)
        return FusedContext(mode, torch.cat([text_tokens, image_tokens], dim=1),
                            torch.cat([text_valid, img_valid], dim=1), None)
    raise ValueError(f"unknown context mode {mode!r}")


class DecoupledCrossAttention(nn.Module):
    def __init__(self, dim: int, d_c: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.d_c = d_c
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(d_c, dim, bias=False)
        self.to_v = nn.Linear(d_c, dim, bias=False)
        self.to_k_ip = nn.Linear(d_c, dim, bias=False)
        self.to_v_ip = nn.Linear(d_c, dim, bias=False)
        self.image_gate = nn.Parameter(torch.ones(()))
        self.to_out = nn.Linear(dim, dim)

    def reset_extra(self):
        nn.init.ones_(self.image_gate)

    def forward(self, x: torch.Tensor, ctx: FusedContext) -> torch.Tensor:
        if ctx.text_tokens.shape[-1] != self.d_c:
            raise ValueError(f"context dim {ctx.text_tokens.shape[-1]} != d_c {self.d_c}")
        q = split_heads(self.to_q(x), self.heads)
        k = split_heads(self.to_k(ctx.text_tokens), self.heads)
        v = split_heads(self.to_v(ctx.text_tokens), self.heads)
        out = attention(q, k, v, ctx.text_valid)
        if ctx.image_tokens is not None:
            k_ip = split_heads(self.to_k_ip(ctx.image_tokens), self.heads)
            v_ip = split_heads(self.to_v_ip(ctx.image_tokens), self.heads)
            out = out + self.image_gate * attention(q, k_ip, v_ip)
        return self.to_out(merge_heads(out))


class ConditionEncoder(nn.Module):
    """Owns the pose / image / text encoders and the learned null tokens."""

    def __init__(self, vocab: TokenVocabulary, f: int, level_channels: Sequence[int],
                 mid_channels: int, d_c: int = 128, n_i: int = 4, n_t: int = 8,
                 heads: int = 4, width: int = 32):
        super().__init__()
        self.d_c, self.n_i, self.n_t = d_c, n_i, n_t
        self.pose = PoseEncoder(f, level_channels, mid_channels, width)
        self.image = ImagePromptEncoder(d_c, width, n_i)
        self.text = TextEncoder(len(vocab), d_c, n_t, heads)
        self.null_image = nn.Parameter(torch.zeros(n_i, d_c))
        self.null_text = nn.Parameter(torch.zeros(n_t, d_c))
        self.reset_extra()

    def reset_extra(self):
        nn.init.normal_(self.null_image, std=0.02)
        nn.init.normal_(self.null_text, std=0.02)

    def forward(self, pose_grid, prompt_view, text_ids, text_valid, has_image_text,
                pose_on: bool = True) -> ConditionBundle:
        """Build a batch ConditionBundle.

        ``has_image_text`` (B,) bool selects per sample between encoded
        image/text tokens and the null tokens. ``prompt_view`` may hold
        anything for samples whose flag is False.
        """
        B = pose_grid.shape[0]
        has = has_image_text.bool().reshape(B)
        img = self.image(prompt_view)
        txt = self.text(text_ids, text_valid)
        sel = has[:, None, None]
        img = torch.where(sel, img, self.null_image.expand(B, -1, -1))
        txt = torch.where(sel, txt, self.null_text.expand(B, -1, -1))
        valid = torch.where(has[:, None], text_valid.bool(), torch.ones_like(text_valid, dtype=torch.bool))
        pose = self.pose(pose_grid) if pose_on else None
        return ConditionBundle(pose, img, txt, valid, has)


