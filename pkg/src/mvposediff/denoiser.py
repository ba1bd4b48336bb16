"""Small U-Net noise predictor over a view-grid latent.

Input is the noised latent concatenated with the masked (clean, unknown
quadrants zeroed) latent on channels. Each level has one residual block and
one transformer block: optional self-attention, decoupled cross-attention
over text/image tokens, ResCVA, then a feed-forward layer. Pose features are
added to the outputs of each down level and of the mid block.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import ConditionBundle, DecoupledCrossAttention, fuse_conditions
from .layers import SelfAttention, norm, timestep_embedding, zero_module
from .rescva import ResCVA


@dataclass
class DenoiserConfig:
    d_V: int = 48
    base_width: int = 64
    channel_mult: tuple[int, ...] = (1, 1, 2)
    self_attn_levels: tuple[int, ...] = (1, 2)
    rescva_levels: tuple[bool, ...] | None = None    # None = every level
    use_rescva: bool = True
    view_embedding: bool = False
    d_c: int = 128
    heads: int = 4
    temb_dim: int | None = None
    context_mode: str = "decoupled"
    append_mask_channel: bool = False
    groups: int = 8

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        self.self_attn_levels = tuple(self.self_attn_levels)
        if len(self.channel_mult) == 0:
            raise ValueError("denoiser needs at least one level")
        if self.base_width < 1 or self.d_V < 1:
            raise ValueError("base_width and d_V must be positive")
        if self.rescva_levels is not None:
            self.rescva_levels = tuple(bool(b) for b in self.rescva_levels)
            if len(self.rescva_levels) != len(self.channel_mult):
                raise ValueError("rescva_levels must have one flag per level")
        for c in self.level_channels:
            if c % self.heads:
                raise ValueError(f"level width {c} not divisible by heads {self.heads}")
        if self.temb_dim is None:
            self.temb_dim = 4 * self.base_width

    @property
    def in_channels(self) -> int:
        return 2 * self.d_V + (1 if self.append_mask_channel else 0)

    @property
    def level_channels(self) -> list[int]:
        return [self.base_width * m for m in self.channel_mult]

    @property
    def n_levels(self) -> int:
        return len(self.channel_mult)

    def rescva_at(self, level: int) -> bool:
        if not self.use_rescva:
            return False
        return True if self.rescva_levels is None else self.rescva_levels[level]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        d["self_attn_levels"] = list(self.self_attn_levels)
        if self.rescva_levels is not None:
            d["rescva_levels"] = list(self.rescva_levels)
        return d


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = norm(cin, groups)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = norm(cout, groups)
        self.conv2 = zero_module(nn.Conv2d(cout, cout, 3, padding=1))
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class TransformerBlock(nn.Module):
    def __init__(self, ch: int, d_c: int, heads: int, self_attn: bool, rescva: bool,
                 view_embedding: bool):
        super().__init__()
        self.norm_in = nn.LayerNorm(ch) if self_attn else None
        self.self_attn = SelfAttention(ch, heads) if self_attn else None
        self.norm_x = nn.LayerNorm(ch)
        self.cross = DecoupledCrossAttention(ch, d_c, heads)
        self.rescva = ResCVA(ch, heads, view_embedding) if rescva else None
        self.norm_ff = nn.LayerNorm(ch)
        self.ff = nn.Sequential(nn.Linear(ch, 2 * ch), nn.GELU(), nn.Linear(2 * ch, ch))

    def forward(self, x, ctx):
        B, C, H, W = x.shape
        t = x.flatten(2).transpose(1, 2)
        if self.self_attn is not None:
            t = t + self.self_attn(self.norm_in(t))
        if ctx is not None:
            t = t + self.cross(self.norm_x(t), ctx)
            if self.rescva is not None:
                m = t.transpose(1, 2).reshape(B, C, H, W)
                t = self.rescva(m).flatten(2).transpose(1, 2)
        t = t + self.ff(self.norm_ff(t))
        return t.transpose(1, 2).reshape(B, C, H, W)


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        chs = cfg.level_channels
        g = cfg.groups
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.base_width, cfg.temb_dim), nn.SiLU(), nn.Linear(cfg.temb_dim, cfg.temb_dim))
        self.conv_in = nn.Conv2d(cfg.in_channels, chs[0], 3, padding=1)

        def tblock(level, ch):
            return TransformerBlock(ch, cfg.d_c, cfg.heads, level in cfg.self_attn_levels,
                                    cfg.rescva_at(level), cfg.view_embedding)

        self.down_res = nn.ModuleList()
        self.down_tf = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = chs[0]
        for i, ch in enumerate(chs):
            self.down_res.append(ResBlock(prev, ch, cfg.temb_dim, g))
            self.down_tf.append(tblock(i, ch))
            last = i == cfg.n_levels - 1
            self.downsample.append(nn.Identity() if last else nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            prev = ch
        mid = chs[-1]
        self.mid_res1 = ResBlock(mid, mid, cfg.temb_dim, g)
        self.mid_tf = TransformerBlock(mid, cfg.d_c, cfg.heads, True, cfg.use_rescva, cfg.view_embedding)
        self.mid_res2 = ResBlock(mid, mid, cfg.temb_dim, g)

        self.up_res = nn.ModuleList()
        self.up_tf = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(cfg.n_levels)):
            ch = chs[i]
            self.up_res.append(ResBlock(prev + ch, ch, cfg.temb_dim, g))
            self.up_tf.append(tblock(i, ch))
            self.upsample.append(nn.Identity() if i == 0 else nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch, chs[i - 1], 3, padding=1)))
            prev = chs[i - 1] if i > 0 else ch
        self.norm_out = norm(prev, g)
        self.conv_out = zero_module(nn.Conv2d(prev, cfg.d_V, 3, padding=1))

    def _check(self, noised, masked, t, cond):
        if noised.shape != masked.shape:
            raise ValueError(f"noised {tuple(noised.shape)} and masked {tuple(masked.shape)} differ")
        c_expected = self.cfg.d_V
        if noised.shape[1] != c_expected:
            raise ValueError(f"latent has {noised.shape[1]} channels, denoiser expects d_V={c_expected}")
        H, W = noised.shape[-2:]
        div = 2 ** self.cfg.n_levels
        if H % div or W % div:
            raise ValueError(
                f"latent {H}x{W} must be divisible by {div} so every level splits into 4 views")

    def level_shapes(self, latent_hw: tuple[int, int]) -> list[tuple[int, int, int]]:
        H, W = latent_hw
        out = []
        for i, ch in enumerate(self.cfg.level_channels):
            out.append((ch, H >> i, W >> i))
        out.append((self.cfg.level_channels[-1], H >> (self.cfg.n_levels - 1), W >> (self.cfg.n_levels - 1)))
        return out

    def forward(self, noised, masked, t, cond: ConditionBundle | None = None, mask_channel=None):
        """Predict the noise. ``cond=None`` runs the bare U-Net: no cross-attention, ResCVA or pose."""
        self._check(noised, masked, t, cond)
        x = torch.cat([noised, masked], dim=1)
        if self.cfg.append_mask_channel:
            if mask_channel is None:
                raise ValueError("append_mask_channel is set but no mask_channel was given")
            x = torch.cat([x, mask_channel.to(x.dtype)], dim=1)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.cfg.base_width).to(x.dtype))

        ctx = None
        pose = None
        if cond is not None:
            ctx = fuse_conditions(cond.image_tokens, cond.text_tokens, cond.text_valid,
                                  self.cfg.context_mode)
            pose = cond.pose_feats
            if pose is not None:
                expected = self.level_shapes(noised.shape[-2:])
                if len(pose) != len(expected):
                    raise ValueError(f"got {len(pose)} pose maps, expected {len(expected)}")
                for k, (p, e) in enumerate(zip(pose, expected)):
                    site = f"down level {k}" if k < self.cfg.n_levels else "mid block"
                    if tuple(p.shape[1:]) != e:
                        raise ValueError(f"pose feature at {site} has shape {tuple(p.shape[1:])}, expected {e}")

        h = self.conv_in(x)
        skips = []
        for i in range(self.cfg.n_levels):
            h = self.down_res[i](h, temb)
            h = self.down_tf[i](h, ctx)
            if pose is not None:
                h = h + pose[i]
            skips.append(h)
            h = self.downsample[i](h)
        h = self.mid_res1(h, temb)
        h = self.mid_tf(h, ctx)
        h = self.mid_res2(h, temb)
        if pose is not None:
            h = h + pose[-1]
        for j in range(self.cfg.n_levels):
            h = torch.cat([h, skips.pop()], dim=1)
            h = self.up_res[j](h, temb)
            h = self.up_tf[j](h, ctx)
            h = self.upsample[j](h)
        return self.conv_out(F.silu(self.norm_out(h)))

    def adapter_parameters(self):
        """Parameters that are new relative to a plain text-conditioned U-Net backbone."""
        for name, p in self.named_parameters():
            if ".rescva." in name or "_ip." in name or name.endswith("image_gate") or name.startswith("conv_in"):
                yield p

    def freeze_backbone(self) -> None:
        adapters = {id(p) for p in self.adapter_parameters()}
        for p in self.parameters():
            p.requires_grad_(id(p) in adapters)


def count_parameters(cfg: DenoiserConfig) -> int:
    return sum(p.numel() for p in Denoiser(cfg).parameters())
