"""Run configuration, the two shipped profiles, and the flat ``key = value`` file format."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .denoiser import DenoiserConfig
from .diffusion import GuidanceConfig, NoiseSchedule
from .gridcodec import CodecConfig

ABLATIONS = ("full", "no-rescva", "no-text-summarization", "no-mask")


@dataclass
class RunConfig:
    profile: str = "toy"
    seed: int = 0
    # data
    n_identities: int = 64
    resolution: tuple[int, int] = (64, 48)
    # codec
    codec_kind: str = "std"
    codec_f: int = 4
    codec_d_V: int | None = None
    ae_checkpoint: str | None = None
    # denoiser
    base_width: int = 64
    channel_mult: tuple[int, ...] = (1, 1, 2)
    self_attn_levels: tuple[int, ...] = (1, 2)
    use_rescva: bool = True
    view_embedding: bool = False
    context_mode: str = "decoupled"
    append_mask_channel: bool = False
    eps_skip: bool = True               # eps_hat = sqrt(1 - ab) * x_t + sqrt(ab) * net
    freeze_backbone: bool = False
    heads: int = 4
    # conditioning
    d_c: int = 128
    n_i: int = 4
    n_t: int = 8
    cond_width: int = 32
    text_mode: str = "summarize"        # summarize | truncate
    mask_mode: str = "random"           # random | all-sources-known
    # diffusion / optimization
    T: int = 200
    lr: float = 1e-4
    batch_size: int = 8
    steps: int = 3000
    drop_prob: float = 0.05
    grad_clip: float = 1.0
    # sampling
    omega: float = 0.7
    pose_in_cond_branch: bool = False
    extrapolate: bool = False
    sampler: str = "ddim"
    sample_steps: int = 50
    # bookkeeping
    ablation: str = "full"
    log_every: int = 50
    ckpt_every: int = 500

    def __post_init__(self):
        self.resolution = tuple(int(v) for v in self.resolution)
        self.channel_mult = tuple(self.channel_mult)
        self.self_attn_levels = tuple(self.self_attn_levels)
        H, W = self.resolution
        if H < 16 or W < 16:
            raise ValueError(f"resolution must be at least 16x16, got {H}x{W}")
        if self.text_mode not in ("summarize", "truncate"):
            raise ValueError(f"text_mode must be summarize|truncate, got {self.text_mode!r}")
        if self.mask_mode not in ("random", "all-sources-known"):
            raise ValueError(f"mask_mode must be random|all-sources-known, got {self.mask_mode!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.sampler not in ("ddim", "ddpm"):
            raise ValueError(f"sampler must be ddim|ddpm, got {self.sampler!r}")
        if self.batch_size < 1 or self.steps < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 1, steps >= 0 and lr > 0 required")
        # grid must split into 4 views at every denoiser level
        div = 2 * self.codec_f * 2 ** (len(self.channel_mult) - 1)
        if (2 * H) % div or (2 * W) % div:
            raise ValueError(
                f"grid {2 * H}x{2 * W} must be divisible by {div} for f={self.codec_f} "
                f"and {len(self.channel_mult)} levels")
        self.guidance()

    # -- derived sub-configs --
    def codec(self) -> CodecConfig:
        return CodecConfig(kind=self.codec_kind, f=self.codec_f, d_V=self.codec_d_V,
                           ae_weights_ref=self.ae_checkpoint)

    def denoiser(self) -> DenoiserConfig:
        return DenoiserConfig(
            d_V=self.codec().d_V, base_width=self.base_width, channel_mult=self.channel_mult,
            self_attn_levels=self.self_attn_levels, use_rescva=self.use_rescva,
            view_embedding=self.view_embedding, d_c=self.d_c, heads=self.heads,
            context_mode=self.context_mode, append_mask_channel=self.append_mask_channel)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.scaled_linear(self.T)

    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(self.omega, self.pose_in_cond_branch, self.extrapolate)

    # -- serialization --
    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def dumps(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.to_dict().items())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    def updated(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def parse_kv(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def load_config(path: str | Path) -> RunConfig:
    return RunConfig.from_dict(parse_kv(Path(path).read_text()))


PROFILES = {
    # printed hyperparameters: Adam lr 1e-5, batch 1, drop 0.05, omega 0.7; T = 1000
    "paper": dict(profile="paper", lr=1e-5, batch_size=1, T=1000, drop_prob=0.05, omega=0.7,
                  base_width=64, steps=100_000, ckpt_every=5000),
    # desk-scale: lr 1e-4, batch 8, T = 200
    "toy": dict(profile="toy", lr=1e-4, batch_size=8, T=200, drop_prob=0.05, omega=0.7,
                base_width=64, channel_mult=(1, 1, 2), steps=3000, ckpt_every=500),
}


def apply_ablation(cfg: RunConfig, name: str) -> RunConfig:
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")
    kw: dict = {"ablation": name}
    if name == "no-rescva":
        kw["use_rescva"] = False
    elif name == "no-text-summarization":
        kw["text_mode"] = "truncate"
    elif name == "no-mask":
        kw["mask_mode"] = "all-sources-known"
    return cfg.updated(**kw)


def make_config(profile: str = "toy", ablation: str = "full", **overrides) -> RunConfig:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    base = RunConfig(**{**PROFILES[profile], **overrides})
    return apply_ablation(base, ablation)
