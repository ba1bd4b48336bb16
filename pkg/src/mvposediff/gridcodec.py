"""2x2 view grids, latent codecs, and view masks.

Grid layout (slot -> quadrant): 0 top-left, 1 top-right, 2 bottom-left,
3 bottom-right. Slots 0-2 are source views, slot 3 is the target.

Images are handled channel-last (H, W, C) as numpy arrays; latents are
torch tensors, channel-first (B, C, h, w), as consumed by the denoiser.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

TARGET_SLOT = 3
NUM_SLOTS = 4


def compose_grid(views: Sequence[np.ndarray]) -> np.ndarray:
    if len(views) != NUM_SLOTS:
        raise ValueError(f"need exactly 4 views, got {len(views)}")
    shape = views[0].shape
    for i, v in enumerate(views):
        if v.shape != shape:
            raise ValueError(f"view {i} has shape {v.shape}, expected {shape}")
    top = np.concatenate([views[0], views[1]], axis=1)
    bottom = np.concatenate([views[2], views[3]], axis=1)
    return np.concatenate([top, bottom], axis=0)


def decompose_grid(grid: np.ndarray) -> list[np.ndarray]:
    H2, W2 = grid.shape[:2]
    if H2 % 2 or W2 % 2:
        raise ValueError(f"grid dims must be even, got {H2}x{W2}")
    h, w = H2 // 2, W2 // 2
    return [grid[:h, :w], grid[:h, w:], grid[h:, :w], grid[h:, w:]]


def quadrant(x: torch.Tensor, slot: int) -> torch.Tensor:
    """View of slot ``slot`` of a channel-first tensor (..., h, w)."""
    h, w = x.shape[-2] // 2, x.shape[-1] // 2
    r, c = divmod(slot, 2)
    return x[..., r * h:(r + 1) * h, c * w:(c + 1) * w]


# -- codecs -----------------------------------------------------------------


@dataclass
class CodecConfig:
    kind: str = "std"        # "std" | "ae"
    f: int = 4
    d_V: int | None = None   # std: forced to 3 * f**2
    ae_weights_ref: str | None = None
    ae_width: int = 32

    def __post_init__(self):
        if self.kind not in ("std", "ae"):
            raise ValueError(f"codec kind must be 'std' or 'ae', got {self.kind!r}")
        if self.f < 1 or self.f & (self.f - 1) or self.f > 4:
            raise ValueError(f"f must be a power of two in [1, 4], got {self.f}")
        if self.kind == "std":
            self.d_V = 3 * self.f ** 2
        elif self.d_V is None:
            self.d_V = 4

    def to_dict(self) -> dict:
        return asdict(self)


def _check_divisible(x: torch.Tensor, f: int) -> None:
    H, W = x.shape[-2:]
    if H % f or W % f:
        raise ValueError(f"grid {H}x{W} not divisible by f={f}")


class StdCodec(nn.Module):
    """Exact space-to-depth bijection: (B, 3, H, W) <-> (B, 3 f^2, H/f, W/f)."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        self.f = cfg.f

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        _check_divisible(x, self.f)
        return F.pixel_unshuffle(x, self.f)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return F.pixel_shuffle(z, self.f)


class AECodec(nn.Module):
    """Small convolutional autoencoder with downsampling factor f (lossy)."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        self.f = cfg.f
        n_down = int(math.log2(cfg.f))
        w = cfg.ae_width
        enc: list[nn.Module] = [nn.Conv2d(3, w, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            enc += [nn.Conv2d(w, w, 4, stride=2, padding=1), nn.SiLU()]
        enc += [nn.Conv2d(w, cfg.d_V, 3, padding=1)]
        dec: list[nn.Module] = [nn.Conv2d(cfg.d_V, w, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            dec += [nn.ConvTranspose2d(w, w, 4, stride=2, padding=1), nn.SiLU()]
        dec += [nn.Conv2d(w, 3, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)
        self.decoder = nn.Sequential(*dec)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        _check_divisible(x, self.f)
        return self.encoder(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)


def make_codec(cfg: CodecConfig, state_dict: dict | None = None) -> StdCodec | AECodec:
    if cfg.kind == "std":
        return StdCodec(cfg)
    codec = AECodec(cfg)
    if state_dict is not None:
        codec.load_state_dict(state_dict)
    return codec


def psnr(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> float:
    mse = torch.mean((a.double() - b.double()) ** 2).item()
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def train_autoencoder(
    grids: torch.Tensor,
    cfg: CodecConfig,
    steps: int = 2000,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
    val_grids: torch.Tensor | None = None,
    margin_db: float = 1.0,
    log_every: int = 0,
) -> tuple[AECodec, dict]:
    """Fit an ``ae`` codec by reconstruction MSE on grids in [-1, 1].

    Returns the codec and metadata holding the validation PSNR and the
    regression threshold (PSNR minus ``margin_db``), both in [0, 1] pixel units.
    """
    if cfg.kind != "ae":
        raise ValueError("train_autoencoder needs an 'ae' codec config")
    torch.manual_seed(seed)
    codec = AECodec(cfg)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    g = torch.Generator().manual_seed(seed)
    n = grids.shape[0]
    for step in range(steps):
        idx = torch.randint(n, (min(batch_size, n),), generator=g)
        x = grids[idx]
        loss = F.mse_loss(codec.decode(codec.encode(x)), x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and step % log_every == 0:
            print(f"[ae] step {step} loss {loss.item():.5f}")
    val = grids if val_grids is None else val_grids
    with torch.no_grad():
        rec = codec.decode(codec.encode(val))
    # PSNR in [0, 1] pixel units
    val_psnr = psnr((rec.clamp(-1, 1) + 1) / 2, (val + 1) / 2)
    meta = {"val_psnr": val_psnr, "psnr_threshold": val_psnr - margin_db, "steps": steps}
    return codec, meta


# -- masks ------------------------------------------------------------------


@dataclass(frozen=True)
class ViewMask:
    """``known[s]`` is True when slot s is given as a reference."""

    known: tuple[bool, bool, bool, bool]

    def __post_init__(self):
        if len(self.known) != NUM_SLOTS:
            raise ValueError("known must have 4 entries")
        if self.known[TARGET_SLOT]:
            raise ValueError("target slot 3 is always unknown")
        if not 1 <= self.n_unknown <= 3:
            raise ValueError(f"number of unknown slots must be 1..3, got {self.n_unknown}")

    @property
    def n_unknown(self) -> int:
        return NUM_SLOTS - sum(self.known)

    @property
    def known_sources(self) -> list[int]:
        return [s for s in range(TARGET_SLOT) if self.known[s]]

    def raster(self, height: int, width: int) -> np.ndarray:
        """Binary (height, width) map, 1 over unknown quadrants."""
        if height % 2 or width % 2:
            raise ValueError(f"mask dims must be even, got {height}x{width}")
        h, w = height // 2, width // 2
        out = np.zeros((height, width), dtype=np.uint8)
        for s in range(NUM_SLOTS):
            if not self.known[s]:
                r, c = divmod(s, 2)
                out[r * h:(r + 1) * h, c * w:(c + 1) * w] = 1
        return out

    def pixel_mask(self, grid_hw: tuple[int, int]) -> np.ndarray:
        return self.raster(*grid_hw)

    def latent_mask(self, latent_hw: tuple[int, int]) -> np.ndarray:
        return self.raster(*latent_hw)


def block_reduce_mask(pixel_mask: np.ndarray, f: int) -> np.ndarray:
    """Downsample a binary mask by f using block max (exact for quadrant-constant masks)."""
    H, W = pixel_mask.shape
    return pixel_mask.reshape(H // f, f, W // f, f).max(axis=(1, 3))


def sample_view_mask(rng: np.random.Generator, n_unknown: int | None = None) -> ViewMask:
    """Target always unknown; m ~ U{1,2,3}; m-1 further unknown sources chosen without replacement.

    ``n_unknown`` pins m (the "always three references" ablation uses 1).
    """
    m = int(rng.integers(1, 4)) if n_unknown is None else n_unknown
    if not 1 <= m <= 3:
        raise ValueError(f"n_unknown must be 1..3, got {m}")
    extra = rng.choice(3, size=m - 1, replace=False) if m > 1 else []
    known = [True, True, True, False]
    for s in extra:
        known[int(s)] = False
    return ViewMask(tuple(known))


def mask_from_refs(ref_slots: Sequence[int]) -> ViewMask:
    slots = sorted(set(int(s) for s in ref_slots))
    if not 1 <= len(slots) <= 3 or any(s not in (0, 1, 2) for s in slots):
        raise ValueError(f"need 1-3 reference slots among 0,1,2; got {list(ref_slots)}")
    return ViewMask(tuple(s in slots for s in range(NUM_SLOTS)))


def latent_mask_tensor(masks: Sequence[ViewMask], latent_hw: tuple[int, int]) -> torch.Tensor:
    """Stack masks into a bool (B, 1, h, w) tensor, True = unknown."""
    arr = np.stack([m.latent_mask(latent_hw) for m in masks])[:, None]
    return torch.from_numpy(arr.astype(bool))


def make_masked_latent(z: torch.Tensor, unknown: torch.Tensor) -> torch.Tensor:
    """Zero the unknown regions of z; ``unknown`` broadcasts against z (True/1 = unknown)."""
    return torch.where(unknown.bool(), torch.zeros((), dtype=z.dtype), z)
