"""Noise schedule, forward process, training loss with condition dropping, and the two-branch guided sampler.

Timestep convention: ``t`` runs over ``0 .. T-1`` and ``alpha_bars[0] == 1``,
so ``t = 0`` is clean data: ``alpha_bars[t] = prod(1 - betas[:t])`` with
the linear ``betas`` running from ``beta_start`` to ``beta_end``.

An ``eps_model`` is any callable ``(x_t, masked, t, cond) -> eps_hat``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch

from .conditioning import ConditionBundle

EpsModel = Callable[..., torch.Tensor]


@dataclass
class NoiseSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        self.betas = torch.linspace(self.beta_start, self.beta_end, self.T, dtype=torch.float64)
        self.alphas = 1.0 - self.betas
        ab = torch.cumprod(self.alphas, dim=0)
        self.alpha_bars = torch.cat([torch.ones(1, dtype=torch.float64), ab[:-1]])

    @classmethod
    def scaled_linear(cls, T: int) -> "NoiseSchedule":
        """Linear schedule with the standard 1e-4..2e-2 endpoints rescaled by 1000/T.

        Keeps the terminal alpha_bar near zero for short chains.
        """
        s = 1000.0 / T
        return cls(T, 1e-4 * s, min(2e-2 * s, 0.999))

    def to_dict(self) -> dict:
        return asdict(self)

    def check_t(self, t: torch.Tensor) -> None:
        if torch.any(t < 0) or torch.any(t >= self.T):
            raise ValueError(f"timestep out of range [0, {self.T - 1}]: {t.tolist()}")

    def ab(self, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        a = self.alpha_bars[t.long()].to(like.dtype)
        return a.reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(schedule: NoiseSchedule, x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t).reshape(-1)
    schedule.check_t(t)
    ab = schedule.ab(t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def sample_drop_flags(batch_size: int, drop_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Per-sample ``has_image_text`` flags: False with probability ``drop_prob``."""
    if not 0.0 <= drop_prob <= 1.0:
        raise ValueError(f"drop_prob must be in [0, 1], got {drop_prob}")
    return rng.random(batch_size) >= drop_prob


def diffusion_loss(eps_model: EpsModel, schedule: NoiseSchedule, x0, masked, cond,
                   generator: torch.Generator, t: torch.Tensor | None = None, **kw):
    """Mean squared error between true and predicted noise; returns (loss, t, eps)."""
    B = x0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.T, (B,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = q_sample(schedule, x0, t, eps)
    eps_hat = eps_model(x_t, masked, t, cond, **kw)
    loss = torch.mean((eps - eps_hat) ** 2)
    if not torch.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss {loss.item()} (t={t.tolist()}, |x0|={x0.norm().item():.4g}, "
            f"|eps_hat|={eps_hat.norm().item():.4g})")
    return loss, t, eps


@dataclass
class GuidanceConfig:
    omega: float = 0.7
    pose_in_cond_branch: bool = False
    extrapolate: bool = False

    def __post_init__(self):
        hi = float("inf") if self.extrapolate else 1.0
        if not 0.0 <= self.omega <= hi:
            raise ValueError(f"omega must be in [0, 1], got {self.omega}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GuidedConditions:
    """``full`` carries image/text tokens and pose; ``pose_only`` carries null tokens and pose."""

    full: ConditionBundle
    pose_only: ConditionBundle


def guided_eps(eps_model: EpsModel, x_t, masked, t, conds: GuidedConditions,
               gcfg: GuidanceConfig, **kw) -> torch.Tensor:
    """``omega * eps(image, text) + (1 - omega) * eps(pose)``.

    Branch A drops pose unless ``pose_in_cond_branch``. With ``extrapolate``
    the blend becomes ``B + omega * (A - B)`` with omega allowed above 1.
    """
    w = gcfg.omega
    if not gcfg.extrapolate and not 0.0 <= w <= 1.0:
        raise ValueError(f"omega must be in [0, 1], got {w}")
    cond_a = conds.full if gcfg.pose_in_cond_branch else conds.full.without_pose()
    if w == 1.0 and not gcfg.extrapolate:
        return eps_model(x_t, masked, t, cond_a, **kw)
    eps_b = eps_model(x_t, masked, t, conds.pose_only, **kw)
    if w == 0.0:
        return eps_b
    eps_a = eps_model(x_t, masked, t, cond_a, **kw)
    if gcfg.extrapolate:
        return eps_b + w * (eps_a - eps_b)
    return w * eps_a + (1.0 - w) * eps_b


def sampling_timesteps(schedule: NoiseSchedule, steps: int) -> list[int]:
    """Descending timesteps from T-1 to 0 with ``steps`` transitions (fewer if T is small)."""
    if steps < 1 or steps > schedule.T:
        raise ValueError(f"steps must be in [1, {schedule.T}], got {steps}")
    n = min(steps, schedule.T - 1)
    ts = np.unique(np.round(np.linspace(0, schedule.T - 1, n + 1)).astype(np.int64))
    return [int(v) for v in ts[::-1]]


@torch.no_grad()
def sample(eps_model: EpsModel, conds: GuidedConditions, masked, known_latent, unknown,
           schedule: NoiseSchedule, gcfg: GuidanceConfig, generator: torch.Generator,
           sampler: str = "ddim", steps: int = 50, clip_x0: float | None = None, **kw):
    """Denoise the whole grid from pure noise, holding the masked-latent input fixed.

    Known quadrants of the returned latent are overwritten with
    ``known_latent``; ``unknown`` is a bool tensor broadcastable to it.
    ``sampler="ddpm"`` is ancestral sampling, ``"ddim"`` is deterministic.
    """
    if sampler not in ("ddim", "ddpm"):
        raise ValueError(f"sampler must be 'ddim' or 'ddpm', got {sampler!r}")
    eta = 0.0 if sampler == "ddim" else 1.0
    ts = sampling_timesteps(schedule, steps)
    x = torch.randn(masked.shape, generator=generator, dtype=masked.dtype)
    B = x.shape[0]
    for t_cur, t_next in zip(ts[:-1], ts[1:]):
        tt = torch.full((B,), t_cur, dtype=torch.long)
        eps = guided_eps(eps_model, x, masked, tt, conds, gcfg, **kw)
        ab_t = schedule.alpha_bars[t_cur].item()
        ab_s = schedule.alpha_bars[t_next].item()
        x0 = (x - (1 - ab_t) ** 0.5 * eps) / ab_t ** 0.5
        if clip_x0 is not None:
            x0 = x0.clamp(-clip_x0, clip_x0)
            eps = (x - ab_t ** 0.5 * x0) / (1 - ab_t) ** 0.5
        sigma = eta * ((1 - ab_s) / (1 - ab_t) * (1 - ab_t / ab_s)) ** 0.5
        x = ab_s ** 0.5 * x0 + max(1 - ab_s - sigma ** 2, 0.0) ** 0.5 * eps
        if sigma > 0:
            x = x + sigma * torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return torch.where(unknown.bool(), x, known_latent)
