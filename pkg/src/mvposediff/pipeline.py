"""End-to-end model: codec + condition encoders + denoiser, with batching, training, checkpoints and sampling."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from . import gridcodec as gc
from .conditioning import (ConditionBundle, ConditionEncoder, TokenVocabulary, asset_hash,
                           choose_prompt_slot, summarize_text, tokenize, truncate_text)
from .config import RunConfig
from .denoiser import Denoiser
from .diffusion import GuidedConditions, diffusion_loss, sample, sample_drop_flags
from .layers import seeded_reset
from .synthdata import SampleRecord, load_dataset

log = logging.getLogger(__name__)

CKPT_FORMAT = "mvposediff-checkpoint"
CKPT_VERSION = 1


def to_signed(x):
    return x * 2.0 - 1.0


def to_unit(x):
    return (x + 1.0) / 2.0


@dataclass
class Batch:
    grid: torch.Tensor            # (B, 3, 2H, 2W) in [-1, 1]
    pose_grid: torch.Tensor       # (B, 3, 2H, 2W) in [-1, 1]
    prompt_view: torch.Tensor     # (B, 3, H, W) in [-1, 1]; zeros where no prompt
    text_ids: torch.Tensor        # (B, n_t)
    text_valid: torch.Tensor      # (B, n_t) bool
    has_image_text: torch.Tensor  # (B,) bool
    masks: list[gc.ViewMask]

    @property
    def size(self) -> int:
        return self.grid.shape[0]


def prepare_text(text: str, cfg: RunConfig) -> str:
    if cfg.text_mode == "summarize":
        return summarize_text(text, cfg.n_t)
    return truncate_text(text, cfg.n_t)


def make_batch(records: Sequence[SampleRecord], cfg: RunConfig, vocab: TokenVocabulary,
               rng: np.random.Generator, *, masks: Sequence[gc.ViewMask] | None = None,
               drop: bool = True, prompt_slots: Sequence[int | None] | None = None) -> Batch:
    """Assemble a batch; masks, prompt slots and condition drops are drawn from ``rng`` unless given.

    A sample whose sources are all masked has no image prompt and takes the
    dropped-condition path.
    """
    B = len(records)
    if masks is None:
        fixed = 1 if cfg.mask_mode == "all-sources-known" else None
        masks = [gc.sample_view_mask(rng, fixed) for _ in range(B)]
    if prompt_slots is None:
        prompt_slots = [choose_prompt_slot(m, rng) for m in masks]
    has = sample_drop_flags(B, cfg.drop_prob, rng) if drop else np.ones(B, dtype=bool)
    has = has & np.array([s is not None for s in prompt_slots])

    grids, poses, prompts, ids, valids = [], [], [], [], []
    for rec, slot in zip(records, prompt_slots):
        grids.append(gc.compose_grid(rec.images))
        poses.append(gc.compose_grid(rec.pose_maps))
        prompts.append(rec.images[slot] if slot is not None else np.full_like(rec.images[0], 0.5))
        i, v = tokenize(prepare_text(rec.text, cfg), vocab, cfg.n_t)
        ids.append(i)
        valids.append(v)

    def chw(arrs):
        return to_signed(torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).float())

    return Batch(chw(grids), chw(poses), chw(prompts), torch.from_numpy(np.stack(ids)),
                 torch.from_numpy(np.stack(valids)), torch.from_numpy(has), list(masks))


class MultiViewDiffusion(nn.Module):
    def __init__(self, cfg: RunConfig, vocab: TokenVocabulary | None = None,
                 codec_state: dict | None = None):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab or TokenVocabulary()
        self.codec_cfg = cfg.codec()
        self.codec = gc.make_codec(self.codec_cfg, codec_state)
        for p in self.codec.parameters():
            p.requires_grad_(False)
        dcfg = cfg.denoiser()
        self.denoiser = Denoiser(dcfg)
        self.cond = ConditionEncoder(self.vocab, cfg.codec_f, dcfg.level_channels,
                                     dcfg.level_channels[-1], cfg.d_c, cfg.n_i, cfg.n_t,
                                     cfg.heads, cfg.cond_width)
        self.schedule = cfg.schedule()

    def reset(self, seed: int) -> None:
        """Deterministic init keyed on module names (codec weights untouched)."""
        seeded_reset(self.denoiser, seed)
        seeded_reset(self.cond, seed + 1)
        if self.cfg.freeze_backbone:
            self.denoiser.freeze_backbone()

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if p.requires_grad and not n.startswith("codec.")]

    # -- latent helpers --
    def encode(self, grid: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.codec.encode(grid)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.codec.decode(z)

    def unknown_latent(self, batch: Batch, z: torch.Tensor) -> torch.Tensor:
        return gc.latent_mask_tensor(batch.masks, tuple(z.shape[-2:]))

    def eps(self, x_t, masked, t, cond, unknown_mask=None):
        """Noise prediction. With ``eps_skip`` the network output is mixed with a fixed skip:

        ``sqrt(1 - ab_t) * x_t + sqrt(ab_t) * net``. The skip term is the best
        linear estimate of the noise for unit-variance data, so near t = T the
        network no longer has to copy ``x_t`` through the U-Net.
        """
        mask_channel = unknown_mask.float() if self.cfg.append_mask_channel else None
        out = self.denoiser(x_t, masked, t, cond, mask_channel=mask_channel)
        if not self.cfg.eps_skip:
            return out
        t = torch.as_tensor(t).reshape(-1).expand(x_t.shape[0])
        ab = self.schedule.ab(t, x_t)
        return (1.0 - ab).sqrt() * x_t + ab.sqrt() * out

    def condition(self, batch: Batch, has_image_text: torch.Tensor | None = None,
                  pose_on: bool = True) -> ConditionBundle:
        has = batch.has_image_text if has_image_text is None else has_image_text
        return self.cond(batch.pose_grid, batch.prompt_view, batch.text_ids, batch.text_valid,
                         has, pose_on)

    def loss(self, batch: Batch, generator: torch.Generator, t: torch.Tensor | None = None):
        z0 = self.encode(batch.grid)
        unknown = self.unknown_latent(batch, z0)
        masked = gc.make_masked_latent(z0, unknown)
        cond = self.condition(batch)
        loss, _, _ = diffusion_loss(self.eps, self.schedule, z0, masked, cond, generator, t,
                                    unknown_mask=unknown)
        return loss

    @torch.no_grad()
    def generate(self, batch: Batch, generator: torch.Generator, gcfg=None,
                 sampler: str | None = None, steps: int | None = None) -> torch.Tensor:
        """Sample the unknown quadrants; returns the decoded grid in [-1, 1]."""
        gcfg = gcfg or self.cfg.guidance()
        z_known = self.encode(batch.grid)
        unknown = self.unknown_latent(batch, z_known)
        masked = gc.make_masked_latent(z_known, unknown)
        B = batch.size
        conds = GuidedConditions(
            full=self.condition(batch, torch.ones(B, dtype=torch.bool)),
            pose_only=self.condition(batch, torch.zeros(B, dtype=torch.bool)),
        )
        clip = 1.0 if self.codec_cfg.kind == "std" else None
        z = sample(self.eps, conds, masked, z_known, unknown, self.schedule, gcfg, generator,
                   sampler or self.cfg.sampler, steps or self.cfg.sample_steps, clip_x0=clip,
                   unknown_mask=unknown)
        return self.decode(z)


# -- checkpoints ------------------------------------------------------------


def config_hash_of(obj: dict) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:12]


def save_checkpoint(path: str | Path, model: MultiViewDiffusion, step: int,
                    optimizer: torch.optim.Optimizer | None = None, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.hash(),
        "codec_cfg": model.codec_cfg.to_dict(),
        "vocab_hash": model.vocab.hash,
        "stopwords_hash": asset_hash("stopwords.txt"),
        "schedule": model.schedule.to_dict(),
        "guidance": model.cfg.guidance().to_dict(),
        "step": step,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[MultiViewDiffusion, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path} is not a {CKPT_FORMAT} file")
    cfg = RunConfig.from_dict(payload["config"])
    vocab = TokenVocabulary()
    if payload["vocab_hash"] != vocab.hash:
        raise ValueError(f"checkpoint vocabulary {payload['vocab_hash']} != installed {vocab.hash}")
    model = MultiViewDiffusion(cfg, vocab)
    model.load_state_dict(payload["model"])
    if cfg.freeze_backbone:
        model.denoiser.freeze_backbone()
    return model, payload


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def load_ae_state(path: str | Path) -> tuple[dict, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    return payload["state_dict"], payload


# -- training ---------------------------------------------------------------


def step_rngs(seed: int, step: int) -> tuple[np.random.Generator, torch.Generator]:
    """Per-step randomness so a resumed run replays the same batches and noise."""
    rng = np.random.default_rng([seed, step])
    g = torch.Generator().manual_seed(int(rng.integers(2 ** 62)))
    return rng, g


def build_model(cfg: RunConfig) -> MultiViewDiffusion:
    codec_state = None
    if cfg.codec_kind == "ae":
        if not cfg.ae_checkpoint:
            raise ValueError("codec_kind 'ae' needs ae_checkpoint (run train-ae first)")
        codec_state, meta = load_ae_state(cfg.ae_checkpoint)
        if meta["codec_cfg"]["f"] != cfg.codec_f or meta["codec_cfg"]["d_V"] != cfg.codec().d_V:
            raise ValueError("ae checkpoint codec settings do not match the run config")
    model = MultiViewDiffusion(cfg, codec_state=codec_state)
    model.reset(cfg.seed)
    return model


class Trainer:
    def __init__(self, cfg: RunConfig, records: Sequence[SampleRecord], out_dir: str | Path | None = None,
                 model: MultiViewDiffusion | None = None):
        self.cfg = cfg
        self.records = list(records)
        if not self.records:
            raise ValueError("empty dataset")
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.model = model if model is not None else build_model(cfg)
        self.opt = torch.optim.Adam(self.model.trainable_parameters(), lr=cfg.lr)
        self.step = 0
        self.history: list[tuple[int, float]] = []

    @classmethod
    def resume(cls, ckpt: str | Path, records, out_dir=None) -> "Trainer":
        model, payload = load_checkpoint(ckpt)
        tr = cls(model.cfg, records, out_dir, model)
        if payload.get("optimizer") is not None:
            tr.opt.load_state_dict(payload["optimizer"])
        tr.step = int(payload["step"])
        return tr

    def batch_for_step(self, step: int) -> tuple[Batch, torch.Generator]:
        rng, g = step_rngs(self.cfg.seed, step)
        idx = rng.integers(len(self.records), size=self.cfg.batch_size)
        batch = make_batch([self.records[i] for i in idx], self.cfg, self.model.vocab, rng)
        return batch, g

    def train_step(self) -> float:
        self.step += 1
        self.model.train()
        batch, g = self.batch_for_step(self.step)
        try:
            loss = self.model.loss(batch, g)
        except FloatingPointError as exc:
            self._dump_state("nan")
            raise FloatingPointError(f"step {self.step}: {exc}") from exc
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        gnorm = torch.nn.utils.clip_grad_norm_(self.model.trainable_parameters(), self.cfg.grad_clip)
        if not torch.isfinite(gnorm):
            self._dump_state("nan")
            raise FloatingPointError(f"step {self.step}: non-finite gradient norm {gnorm.item()}")
        self.opt.step()
        value = loss.item()
        self.history.append((self.step, value))
        return value

    def _dump_state(self, tag: str) -> None:
        if self.out_dir is not None:
            save_checkpoint(self.out_dir / f"{tag}_state_step{self.step}.pt", self.model, self.step, self.opt)

    def checkpoint(self, name: str | None = None) -> Path | None:
        if self.out_dir is None:
            return None
        path = self.out_dir / (name or f"ckpt_step{self.step:06d}.pt")
        save_checkpoint(path, self.model, self.step, self.opt)
        save_checkpoint(self.out_dir / "last.pt", self.model, self.step, self.opt)
        return path

    def run(self, steps: int | None = None, echo=print) -> list[tuple[int, float]]:
        total = self.cfg.steps if steps is None else steps
        logf = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            logf = (self.out_dir / "train_log.tsv").open("a", buffering=1)
        t0 = time.time()
        window: list[float] = []
        try:
            while self.step < total:
                value = self.train_step()
                window.append(value)
                if logf is not None:
                    logf.write(f"{self.step}\t{value:.6f}\t{self.cfg.hash()}\n")
                if self.cfg.log_every and self.step % self.cfg.log_every == 0:
                    echo(f"step {self.step:6d}  loss {np.mean(window):.4f}  ({time.time() - t0:.0f}s)")
                    window.clear()
                if self.cfg.ckpt_every and self.step % self.cfg.ckpt_every == 0:
                    self.checkpoint()
        finally:
            if logf is not None:
                logf.close()
        self.checkpoint()
        return self.history


# -- evaluation -------------------------------------------------------------


def reference_batch(records: Sequence[SampleRecord], cfg: RunConfig, vocab, seed: int,
                    ref_slots: Sequence[int] = (0, 1, 2)) -> Batch:
    rng = np.random.default_rng([seed, 10_007])
    masks = [gc.mask_from_refs(ref_slots)] * len(records)
    return make_batch(records, cfg, vocab, rng, masks=masks, drop=False)


def generate_targets(model: MultiViewDiffusion, records: Sequence[SampleRecord], seed: int = 0,
                     ref_slots: Sequence[int] = (0, 1, 2), gcfg=None, sampler=None, steps=None,
                     chunk: int = 16) -> list[np.ndarray]:
    """Sample the target view for each record; returns H x W x 3 arrays in [0, 1]."""
    model.eval()
    outs: list[np.ndarray] = []
    for start in range(0, len(records), chunk):
        part = records[start:start + chunk]
        batch = reference_batch(part, model.cfg, model.vocab, seed + start, ref_slots)
        g = torch.Generator().manual_seed(seed * 7919 + start)
        grid = model.generate(batch, g, gcfg, sampler, steps)
        target = gc.quadrant(grid, gc.TARGET_SLOT)
        arr = to_unit(target).clamp(0, 1).permute(0, 2, 3, 1).double().numpy()
        outs.extend(list(arr))
    return outs


def evaluate(model: MultiViewDiffusion, records: Sequence[SampleRecord], seed: int = 0, **kw) -> dict:
    from .evalmetrics import evaluate_pairs

    gen = generate_targets(model, records, seed, **kw)
    ref = [r.images[gc.TARGET_SLOT].astype(np.float64) for r in records]
    out = evaluate_pairs(gen, ref)
    out["seed"] = seed
    return out


def load_records(data_dir: str | Path, limit: int | None = None) -> list[SampleRecord]:
    _, records = load_dataset(data_dir)
    return records[:limit] if limit else records
