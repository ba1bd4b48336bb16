"""Image metrics: SSIM, a random-feature perceptual distance (``pdist``) and a
Frechet feature distance (``ffd``).

``pdist`` and ``ffd`` use a fixed randomly initialized conv stack instead of
pretrained networks, so their values are not comparable with LPIPS or FID
numbers computed on pretrained features. They are named differently on purpose.
"""

from __future__ import annotations

import csv
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 7
REPORT_FIELDS = ("variant", "ssim", "pdist", "ffd", "n_samples", "seed")


def _local_mean(x: np.ndarray, win: int) -> np.ndarray:
    return sliding_window_view(x, (win, win)).mean(axis=(-1, -2))


def _ssim_2d(a, b, win, c1, c2):
    mu_a = _local_mean(a, win)
    mu_b = _local_mean(b, win)
    s_aa = _local_mean(a * a, win) - mu_a * mu_a
    s_bb = _local_mean(b * b, win) - mu_b * mu_b
    s_ab = _local_mean(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW, k1: float = 0.01,
         k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over all valid ``window x window`` uniform windows, averaged over channels.

    Uses population (biased) local variances.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape[:2]} smaller than window {window}")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    if a.ndim == 2:
        return float(_ssim_2d(a, b, window, c1, c2).mean())
    return float(np.mean([_ssim_2d(a[..., c], b[..., c], window, c1, c2).mean()
                          for c in range(a.shape[-1])]))


class RandomFeatures(torch.nn.Module):
    """Frozen conv stack with weights drawn from a seeded generator."""

    widths = (16, 32, 64)

    def __init__(self, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.weights = []
        cin = 3
        for w in self.widths:
            k = torch.randn(w, cin, 3, 3, generator=g, dtype=torch.float64) * (2.0 / (cin * 9)) ** 0.5
            self.weights.append(k)
            cin = w

    @torch.no_grad()
    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x.double()
        for i, k in enumerate(self.weights):
            h = F.relu(F.conv2d(h, k, stride=1 if i == 0 else 2, padding=1))
            feats.append(h)
        return feats


@lru_cache(maxsize=8)
def _extractor(seed: int) -> RandomFeatures:
    return RandomFeatures(seed)


def _to_tensor(images) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(arr).permute(0, 3, 1, 2) * 2.0 - 1.0


def perceptual_distance(a: np.ndarray, b: np.ndarray, extractor_seed: int = 0) -> float:
    """Channel-normalized activation distance, averaged over space and summed over layers."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    net = _extractor(extractor_seed)
    total = 0.0
    for fa, fb in zip(net(_to_tensor(a)), net(_to_tensor(b))):
        na = fa / (fa.norm(dim=1, keepdim=True) + 1e-10)
        nb = fb / (fb.norm(dim=1, keepdim=True) + 1e-10)
        total += ((na - nb) ** 2).sum(dim=1).mean().item()
    return total


def extract_features(images: Sequence[np.ndarray], extractor_seed: int = 0) -> np.ndarray:
    """Global-average-pooled last-layer activations, one row per image."""
    net = _extractor(extractor_seed)
    x = _to_tensor(np.stack(list(images)))
    return net(x)[-1].mean(dim=(2, 3)).numpy()


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(feats_a, feats_b, shrinkage: float = 1e-6) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)) for Gaussian fits of two feature sets.

    The cross term uses the symmetric form ``Tr((A^1/2 B A^1/2)^1/2)``,
    which is stable for near-singular covariances. When a set has no more
    samples than dimensions, ``shrinkage * I`` is added to its covariance.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("feature sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    d = a.shape[1]

    def stats(x):
        mu = x.mean(axis=0)
        cov = np.cov(x, rowvar=False, bias=False).reshape(d, d) if x.shape[0] > 1 else np.zeros((d, d))
        if x.shape[0] < d + 1:
            cov = cov + shrinkage * np.eye(d)
        return mu, cov

    mu_a, s_a = stats(a)
    mu_b, s_b = stats(b)
    ra = _psd_sqrt(s_a)
    cross = _psd_sqrt(ra @ s_b @ ra)
    val = float(np.sum((mu_a - mu_b) ** 2) + np.trace(s_a) + np.trace(s_b) - 2.0 * np.trace(cross))
    return max(val, 0.0)


def evaluate_pairs(generated: Sequence[np.ndarray], reference: Sequence[np.ndarray],
                   extractor_seed: int = 0) -> dict:
    if len(generated) != len(reference) or not generated:
        raise ValueError("need equal, non-zero numbers of generated and reference images")
    return {
        "ssim": float(np.mean([ssim(g, r) for g, r in zip(generated, reference)])),
        "pdist": float(np.mean([perceptual_distance(g, r, extractor_seed)
                                for g, r in zip(generated, reference)])),
        "ffd": frechet_distance(extract_features(generated, extractor_seed),
                                extract_features(reference, extractor_seed)),
        "n_samples": len(generated),
    }


def write_report(path: str | Path, rows: Iterable[dict], fields: Sequence[str] = REPORT_FIELDS) -> None:
    """Tab-separated report, one row per variant or checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), delimiter="\t", extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def read_report(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh, delimiter="\t"))
