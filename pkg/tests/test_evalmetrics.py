import math

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from mvposediff import evalmetrics as em


def scalar_ssim(a, b, win=7, k1=0.01, k2=0.03, L=1.0):
    """Loop-by-loop SSIM straight from the windowed-statistics definition."""
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    H, W = len(a), len(a[0])
    n = win * win
    vals = []
    for i in range(H - win + 1):
        for j in range(W - win + 1):
            pa = [a[i + u][j + v] for u in range(win) for v in range(win)]
            pb = [b[i + u][j + v] for u in range(win) for v in range(win)]
            ma = sum(pa) / n
            mb = sum(pb) / n
            va = sum((x - ma) ** 2 for x in pa) / n
            vb = sum((x - mb) ** 2 for x in pb) / n
            cov = sum((x - ma) * (y - mb) for x, y in zip(pa, pb)) / n
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def test_ssim_identity_exact(rng):
    for shape in ((16, 16), (32, 24, 3)):
        x = rng.random(shape)
        assert em.ssim(x, x) == 1.0


def test_ssim_symmetric_and_bounded(rng):
    for _ in range(5):
        a, b = rng.random((20, 18, 3)), rng.random((20, 18, 3))
        assert em.ssim(a, b) == pytest.approx(em.ssim(b, a), abs=1e-12)
        assert -1 <= em.ssim(a, b) <= 1


def test_ssim_binary_inverse_matches_scalar_oracle(rng):
    x = (rng.random((14, 12)) > 0.5).astype(np.float64)
    got = em.ssim(x, 1 - x)
    assert got == pytest.approx(scalar_ssim(x.tolist(), (1 - x).tolist()), abs=1e-12)
    assert got < 0


def test_ssim_matches_skimage(rng):
    a = rng.random((24, 20, 3))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    ref = structural_similarity(a, b, win_size=7, data_range=1.0, channel_axis=-1,
                                use_sample_covariance=False)
    # skimage crops the filtered image to the same fully-valid windows
    assert em.ssim(a, b) == pytest.approx(ref, abs=1e-6)


def test_ssim_rejects_mismatch():
    with pytest.raises(ValueError):
        em.ssim(np.zeros((8, 8)), np.zeros((8, 9)))


def test_pdist_properties(rng):
    a, b = rng.random((32, 24, 3)), rng.random((32, 24, 3))
    assert em.perceptual_distance(a, a) == 0.0
    assert em.perceptual_distance(a, b) == pytest.approx(em.perceptual_distance(b, a), rel=1e-12)
    assert em.perceptual_distance(a, b) > 0
    assert em.perceptual_distance(a, b, 3) == em.perceptual_distance(a, b, 3)
    assert em.perceptual_distance(a, b, 3) != em.perceptual_distance(a, b, 4)


def test_pdist_monotone_in_noise():
    r = np.random.default_rng(0)
    img = r.random((32, 24, 3))
    means = []
    for sigma in (0.05, 0.1, 0.2):
        d = [em.perceptual_distance(img, np.clip(img + sigma * r.standard_normal(img.shape), 0, 1))
             for _ in range(20)]
        means.append(np.mean(d))
    assert means[0] < means[1] < means[2]


def test_frechet_identical_sets(rng):
    s = rng.standard_normal((50, 8))
    assert em.frechet_distance(s, s) < 1e-8


def test_frechet_degenerate_1d():
    assert em.frechet_distance(np.zeros(20), np.ones(20)) == pytest.approx(1.0, abs=1e-4)


def _closed_form(mu1, s1, mu2, s2):
    w, v = np.linalg.eigh(s1)
    r = v @ np.diag(np.sqrt(w)) @ v.T
    cross = np.linalg.eigvalsh(r @ s2 @ r)
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2 * np.sum(np.sqrt(cross)))


def test_frechet_multivariate_closed_form():
    r = np.random.default_rng(1)
    d = 4
    A = r.standard_normal((d, d))
    B = r.standard_normal((d, d))
    s1, s2 = A @ A.T + 0.5 * np.eye(d), B @ B.T + 0.5 * np.eye(d)
    mu1, mu2 = r.standard_normal(d), r.standard_normal(d)
    n = 10_000
    x = r.multivariate_normal(mu1, s1, n)
    y = r.multivariate_normal(mu2, s2, n)
    exact = _closed_form(mu1, s1, mu2, s2)
    assert em.frechet_distance(x, y) == pytest.approx(exact, rel=0.05)


def test_frechet_near_singular_no_nan():
    r = np.random.default_rng(2)
    d = 6
    scales = np.logspace(0, -6, d)     # condition number 1e12 on the covariance
    x = r.standard_normal((200, d)) * scales
    y = r.standard_normal((200, d)) * scales + 0.1
    v = em.frechet_distance(x, y)
    assert math.isfinite(v) and v >= 0
    # fewer samples than dims: shrinkage path
    v = em.frechet_distance(r.standard_normal((3, 10)), r.standard_normal((4, 10)))
    assert math.isfinite(v) and v >= 0


def test_frechet_symmetric_and_validation(rng):
    a, b = rng.standard_normal((40, 5)), rng.standard_normal((30, 5)) + 1
    assert em.frechet_distance(a, b) == pytest.approx(em.frechet_distance(b, a), rel=1e-9)
    with pytest.raises(ValueError):
        em.frechet_distance(np.zeros((0, 5)), a)
    with pytest.raises(ValueError):
        em.frechet_distance(a, np.zeros((5, 4)))


def test_evaluate_pairs_and_report(tmp_path, rng):
    gen = [rng.random((16, 16, 3)) for _ in range(4)]
    m = em.evaluate_pairs(gen, gen)
    assert m["ssim"] == 1.0 and m["pdist"] == 0.0 and m["ffd"] < 1e-8 and m["n_samples"] == 4
    path = tmp_path / "r.tsv"
    em.write_report(path, [dict(variant="full", seed=0, **m)])
    rows = em.read_report(path)
    assert list(rows[0]) == list(em.REPORT_FIELDS)
    assert rows[0]["variant"] == "full" and float(rows[0]["ssim"]) == 1.0
    with pytest.raises(ValueError):
        em.evaluate_pairs(gen, gen[:2])
