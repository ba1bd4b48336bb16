import math

import numpy as np
import pytest
import torch

from mvposediff import gridcodec as gc
from mvposediff.gridcodec import CodecConfig, ViewMask


def _views(h=32, w=24, seed=0):
    r = np.random.default_rng(seed)
    return [r.random((h, w, 3)).astype(np.float32) for _ in range(4)]


def test_compose_shape_and_inverse():
    v = _views()
    g = gc.compose_grid(v)
    assert g.shape == (64, 48, 3)
    for a, b in zip(gc.decompose_grid(g), v):
        assert np.array_equal(a, b)


def test_compose_constant_quadrants():
    consts = [0.0, 0.25, 0.5, 1.0]
    g = gc.compose_grid([np.full((8, 6, 3), c) for c in consts])
    assert [q.mean() for q in gc.decompose_grid(g)] == consts
    assert g[0, 0, 0] == 0.0 and g[0, -1, 0] == 0.25 and g[-1, 0, 0] == 0.5 and g[-1, -1, 0] == 1.0


def test_compose_rejects_mismatch():
    v = _views()
    v[2] = v[2][:-1]
    with pytest.raises(ValueError, match="view 2"):
        gc.compose_grid(v)
    with pytest.raises(ValueError):
        gc.compose_grid(_views()[:3])


@pytest.mark.parametrize("f, expected", [(2, (12, 32, 24)), (4, (48, 16, 12))])
def test_std_codec_shapes(f, expected):
    codec = gc.make_codec(CodecConfig("std", f))
    x = torch.rand(1, 3, 64, 48)
    z = codec.encode(x)
    assert tuple(z.shape[1:]) == expected
    assert codec.cfg.d_V == 3 * f * f
    assert torch.equal(codec.decode(z), x)


def test_std_codec_rejects_indivisible():
    codec = gc.make_codec(CodecConfig("std", 4))
    with pytest.raises(ValueError, match="divisible"):
        codec.encode(torch.rand(1, 3, 66, 48))


def test_codec_config_validation():
    with pytest.raises(ValueError):
        CodecConfig("std", 8)
    with pytest.raises(ValueError):
        CodecConfig("vq", 2)
    assert CodecConfig("ae", 2).d_V == 4


def test_std_codec_view_locality():
    codec = gc.make_codec(CodecConfig("std", 2))
    x = torch.rand(1, 3, 64, 48)
    z = codec.encode(x)
    for slot in range(4):
        y = x.clone()
        gc.quadrant(y, slot).add_(0.5)
        dz = (codec.encode(y) - z).abs().sum(dim=1)[0]
        changed = {s for s in range(4) if gc.quadrant(dz, s).any()}
        assert changed == {slot}


def test_ae_codec_trains_and_meets_recorded_threshold(tmp_path):
    torch.manual_seed(0)
    r = np.random.default_rng(0)
    # smooth blobs so a tiny ae can learn them quickly
    grids = torch.from_numpy(r.random((6, 3, 8, 8)).astype(np.float32))
    grids = torch.nn.functional.interpolate(grids, size=(32, 32), mode="bilinear", align_corners=False) * 2 - 1
    cfg = CodecConfig("ae", 2, d_V=4, ae_width=16)
    codec, meta = gc.train_autoencoder(grids[:4], cfg, steps=150, lr=3e-3, batch_size=4,
                                       val_grids=grids[4:])
    assert meta["psnr_threshold"] == pytest.approx(meta["val_psnr"] - 1.0)
    torch.save({"state_dict": codec.state_dict(), "codec_cfg": cfg.to_dict(), "meta": meta}, tmp_path / "ae.pt")
    payload = torch.load(tmp_path / "ae.pt", weights_only=False)
    reloaded = gc.make_codec(CodecConfig(**payload["codec_cfg"]), payload["state_dict"])
    with torch.no_grad():
        z = reloaded.encode(grids[4:])
        rec = reloaded.decode(z)
    assert tuple(z.shape[1:]) == (4, 16, 16)
    assert gc.psnr((rec.clamp(-1, 1) + 1) / 2, (grids[4:] + 1) / 2) > payload["meta"]["psnr_threshold"]


def test_mask_invariants(rng):
    for _ in range(2000):
        m = gc.sample_view_mask(rng)
        assert m.known[3] is False
        assert 1 <= m.n_unknown <= 3


def test_mask_m1_keeps_all_sources():
    m = gc.sample_view_mask(np.random.default_rng(0), n_unknown=1)
    assert m.known == (True, True, True, False)
    assert m.known_sources == [0, 1, 2]


def test_mask_validation():
    with pytest.raises(ValueError):
        ViewMask((True, True, True, True))
    with pytest.raises(ValueError):
        ViewMask((False, False, False, False))
    with pytest.raises(ValueError):
        gc.mask_from_refs([])
    with pytest.raises(ValueError):
        gc.mask_from_refs([0, 3])


def test_mask_count_distribution():
    """P(m) = 1/3 each, 3-sigma binomial band over 30000 draws."""
    r = np.random.default_rng(99)
    n = 30000
    counts = np.bincount([gc.sample_view_mask(r).n_unknown for _ in range(n)], minlength=4)[1:]
    sigma = math.sqrt(n * (1 / 3) * (2 / 3))
    assert np.all(np.abs(counts - n / 3) <= 3 * sigma), counts


def test_extra_unknown_slots_uniform():
    r = np.random.default_rng(5)
    hits = np.zeros(3)
    n = 0
    for _ in range(9000):
        m = gc.sample_view_mask(r)
        if m.n_unknown == 2:
            n += 1
            hits += [not k for k in m.known[:3]]
    sigma = math.sqrt(n * (1 / 3) * (2 / 3))
    assert np.all(np.abs(hits - n / 3) <= 3 * sigma)


def test_latent_mask_is_block_reduction(rng):
    for f in (1, 2, 4):
        for _ in range(20):
            m = gc.sample_view_mask(rng)
            pm = m.pixel_mask((64, 48))
            np.testing.assert_array_equal(gc.block_reduce_mask(pm, f), m.latent_mask((64 // f, 48 // f)))


def test_masked_latent_target_only():
    z = torch.rand(1, 12, 32, 24) + 0.1
    m = ViewMask((True, True, True, False))
    unknown = gc.latent_mask_tensor([m], (32, 24))
    out = gc.make_masked_latent(z, unknown)
    for s in range(3):
        assert torch.equal(gc.quadrant(out, s), gc.quadrant(z, s))
    assert torch.all(gc.quadrant(out, 3) == 0)


def test_masked_latent_single_known():
    z = torch.rand(1, 12, 32, 24) + 0.1
    m = ViewMask((False, True, False, False))
    out = gc.make_masked_latent(z, gc.latent_mask_tensor([m], (32, 24)))
    nz = {s for s in range(4) if gc.quadrant(out, s).abs().sum() > 0}
    assert nz == {1}


def test_masked_latent_idempotent(rng):
    z = torch.randn(3, 12, 16, 12)
    masks = [gc.sample_view_mask(rng) for _ in range(3)]
    u = gc.latent_mask_tensor(masks, (16, 12))
    once = gc.make_masked_latent(z, u)
    assert torch.equal(gc.make_masked_latent(once, u), once)
