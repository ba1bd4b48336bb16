from __future__ import annotations

import numpy as np
import pytest
import torch

from mvposediff.config import make_config
from mvposediff.synthdata import generate_dataset, load_dataset


def tiny_config(**kw):
    """Small enough for sub-second forward passes; 32x32 views, 2 levels."""
    base = dict(resolution=(32, 32), base_width=16, channel_mult=(1, 2), self_attn_levels=(1,),
                d_c=32, cond_width=8, heads=4, T=50, batch_size=2, steps=5, log_every=0,
                ckpt_every=0, sample_steps=5)
    base.update(kw)
    return make_config("toy", base.pop("ablation", "full"), **base)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_ds")
    generate_dataset(4, seed=3, resolution=(32, 32), out_dir=root)
    return root


@pytest.fixture(scope="session")
def tiny_records(tiny_dataset):
    return load_dataset(tiny_dataset)[1]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
