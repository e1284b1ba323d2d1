import json
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from great.synthetic import generate_synthetic  # noqa: E402


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """A small synthetic dataset shared across tests (read-only)."""
    out = tmp_path_factory.mktemp("synth")
    manifest = generate_synthetic({"instances_per_object": 5, "images_per_cell": 3}, out, seed=0)
    return manifest, out


@pytest.fixture(scope="session")
def small_cache(small_synth, tmp_path_factory):
    from great.mllm_client import BackendConfig
    from great.pipeline import reason

    manifest, out = small_synth
    cache = tmp_path_factory.mktemp("cache")
    summary = reason(manifest, BackendConfig(kind="fixture", fixture_path=str(out / "fixtures.json")), cache)
    assert summary["fail"] == 0
    return cache


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def tiny_config(synth_dir, cache_dir, ckpt_dir, **over):
    """Config dict for a seconds-long training run on the small synthetic set."""
    cfg = {
        "epochs": 2,
        "batch_size": 4,
        "learning_rate": 1e-3,
        "seed": 0,
        "dims": {"C": 8, "N_p": 16, "N_i": 4},
        "model": {"npoints": [64, 32, 16], "nsample": 8, "text_buckets": 256},
        "partition": "seen",
        "held_out_objects": ["bottle"],
        "held_out_affordances": ["cut"],
        "paths": {
            "manifest": str(synth_dir / "manifest.json"),
            "cache_dir": str(cache_dir),
            "checkpoint_dir": str(ckpt_dir),
        },
    }
    cfg.update(over)
    return cfg


@pytest.fixture(scope="session")
def tiny_run(small_synth, small_cache, tmp_path_factory):
    from great.pipeline import TrainConfig, train

    _, out = small_synth
    ckpt_dir = tmp_path_factory.mktemp("ckpt")
    cfg = TrainConfig.from_dict(tiny_config(out, small_cache, ckpt_dir))
    ckpt, curve = train(cfg)
    return ckpt, curve, cfg


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
