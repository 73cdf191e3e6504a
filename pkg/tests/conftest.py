import os
from pathlib import Path

import pytest
import torch

from volface.synthdata import DatasetConfig, generate_dataset, load_dataset


def cache_root() -> Path | None:
    """Optional persistent directory for expensive artifacts (datasets,
    trained checkpoints), reused across pytest invocations when the
    VOLFACE_CACHE environment variable is set."""
    env = os.environ.get("VOLFACE_CACHE")
    return Path(env) if env else None


def cached_dataset(name: str, config: DatasetConfig, tmp_factory):
    root = cache_root()
    base = (root / name) if root else tmp_factory.mktemp(name) / "data"
    if (base / "manifest.json").exists():
        ds = load_dataset(base)
        if ds.config.hash() == config.hash():
            return ds
    return generate_dataset(config, base)


@pytest.fixture(scope="session", autouse=True)
def single_threaded_torch():
    # bitwise reproducibility contracts assume single-threaded reductions
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def smoke_dataset(tmp_path_factory):
    """2 identities x 2 clips x 6 frames: enough for pair sampling and
    short training runs."""
    cfg = DatasetConfig(identities=2, clips_per_identity=2, frames_per_clip=6,
                        seed=101)
    return cached_dataset("smoke_dataset", cfg, tmp_path_factory)
