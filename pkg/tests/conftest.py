from collections.abc import Generator
from pathlib import Path

import numpy as np
import pytest

from app.clients.artifacts import ArtifactStore
from app.core.settings import settings
from app.schemas.sae import L1Sparsity, TrainConfig


@pytest.fixture(autouse=True)
def isolated_out_dir(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Generator[Path, None, None]:
    out_dir = tmp_path / "runs"
    monkeypatch.setattr(settings, "out_dir", out_dir)
    monkeypatch.setattr(settings, "seed", 0)
    monkeypatch.setattr(settings, "threads", 1)
    yield out_dir


@pytest.fixture
def store(tmp_path: Path) -> ArtifactStore:
    return ArtifactStore(tmp_path / "artifacts")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def quick_config() -> TrainConfig:
    """Small enough to train in well under a second."""
    return TrainConfig(
        steps=300,
        batch_size=256,
        learning_rate=1e-2,
        sparsity=L1Sparsity(coefficient=0.1),
        seed=3,
        log_every=50,
        eval_samples=2048,
        dead_latent_samples=2048,
    )
