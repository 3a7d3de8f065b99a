"""Shared pytest fixtures for the test suite."""

from __future__ import annotations

import subprocess
import sys
from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest

from edgecnn.builder import LGCParams, ModelConfig, Variant, build
from edgecnn.data import DatasetSplits, generate_synthetic, write_synthetic
from edgecnn.model import Model

CliRunner = Callable[..., subprocess.CompletedProcess[str]]


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator so every test draws the same numbers."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> ModelConfig:
    """One unit per block; same layer kinds as the full network, far fewer weights."""
    return ModelConfig(growth_rate=8, stem_channels=8, block_lengths=(1, 1, 1), channel_plan=None)


@pytest.fixture
def tiny_grouped_config() -> ModelConfig:
    """Grouped variant with C=2 so a two-epoch run fully condenses."""
    return ModelConfig(
        growth_rate=8,
        stem_channels=8,
        block_lengths=(2, 1, 1),
        variant=Variant.GROUPED,
        conv1_lgc=LGCParams(G=4, C=2),
        conv2_lgc=LGCParams(G=8, C=2),
        channel_plan=None,
    )


@pytest.fixture
def tiny_model(tiny_config: ModelConfig) -> Model:
    return build(tiny_config, seed=0)


@pytest.fixture
def tiny_grouped_model(tiny_grouped_config: ModelConfig) -> Model:
    return build(tiny_grouped_config, seed=0)


@pytest.fixture
def synthetic_splits() -> DatasetSplits:
    return generate_synthetic(train=28, val=14, test=14, seed=3)


@pytest.fixture
def synthetic_dir(tmp_path: Path, synthetic_splits: DatasetSplits) -> Path:
    """Synthetic fixture written to disk as PGM files plus a listing."""
    root = tmp_path / "synthetic"
    write_synthetic(synthetic_splits, root)
    return root


@pytest.fixture
def cli_runner() -> CliRunner:
    """Run the package CLI as a subprocess with optional stdin."""

    def _run(*args: str, input_text: str | None = None) -> subprocess.CompletedProcess[str]:
        return subprocess.run(
            [sys.executable, "-m", "edgecnn", *args],
            check=False,
            capture_output=True,
            text=True,
            input=input_text,
        )

    return _run
