"""Shared fixtures: one small rendered dataset reused across test modules.

Generating frames is the slowest part of the suite, so the dataset is
session-scoped and read-only; tests that need to mutate files copy what
they need into their own tmp_path.
"""

from __future__ import annotations

import shutil
from pathlib import Path

import pytest

from trv.features import load_manifest
from trv.simworld import SimConfig, WorldConfig, emit_dataset

SMALL_SEED = 11


def small_sim_config(**overrides) -> SimConfig:
    """6 frames at 128x128 over a 100 m world; ~2 s to emit."""
    base = dict(
        n_frames=6,
        frame_spacing=4,
        image_width=128,
        image_height=128,
        focal=128.0,
        stride=4,
        feature_dim=16,
        horizon=120,
        mask_query_points=32,
        world=WorldConfig(size_x=100.0, size_y=40.0),
    )
    base.update(overrides)
    return SimConfig(**base)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("small_dataset")
    manifest = emit_dataset(root, small_sim_config(), seed=SMALL_SEED)
    return manifest


@pytest.fixture(scope="session")
def small_frames(small_dataset):
    return load_manifest(small_dataset)


@pytest.fixture()
def dataset_copy(small_dataset, tmp_path) -> Path:
    """Private mutable copy of the small dataset."""
    dst = tmp_path / "dataset"
    shutil.copytree(small_dataset.parent, dst)
    return dst / small_dataset.name
