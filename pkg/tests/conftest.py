"""Shared fixtures: a small rendered dataset reused across test modules."""

import numpy as np
import pytest

from monovit.encoder import EncoderConfig
from monovit.synthdata import make_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Three 64x64 triplets on disk; returns (dir, triplets)."""
    out = tmp_path_factory.mktemp("data")
    triplets, _ = make_dataset(out, seed=5, n_triplets=3, size=(64, 64))
    return out, triplets


@pytest.fixture()
def tiny_encoder_config():
    return EncoderConfig(stage_channels=(8, 12, 16, 24, 32),
                         transformer_layers=(1, 1, 1, 1),
                         num_transformer_paths=1,
                         attention_heads=2,
                         input_size=(64, 64))
