"""Shared fixtures: small seeded panels and encoders."""

import pytest

from cargocast.features import FeatureConfig
from cargocast.neural import NeuralConfig, PanelEncoder
from cargocast.synthetic import SyntheticConfig, generate_synthetic

TINY_CFG = NeuralConfig(
    hidden_dim=8,
    embed_dim=2,
    ladd_window=2,
    lookback=21,
    n_blocks=1,
    n_stacks=2,
    n_heads=2,
    epochs=2,
    batch=32,
    lr=3e-3,
    seed=0,
    horizon_chunk=7,
    max_batches_per_epoch=20,
)


@pytest.fixture(scope="session")
def small_panel():
    return generate_synthetic(
        SyntheticConfig(n_ods=6, n_days=150, weekly_amp=0.4, noise_cv=0.15, seed=21)
    )


@pytest.fixture(scope="session")
def small_encoder(small_panel):
    return PanelEncoder(small_panel, FeatureConfig(k_year=1, k_week=2), small_panel.date_max)
