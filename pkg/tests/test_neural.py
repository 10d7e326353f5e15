"""Neural architectures: structural invariants, gradients, training."""

from datetime import date, timedelta

import numpy as np
import pytest

from cargocast import autodiff as ad
from cargocast.data import DemandRecord, PanelDataset
from cargocast.errors import ModelUnavailableError
from cargocast.features import FeatureConfig
from cargocast.neural import (
    MODEL_KINDS,
    NeuralConfig,
    PanelEncoder,
    dnn_ladd_forward,
    forward,
    init_params,
    nbeats_forward,
    predict_series,
    predict_series_scaled,
    tft_forward,
    train_model,
    training_samples,
)
from cargocast.neural.training import batch_loss
from cargocast.optim import finite_difference_check
from cargocast.synthetic import SyntheticConfig, generate_synthetic, od_universe
from tests.conftest import TINY_CFG


def sample_batch(encoder, kind, cfg, n=4, seed=0, with_labels=True):
    ods, anchors = training_samples(kind, encoder, cfg)
    rng = np.random.default_rng(seed)
    pick = rng.choice(ods.size, size=n, replace=False)
    return encoder.batch(kind, ods[pick], anchors[pick], cfg, cfg.horizon_chunk, with_labels)


def randomized_params(kind, encoder, cfg, seed):
    """Init then fully randomize so no ReLU sits exactly on its kink."""
    params = init_params(kind, encoder, cfg.with_seed(seed))
    rng = np.random.default_rng(seed)
    for _, t in params.items():
        t.data[...] = rng.normal(0, 0.5, t.data.shape)
    return params


class TestDnnLadd:
    def test_zero_params_output_is_head_bias(self, small_encoder):
        params = init_params("dnn_ladd", small_encoder, TINY_CFG)
        for _, t in params.items():
            t.data[...] = 0.0
        params["head.b"].data[...] = 3.25
        batch = sample_batch(small_encoder, "dnn_ladd", TINY_CFG, n=5)
        out = dnn_ladd_forward(params, batch, TINY_CFG)
        assert np.allclose(out.data, 3.25)

    def test_batch_permutation_equivariance(self, small_encoder):
        params = randomized_params("dnn_ladd", small_encoder, TINY_CFG, seed=3)
        batch = sample_batch(small_encoder, "dnn_ladd", TINY_CFG, n=6)
        out = dnn_ladd_forward(params, batch, TINY_CFG).data
        perm = np.array([4, 2, 0, 5, 1, 3])
        out_perm = dnn_ladd_forward(params, batch.take(perm), TINY_CFG).data
        assert np.array_equal(out_perm, out[perm])

    def test_gradient_check(self, small_encoder):
        params = randomized_params("dnn_ladd", small_encoder, TINY_CFG, seed=1)
        batch = sample_batch(small_encoder, "dnn_ladd", TINY_CFG, n=1)
        err = finite_difference_check(
            lambda p: batch_loss("dnn_ladd", p, batch, TINY_CFG), params, h=1e-5
        )
        assert err < 1e-4


class TestNbeats:
    def test_forecast_is_sum_of_blocks(self, small_encoder):
        params = randomized_params("nbeats", small_encoder, TINY_CFG, seed=2)
        batch = sample_batch(small_encoder, "nbeats", TINY_CFG, n=3)
        total, blocks = nbeats_forward(params, batch, TINY_CFG)
        assert len(blocks) == TINY_CFG.n_stacks * TINY_CFG.n_blocks
        stacked = blocks[0].data.copy()
        for b in blocks[1:]:
            stacked = stacked + b.data
        assert np.array_equal(total.data, stacked)

    def test_single_block_degenerates_to_mlp(self, small_encoder):
        cfg = NeuralConfig(
            hidden_dim=8, embed_dim=2, ladd_window=2, lookback=21, n_blocks=1, n_stacks=1,
            horizon_chunk=7, seed=0,
        )
        params = randomized_params("nbeats", small_encoder, cfg, seed=4)
        batch = sample_batch(small_encoder, "nbeats", cfg, n=3)
        total, blocks = nbeats_forward(params, batch, cfg)
        assert len(blocks) == 1
        assert np.array_equal(total.data, blocks[0].data)

    def test_gradient_check(self, small_encoder):
        cfg = NeuralConfig(
            hidden_dim=6, embed_dim=2, ladd_window=1, lookback=8, n_blocks=1, n_stacks=1,
            horizon_chunk=2, seed=0,
        )
        params = randomized_params("nbeats", small_encoder, cfg, seed=5)
        batch = sample_batch(small_encoder, "nbeats", cfg, n=1)
        err = finite_difference_check(
            lambda p: batch_loss("nbeats", p, batch, cfg), params, h=1e-5
        )
        assert err < 1e-4


class TestTft:
    def test_zero_params_constant_bias_output(self, small_encoder):
        params = init_params("tft", small_encoder, TINY_CFG)
        for _, t in params.items():
            t.data[...] = 0.0
        params["head.b"].data[...] = -1.5
        batch = sample_batch(small_encoder, "tft", TINY_CFG, n=4)
        out = tft_forward(params, batch, TINY_CFG)
        assert out.data.shape == (4, TINY_CFG.horizon_chunk)
        assert np.allclose(out.data, -1.5)

    def test_causal_mask_perturbation_invariance(self, small_encoder):
        params = randomized_params("tft", small_encoder, TINY_CFG, seed=6)
        batch = sample_batch(small_encoder, "tft", TINY_CFG, n=2)
        base = tft_forward(params, batch, TINY_CFG).data
        rng = np.random.default_rng(0)
        for t in (2, 4, 6):
            perturbed = batch.take(np.arange(batch.size))
            perturbed.future_feats = perturbed.future_feats.copy()
            perturbed.future_feats[:, t, :] += rng.normal(0, 5.0, perturbed.future_feats[:, t, :].shape)
            out = tft_forward(params, perturbed, TINY_CFG).data
            assert np.array_equal(out[:, :t], base[:, :t]), f"leak at step {t}"
            assert not np.allclose(out[:, t:], base[:, t:])

    def test_gradient_check_spec_config(self, small_encoder):
        # lookback 8, horizon 4, hidden 8, 2 heads
        cfg = NeuralConfig(
            hidden_dim=8, embed_dim=2, ladd_window=1, lookback=8, n_heads=2, horizon_chunk=4,
            n_blocks=1, n_stacks=1, seed=0,
        )
        params = randomized_params("tft", small_encoder, cfg, seed=7)
        batch = sample_batch(small_encoder, "tft", cfg, n=1)
        err = finite_difference_check(
            lambda p: batch_loss("tft", p, batch, cfg), params, h=1e-5
        )
        assert err < 1e-4


class TestTraining:
    def test_loss_decreases_ma3(self, small_encoder):
        cfg = NeuralConfig(
            hidden_dim=8, embed_dim=2, ladd_window=2, lookback=21, n_heads=2, epochs=10,
            batch=32, lr=3e-3, seed=0, horizon_chunk=7, max_batches_per_epoch=25,
            n_blocks=1, n_stacks=2,
        )
        for kind in MODEL_KINDS:
            losses = train_model(kind, small_encoder, cfg).epoch_losses
            ma3 = np.convolve(losses, np.ones(3) / 3, mode="valid")
            assert np.all(np.diff(ma3) <= 1e-12), f"{kind}: {losses}"

    def test_same_seed_identical_params(self, small_encoder):
        a = train_model("dnn_ladd", small_encoder, TINY_CFG).params
        b = train_model("dnn_ladd", small_encoder, TINY_CFG).params
        assert a.allclose(b, atol=0.0)

    def test_learns_constant_function(self):
        d0 = date(2021, 1, 4)
        recs = [
            DemandRecord(od, d0 + timedelta(days=i), 5.0, 5.0)
            for od in od_universe(3)
            for i in range(120)
        ]
        panel = PanelDataset(recs)
        # weekly-only features repeat exactly, so future dates are in-sample
        encoder = PanelEncoder(panel, FeatureConfig(k_year=0, k_week=1), panel.date_max)
        cfg = NeuralConfig(
            hidden_dim=8, embed_dim=2, ladd_window=1, lookback=14, epochs=60, batch=64,
            lr=1e-2, seed=0, horizon_chunk=7,
        )
        params = train_model("dnn_ladd", encoder, cfg).params
        pred = predict_series("dnn_ladd", params, encoder, 0, panel.date_max + timedelta(days=1), 10, cfg)
        assert np.all(np.abs(pred - 5.0) / 5.0 < 0.01)


@pytest.fixture(scope="module")
def trained(small_encoder):
    return {kind: train_model(kind, small_encoder, TINY_CFG).params for kind in MODEL_KINDS}


class TestPredictSeries:
    def test_length_and_clamp(self, small_encoder, trained):
        start = small_encoder.fit_end + timedelta(days=1)
        for kind in MODEL_KINDS:
            pred = predict_series(kind, trained[kind], small_encoder, 0, start, 30, TINY_CFG)
            assert pred.shape == (30,)
            assert np.all(pred >= 0)
            assert np.all(np.isfinite(pred))

    def test_scale_roundtrip(self, small_encoder, trained):
        start_idx = small_encoder.day_index(small_encoder.fit_end) + 1
        for kind in MODEL_KINDS:
            scaled = predict_series_scaled(
                kind, trained[kind], small_encoder, 1, start_idx, 15, TINY_CFG
            )
            full = predict_series(
                kind, trained[kind], small_encoder, 1, small_encoder.fit_end + timedelta(days=1), 15, TINY_CFG
            )
            assert np.array_equal(full, np.maximum(scaled * small_encoder.scales[1], 0.0))

    def test_one_shot_prefix_stability(self, small_encoder, trained):
        # within a chunk there is no feedback: shorter horizons are prefixes
        start = small_encoder.fit_end + timedelta(days=1)
        for kind in ("nbeats", "tft"):
            full = predict_series(kind, trained[kind], small_encoder, 2, start, TINY_CFG.horizon_chunk, TINY_CFG)
            for h in (1, 3, TINY_CFG.horizon_chunk - 1):
                part = predict_series(kind, trained[kind], small_encoder, 2, start, h, TINY_CFG)
                assert np.array_equal(part, full[:h])

    def test_chunked_rollout_covers_long_horizons(self, small_encoder, trained):
        start = small_encoder.fit_end + timedelta(days=1)
        pred = predict_series("nbeats", trained["nbeats"], small_encoder, 0, start, 26, TINY_CFG)
        assert pred.shape == (26,)  # 7-day chunks rolled 4 times, truncated

    def test_insufficient_lookback_unavailable(self, small_panel):
        encoder = PanelEncoder(small_panel, FeatureConfig(k_year=1, k_week=2), small_panel.date_min + timedelta(days=10))
        params = init_params("nbeats", encoder, TINY_CFG)
        with pytest.raises(ModelUnavailableError):
            predict_series("nbeats", params, encoder, 0, encoder.fit_end + timedelta(days=1), 7, TINY_CFG)

    def test_zero_scale_unavailable(self):
        d0 = date(2021, 1, 4)
        recs = [DemandRecord(od_universe(2)[0], d0 + timedelta(days=i), float(i % 3), 1.0) for i in range(60)]
        recs += [DemandRecord(od_universe(2)[1], d0 + timedelta(days=i), 0.0, 0.0) for i in range(60)]
        panel = PanelDataset(recs)
        encoder = PanelEncoder(panel, FeatureConfig(k_year=0, k_week=1), panel.date_max)
        cfg = NeuralConfig(hidden_dim=4, embed_dim=2, ladd_window=1, lookback=7, horizon_chunk=7, seed=0)
        params = init_params("dnn_ladd", encoder, cfg)
        zero_idx = encoder.od_index(od_universe(2)[1])
        with pytest.raises(ModelUnavailableError):
            predict_series("dnn_ladd", params, encoder, zero_idx, panel.date_max + timedelta(days=1), 7, cfg)


class TestDeterminism:
    def test_forward_deterministic_without_dropout(self, small_encoder):
        for kind in MODEL_KINDS:
            params = randomized_params(kind, small_encoder, TINY_CFG, seed=9)
            batch = sample_batch(small_encoder, kind, TINY_CFG, n=3)
            a = forward(kind, params, batch, TINY_CFG).data
            b = forward(kind, params, batch, TINY_CFG).data
            assert np.array_equal(a, b)

    def test_dropout_changes_training_path_only(self, small_encoder):
        cfg_drop = NeuralConfig(
            hidden_dim=8, embed_dim=2, ladd_window=2, lookback=21, epochs=2, batch=32,
            seed=0, horizon_chunk=7, dropout=0.3, max_batches_per_epoch=5,
        )
        res = train_model("dnn_ladd", small_encoder, cfg_drop)
        assert np.all(np.isfinite(res.epoch_losses))
        # evaluation forward passes ignore dropout
        params = res.params
        batch = sample_batch(small_encoder, "dnn_ladd", cfg_drop, n=3)
        a = forward("dnn_ladd", params, batch, cfg_drop).data
        b = forward("dnn_ladd", params, batch, cfg_drop).data
        assert np.array_equal(a, b)
