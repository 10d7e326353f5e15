"""Standard (non-meta) training and prediction for the neural forecasters."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import date

import numpy as np

from .. import autodiff as ad
from ..errors import CargocastError, ModelUnavailableError
from ..optim import AdamState, ParamStore, adam_step
from .arch import dnn_ladd_forward, dnn_ladd_init, nbeats_forward, nbeats_init, tft_forward, tft_init
from .base import MODEL_KINDS, NeuralConfig, PanelEncoder, SampleBatch, substream

logger = logging.getLogger(__name__)


def init_params(kind: str, encoder: PanelEncoder, cfg: NeuralConfig, rng=None) -> ParamStore:
    rng = rng if rng is not None else substream(cfg.seed, kind, "init")
    if kind == "dnn_ladd":
        return dnn_ladd_init(cfg, encoder.n_features, encoder.n_stations, rng)
    if kind == "nbeats":
        return nbeats_init(cfg, encoder.n_features, encoder.n_stations, cfg.horizon_chunk, rng)
    if kind == "tft":
        return tft_init(cfg, encoder.n_features, encoder.n_stations, rng)
    raise CargocastError(f"unknown model kind {kind!r}")


def forward(kind: str, params: ParamStore, batch: SampleBatch, cfg: NeuralConfig, dropout_rng=None):
    if kind == "dnn_ladd":
        return dnn_ladd_forward(params, batch, cfg, dropout_rng)
    if kind == "nbeats":
        return nbeats_forward(params, batch, cfg, dropout_rng)[0]
    if kind == "tft":
        return tft_forward(params, batch, cfg, dropout_rng)
    raise CargocastError(f"unknown model kind {kind!r}")


def batch_loss(kind: str, params: ParamStore, batch: SampleBatch, cfg: NeuralConfig, dropout_rng=None):
    """Mean squared error on scaled targets."""
    preds = forward(kind, params, batch, cfg, dropout_rng)
    labels = batch.labels if kind == "dnn_ladd" else batch.labels_h
    if labels is None:
        raise CargocastError(f"{kind}: batch has no labels")
    diff = ad.sub(preds, ad.Tensor(labels))
    return ad.tensor_mean(ad.mul(diff, diff))


def eligible_anchors(kind: str, encoder: PanelEncoder, cfg: NeuralConfig) -> np.ndarray:
    """Anchor day indices usable for training samples of this kind."""
    if kind == "dnn_ladd":
        return np.arange(encoder.n_days)
    lo = cfg.lookback
    hi = encoder.n_days - cfg.horizon_chunk  # inclusive-exclusive anchor bound
    if hi <= lo:
        return np.arange(0)
    return np.arange(lo, hi + 1)


def training_samples(kind: str, encoder: PanelEncoder, cfg: NeuralConfig) -> tuple[np.ndarray, np.ndarray]:
    """(od indices, anchor indices) of every eligible training sample."""
    ods = encoder.trainable_od_indices()
    anchors = eligible_anchors(kind, encoder, cfg)
    if ods.size == 0 or anchors.size == 0:
        raise CargocastError(f"{kind}: no eligible training samples")
    od_col = np.repeat(ods, anchors.size)
    anchor_col = np.tile(anchors, ods.size)
    return od_col, anchor_col


@dataclass
class TrainResult:
    params: ParamStore
    epoch_losses: list[float]


def train_model(kind: str, encoder: PanelEncoder, cfg: NeuralConfig) -> TrainResult:
    """Minibatch-Adam training over uniform (O&D, date) samples.

    Deterministic given cfg.seed: init and shuffling use named substreams.
    """
    if kind not in MODEL_KINDS:
        raise CargocastError(f"unknown model kind {kind!r}")
    od_col, anchor_col = training_samples(kind, encoder, cfg)
    params = init_params(kind, encoder, cfg)
    shuffle_rng = substream(cfg.seed, kind, "shuffle")
    dropout_rng = substream(cfg.seed, kind, "dropout") if cfg.dropout > 0 else None
    state = AdamState.init(params)
    horizon = cfg.horizon_chunk
    losses: list[float] = []
    for _ in range(cfg.epochs):
        perm = shuffle_rng.permutation(od_col.size)
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, perm.size, cfg.batch):
            if cfg.max_batches_per_epoch is not None and n_batches >= cfg.max_batches_per_epoch:
                break
            take = perm[lo : lo + cfg.batch]
            batch = encoder.batch(kind, od_col[take], anchor_col[take], cfg, horizon, with_labels=True)
            params.zero_grad()
            loss = batch_loss(kind, params, batch, cfg, dropout_rng)
            ad.backward(loss)
            state, params = adam_step(state, params, params.grads(), cfg.lr)
            epoch_loss += loss.item()
            n_batches += 1
        losses.append(epoch_loss / max(n_batches, 1))
    return TrainResult(params=params, epoch_losses=losses)


def predict_series_scaled(
    kind: str,
    params: ParamStore,
    encoder: PanelEncoder,
    od_index: int,
    start_index: int,
    horizon: int,
    cfg: NeuralConfig,
) -> np.ndarray:
    """Scaled daily forecast of length `horizon` starting at `start_index`.

    Per-date architecture predicts each day directly; the one-shot
    architectures predict horizon chunks, rolling their own scaled
    predictions forward as history for later chunks.
    """
    if horizon < 1:
        raise CargocastError(f"horizon must be >= 1, got {horizon}")
    if kind == "dnn_ladd":
        anchors = np.arange(start_index, start_index + horizon)
        batch = encoder.batch(kind, np.full(horizon, od_index), anchors, cfg, horizon, with_labels=False)
        return forward(kind, params, batch, cfg).data[:, 0].copy()

    if start_index < cfg.lookback:
        raise ModelUnavailableError(
            f"{kind}: needs {cfg.lookback} days of history before the forecast origin"
        )
    series = encoder.scaled[od_index]
    if encoder.scales[od_index] <= 0:
        raise ModelUnavailableError("zero training mean, cannot scale")
    extended = series[:start_index].copy()
    preds: list[np.ndarray] = []
    produced = 0
    while produced < horizon:
        anchor = start_index + produced
        history = extended[anchor - cfg.lookback : anchor][None, :]
        batch = encoder.batch(
            kind,
            np.array([od_index]),
            np.array([anchor]),
            cfg,
            cfg.horizon_chunk,
            with_labels=False,
            history_rows=history,
        )
        chunk = forward(kind, params, batch, cfg).data[0]
        preds.append(chunk)
        extended = np.concatenate([extended, chunk])
        produced += chunk.size
    return np.concatenate(preds)[:horizon]


def predict_series(
    kind: str,
    params: ParamStore,
    encoder: PanelEncoder,
    od_index: int,
    start: date,
    horizon: int,
    cfg: NeuralConfig,
) -> np.ndarray:
    """Daily forecast in original units, clamped at zero."""
    scale = encoder.scales[od_index]
    if scale <= 0:
        raise ModelUnavailableError("zero training mean, cannot scale")
    scaled = predict_series_scaled(
        kind, params, encoder, od_index, encoder.day_index(start), horizon, cfg
    )
    return np.maximum(scaled * scale, 0.0)
