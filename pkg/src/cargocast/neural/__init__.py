"""Neural forecasters: per-date DNN, residual-stack network, simplified
temporal fusion architecture, on the shared autodiff engine."""

from .arch import (
    dnn_ladd_forward,
    dnn_ladd_init,
    nbeats_forward,
    nbeats_init,
    tft_forward,
    tft_init,
)
from .base import MODEL_KINDS, NeuralConfig, PanelEncoder, SampleBatch, substream
from .training import (
    TrainResult,
    batch_loss,
    forward,
    init_params,
    predict_series,
    predict_series_scaled,
    train_model,
    training_samples,
)

__all__ = [
    "MODEL_KINDS",
    "NeuralConfig",
    "PanelEncoder",
    "SampleBatch",
    "TrainResult",
    "batch_loss",
    "dnn_ladd_forward",
    "dnn_ladd_init",
    "forward",
    "init_params",
    "nbeats_forward",
    "nbeats_init",
    "predict_series",
    "predict_series_scaled",
    "substream",
    "tft_forward",
    "tft_init",
    "train_model",
    "training_samples",
]
