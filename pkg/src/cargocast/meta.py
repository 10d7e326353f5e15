"""Episodic two-loop training over O&D tasks, first-order variant.

Each O&D is one task: the inner loop adapts a copy of the shared
parameters on the task's support set with plain gradient steps; the outer
loop updates the shared parameters with the summed query-set gradients
taken at the adapted parameters (FOMAML). Inference-time fine-tuning
reuses the inner loop on the most recent slice of training data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import date
from typing import Callable, Protocol

import numpy as np

from . import autodiff as ad
from .data import ODKey
from .errors import CargocastError, ConfigError, ModelUnavailableError, NonFiniteError
from .neural.base import NeuralConfig, PanelEncoder, SampleBatch, substream
from .neural.training import batch_loss, eligible_anchors, init_params, predict_series
from .optim import AdamState, ParamStore, adam_step, sgd_step

logger = logging.getLogger(__name__)

SUPPORT_FRACTION = 0.8


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 0.01
    outer_lr: float = 1e-3
    inner_steps: int = 3
    meta_batch: int = 8
    meta_iters: int = 500
    finetune_steps: int = 5
    finetune_days: int = 28
    outer_optimizer: str = "adam"  # "sgd" gives the hand-checkable update
    seed: int = 0

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ConfigError("step sizes must be >= 0")
        if self.inner_steps < 1 or self.finetune_steps < 1:
            raise ConfigError("inner_steps and finetune_steps must be >= 1")
        if self.meta_batch < 1 or self.meta_iters < 0:
            raise ConfigError("meta_batch must be >= 1 and meta_iters >= 0")
        if self.outer_optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown outer optimizer {self.outer_optimizer!r}")


@dataclass
class TaskEpisode:
    """Support/query split of one O&D task; date ranges are disjoint."""

    od: ODKey
    support: object
    query: object


class TaskModel(Protocol):
    """Anything with a scalar loss over (params, batch)."""

    def loss(self, params: ParamStore, batch) -> ad.Tensor: ...


@dataclass
class NeuralTaskModel:
    """Adapts a neural forecaster to the TaskModel protocol."""

    kind: str
    cfg: NeuralConfig

    def loss(self, params: ParamStore, batch: SampleBatch) -> ad.Tensor:
        return batch_loss(self.kind, params, batch, self.cfg)


def inner_adapt(
    model: TaskModel,
    params: ParamStore,
    support,
    inner_lr: float,
    inner_steps: int,
) -> ParamStore:
    """Full-support gradient steps on a copy; `params` is never touched."""
    adapted = params.copy()
    if inner_lr == 0.0:
        return adapted
    for _ in range(inner_steps):
        adapted.zero_grad()
        loss = model.loss(adapted, support)
        ad.backward(loss)
        adapted = sgd_step(adapted, adapted.grads(), inner_lr)
    return adapted


def query_gradient(model: TaskModel, adapted: ParamStore, query) -> dict[str, np.ndarray]:
    """Gradient of the query loss at the adapted parameters."""
    adapted.zero_grad()
    loss = model.loss(adapted, query)
    ad.backward(loss)
    return adapted.grads()


def meta_train_loop(
    model: TaskModel,
    sample_episodes: Callable[[np.random.Generator], list[TaskEpisode]],
    init: ParamStore,
    cfg: MetaConfig,
) -> ParamStore:
    """Generic two-loop driver; returns the trained shared parameters.

    Degenerate episodes (empty support or query) are skipped with a log
    line; task gradients are summed in O&D order so the reduction does not
    depend on scheduling.
    """
    params = init.copy()
    rng = substream(cfg.seed, "meta-sampling")
    state = AdamState.init(params) if cfg.outer_optimizer == "adam" else None
    for _ in range(cfg.meta_iters):
        episodes = sorted(sample_episodes(rng), key=lambda ep: ep.od)
        total: dict[str, np.ndarray] | None = None
        for ep in episodes:
            if _batch_empty(ep.support) or _batch_empty(ep.query):
                logger.warning("skipping degenerate episode for %s", ep.od)
                continue
            try:
                adapted = inner_adapt(model, params, ep.support, cfg.inner_lr, cfg.inner_steps)
                grads = query_gradient(model, adapted, ep.query)
            except NonFiniteError as exc:
                raise NonFiniteError(f"task {ep.od}: {exc}") from exc
            if total is None:
                total = grads
            else:
                for name in total:
                    total[name] += grads[name]
        if total is None:
            raise CargocastError("every episode in the batch was degenerate")
        if cfg.outer_lr == 0.0:
            continue
        if cfg.outer_optimizer == "adam":
            state, params = adam_step(state, params, total, cfg.outer_lr)
        else:
            params = sgd_step(params, total, cfg.outer_lr)
    return params


def _batch_empty(batch) -> bool:
    size = getattr(batch, "size", None)
    return size == 0


def eligible_task_ods(
    encoder: PanelEncoder, kind: str, cfg: NeuralConfig, od_subset: np.ndarray | None = None
) -> np.ndarray:
    """O&D indices with a scale and enough anchors for both episode halves."""
    anchors = eligible_anchors(kind, encoder, cfg)
    if anchors.size < 2:
        return np.arange(0)
    ods = encoder.trainable_od_indices()
    if od_subset is not None:
        ods = np.intersect1d(ods, np.asarray(od_subset))
    return ods


def sample_tasks(
    encoder: PanelEncoder,
    kind: str,
    cfg: NeuralConfig,
    meta_batch: int,
    rng: np.random.Generator,
    od_subset: np.ndarray | None = None,
) -> list[TaskEpisode]:
    """Uniform without-replacement task sample with a chronological
    support/query split: first 80% of eligible anchor dates vs the rest.
    `od_subset` restricts the task population (cold-start experiments hold
    O&Ds out of meta-training this way)."""
    ods = eligible_task_ods(encoder, kind, cfg, od_subset)
    if ods.size < meta_batch:
        raise CargocastError(
            f"need {meta_batch} eligible O&Ds for a task batch, have {ods.size}"
        )
    chosen = rng.choice(ods, size=meta_batch, replace=False)
    anchors = eligible_anchors(kind, encoder, cfg)
    cut = min(max(int(SUPPORT_FRACTION * anchors.size), 1), anchors.size - 1)
    support_anchors, query_anchors = anchors[:cut], anchors[cut:]
    episodes = []
    for od_idx in sorted(int(i) for i in chosen):
        episodes.append(
            TaskEpisode(
                od=encoder.ods[od_idx],
                support=_od_batch(encoder, kind, cfg, od_idx, support_anchors),
                query=_od_batch(encoder, kind, cfg, od_idx, query_anchors),
            )
        )
    return episodes


def _od_batch(encoder, kind, cfg, od_idx: int, anchors: np.ndarray) -> SampleBatch:
    return encoder.batch(
        kind,
        np.full(anchors.size, od_idx),
        anchors,
        cfg,
        cfg.horizon_chunk,
        with_labels=True,
    )


def meta_train(
    kind: str,
    encoder: PanelEncoder,
    meta_cfg: MetaConfig,
    neural_cfg: NeuralConfig,
    od_subset: np.ndarray | None = None,
) -> ParamStore:
    """Meta-train a forecaster of `kind` across the panel's O&D tasks."""
    model = NeuralTaskModel(kind=kind, cfg=neural_cfg)
    init = init_params(kind, encoder, neural_cfg)
    sampler = lambda rng: sample_tasks(
        encoder, kind, neural_cfg, meta_cfg.meta_batch, rng, od_subset
    )
    return meta_train_loop(model, sampler, init, meta_cfg)


def finetune_support(
    encoder: PanelEncoder, kind: str, cfg: NeuralConfig, meta_cfg: MetaConfig, od_idx: int
) -> SampleBatch:
    """Samples whose label days fall in the most recent fine-tune window."""
    n = encoder.n_days
    if kind == "dnn_ladd":
        lo = max(0, n - meta_cfg.finetune_days)
        anchors = np.arange(lo, n)
    else:
        lo = max(cfg.lookback, n - meta_cfg.finetune_days)
        hi = n - cfg.horizon_chunk
        if hi < lo:
            # window longer than the fine-tune slice: take the last window
            lo = hi = max(cfg.lookback, hi)
        if hi < cfg.lookback:
            raise ModelUnavailableError(f"{kind}: no fine-tune window fits the history")
        anchors = np.arange(lo, hi + 1)
    if anchors.size == 0:
        raise ModelUnavailableError(f"{kind}: empty fine-tune support")
    return _od_batch(encoder, kind, cfg, od_idx, anchors)


def finetune_and_predict(
    kind: str,
    params: ParamStore,
    encoder: PanelEncoder,
    od_index: int,
    start: date,
    horizon: int,
    meta_cfg: MetaConfig,
    neural_cfg: NeuralConfig,
) -> np.ndarray:
    """Adapt a copy on the O&D's recent training data, then forecast.

    The shared `params` are never mutated, so concurrent fine-tunes for
    different O&Ds can share one store.
    """
    if encoder.scales[od_index] <= 0:
        raise ModelUnavailableError("zero training mean, cannot scale")
    model = NeuralTaskModel(kind=kind, cfg=neural_cfg)
    support = finetune_support(encoder, kind, neural_cfg, meta_cfg, od_index)
    try:
        adapted = inner_adapt(model, params, support, meta_cfg.inner_lr, meta_cfg.finetune_steps)
    except NonFiniteError as exc:
        raise NonFiniteError(f"task {encoder.ods[od_index]}: {exc}") from exc
    return predict_series(kind, adapted, encoder, od_index, start, horizon, neural_cfg)
