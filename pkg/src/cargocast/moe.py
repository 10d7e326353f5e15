"""Per-O&D expert selection by validation loss, with test-time routing.

Every pool model forecasts the validation window; the model with the
lowest weekly normalized error wins each O&D. Test predictions flow
through the selected experts (refit on train+validation), falling back to
the next-best validated model when an expert cannot serve an O&D.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Callable

import numpy as np

from .data import DateRange, ODKey, PanelDataset, SplitSpec, week_start
from .errors import CargocastError, ModelUnavailableError, NonFiniteError
from .meta import MetaConfig, finetune_and_predict, meta_train
from .metrics import SeriesPair, nrmse, winner
from .neural.base import NeuralConfig, PanelEncoder
from .neural.training import predict_series, train_model
from .optim import ParamStore
from .statmodels import (
    AutoEts,
    Croston,
    DotTheta,
    Forecaster,
    HistoricAverage,
    HoltWinters,
    SeasonalNaive,
    Ses,
    WindowAverage,
    YoyBenchmark,
)

logger = logging.getLogger(__name__)

# Tie-break priority: simpler, cheaper models first; neural last.
MODEL_PRIORITY = (
    "historic_avg",
    "window_avg",
    "seasonal_naive",
    "yoy",
    "ses",
    "croston",
    "holt_winters",
    "auto_ets",
    "dot",
    "dnn_ladd",
    "nbeats",
    "tft",
)
STAT_NAMES = frozenset(
    {"historic_avg", "window_avg", "seasonal_naive", "ses", "croston", "holt_winters", "auto_ets", "dot"}
)
ML_NAMES = frozenset({"dnn_ladd", "nbeats", "tft"})
BENCHMARK_NAME = "yoy"


@dataclass(frozen=True, order=True)
class ModelId:
    name: str
    meta: bool = False

    def __post_init__(self):
        if self.name not in MODEL_PRIORITY:
            raise CargocastError(f"unknown model name {self.name!r}")
        if self.meta and self.name not in ML_NAMES:
            raise CargocastError(f"{self.name} has no meta-trained variant")

    @property
    def priority(self) -> tuple[int, int]:
        return (MODEL_PRIORITY.index(self.name), int(self.meta))

    @property
    def model_type(self) -> str:
        if self.name in ML_NAMES:
            return "ML"
        return "Benchmark" if self.name == BENCHMARK_NAME else "Stat"

    def __str__(self) -> str:
        return f"{self.name}_meta" if self.meta else self.name

    @classmethod
    def parse(cls, text: str) -> "ModelId":
        if text.endswith("_meta"):
            return cls(text[: -len("_meta")], meta=True)
        return cls(text)


def priority_sorted(models: list[ModelId]) -> list[ModelId]:
    return sorted(models, key=lambda m: m.priority)


class PoolMember:
    """One pool entry: global fit per phase, per-O&D daily forecasts."""

    def __init__(self, model_id: ModelId):
        self.model_id = model_id
        self.encoder: PanelEncoder | None = None

    def fit(self, encoder: PanelEncoder) -> None:
        raise NotImplementedError

    def forecast(self, od: ODKey, start: date, horizon: int) -> np.ndarray:
        """Daily forecast of length `horizon` from `start` (the day after
        the member's fit window). Raises ModelUnavailableError when this
        O&D cannot be served."""
        raise NotImplementedError


class StatMember(PoolMember):
    def __init__(self, model_id: ModelId, factory: Callable[[], Forecaster]):
        super().__init__(model_id)
        self.factory = factory

    def fit(self, encoder: PanelEncoder) -> None:
        self.encoder = encoder

    def forecast(self, od: ODKey, start: date, horizon: int) -> np.ndarray:
        if self.encoder is None:
            raise CargocastError(f"{self.model_id}: forecast before fit")
        expected = self.encoder.fit_end + timedelta(days=1)
        if start != expected:
            raise CargocastError(f"{self.model_id}: forecast must start at {expected}, got {start}")
        y = self.encoder.values[self.encoder.od_index(od)]
        model = self.factory()
        model.fit_values(y)
        return model.predict(horizon)


class NeuralMember(PoolMember):
    """A neural forecaster, optionally meta-trained.

    Plain members retrain on each phase's fit window. Meta members train
    once (on the first phase) and serve later phases through per-O&D
    fine-tuning, which is their adaptation mechanism.
    """

    def __init__(
        self,
        model_id: ModelId,
        cfg: NeuralConfig,
        meta_cfg: MetaConfig | None = None,
    ):
        super().__init__(model_id)
        if model_id.meta and meta_cfg is None:
            raise CargocastError(f"{model_id}: meta member needs a MetaConfig")
        self.cfg = cfg
        self.meta_cfg = meta_cfg
        self.params: ParamStore | None = None

    def fit(self, encoder: PanelEncoder) -> None:
        if self.model_id.meta:
            if self.params is None:
                self.params = meta_train(self.model_id.name, encoder, self.meta_cfg, self.cfg)
        else:
            self.params = train_model(self.model_id.name, encoder, self.cfg).params
        self.encoder = encoder

    def forecast(self, od: ODKey, start: date, horizon: int) -> np.ndarray:
        if self.encoder is None or self.params is None:
            raise CargocastError(f"{self.model_id}: forecast before fit")
        od_idx = self.encoder.od_index(od)
        if self.model_id.meta:
            return finetune_and_predict(
                self.model_id.name,
                self.params,
                self.encoder,
                od_idx,
                start,
                horizon,
                self.meta_cfg,
                self.cfg,
            )
        return predict_series(
            self.model_id.name, self.params, self.encoder, od_idx, start, horizon, self.cfg
        )


STAT_FACTORIES: dict[str, Callable[[], Forecaster]] = {
    "historic_avg": HistoricAverage,
    "window_avg": WindowAverage,
    "seasonal_naive": SeasonalNaive,
    "yoy": YoyBenchmark,
    "ses": Ses,
    "croston": Croston,
    "holt_winters": HoltWinters,
    "auto_ets": AutoEts,
    "dot": DotTheta,
}


@dataclass
class LossTable:
    """Validation losses per (O&D, model); unavailable cells kept apart."""

    models: list[ModelId]
    losses: dict[ODKey, dict[ModelId, float]]
    unavailable: dict[ODKey, set[ModelId]]
    excluded: list[tuple[ODKey, str]] = field(default_factory=list)

    def scored_ods(self) -> list[ODKey]:
        return sorted(self.losses)


@dataclass
class ExpertAssignment:
    experts: dict[ODKey, ModelId]
    table: LossTable

    def validation_loss(self, od: ODKey) -> float:
        return self.table.losses[od][self.experts[od]]


def weekly_sums(daily: np.ndarray, days: list[date]) -> tuple[list[date], np.ndarray]:
    """Aggregate a daily vector into ISO weeks; returns (week Mondays, sums)."""
    if len(days) != daily.size:
        raise CargocastError("weekly_sums: days and values disagree")
    weeks: dict[date, float] = {}
    for d, v in zip(days, daily):
        key = week_start(d)
        weeks[key] = weeks.get(key, 0.0) + float(v)
    keys = sorted(weeks)
    return keys, np.array([weeks[k] for k in keys])


def score_pool(
    members: list[PoolMember],
    train_encoder: PanelEncoder,
    panel: PanelDataset,
    split: SplitSpec,
) -> LossTable:
    """Fit every member on the train window and score the validation window.

    Loss is the weekly nRMSE of the member's validation forecast for each
    O&D. O&Ds with zero actual validation demand are excluded entirely;
    a member that cannot serve an O&D is recorded as unavailable.
    """
    if train_encoder.fit_end != split.train_end:
        raise CargocastError("train encoder must end exactly at split.train_end")
    valid = split.valid_range()
    days = valid.days()
    horizon = len(valid)
    start = valid.start

    actual_encoder = PanelEncoder(panel, train_encoder.features, split.valid_end)
    lo = actual_encoder.day_index(valid.start)
    hi = actual_encoder.day_index(valid.end)

    for member in members:
        member.fit(train_encoder)

    model_ids = [m.model_id for m in members]
    if len(set(model_ids)) != len(model_ids):
        raise CargocastError("duplicate model ids in the pool")

    losses: dict[ODKey, dict[ModelId, float]] = {}
    unavailable: dict[ODKey, set[ModelId]] = {}
    excluded: list[tuple[ODKey, str]] = []
    for od in train_encoder.ods:
        actual_daily = actual_encoder.values[actual_encoder.od_index(od), lo : hi + 1]
        _, actual_weekly = weekly_sums(actual_daily, days)
        if actual_weekly.sum() == 0:
            excluded.append((od, "zero-mean OD"))
            continue
        losses[od] = {}
        unavailable[od] = set()
        for member in members:
            try:
                daily = member.forecast(od, start, horizon)
            except ModelUnavailableError:
                unavailable[od].add(member.model_id)
                continue
            _, pred_weekly = weekly_sums(daily, days)
            value = nrmse(SeriesPair(od=od, actual=actual_weekly, predicted=pred_weekly))
            if value is None or not np.isfinite(value):
                raise CargocastError(f"{member.model_id} produced an invalid loss for {od}")
            losses[od][member.model_id] = value
    return LossTable(
        models=priority_sorted(model_ids),
        losses=losses,
        unavailable=unavailable,
        excluded=excluded,
    )


def select_experts(table: LossTable) -> ExpertAssignment:
    """Eq.-style argmin per O&D with the fixed priority tie order."""
    experts: dict[ODKey, ModelId] = {}
    for od, losses in table.losses.items():
        if not losses:
            raise CargocastError(f"{od}: no available model to select")
        experts[od] = winner(losses, table.models)
    return ExpertAssignment(experts=experts, table=table)


def predict_moe(
    assignment: ExpertAssignment,
    members: list[PoolMember],
    full_encoder: PanelEncoder,
    test_range: DateRange,
) -> dict[tuple[ODKey, date], float]:
    """Route test-window prediction through each O&D's selected expert.

    Experts are refit on train+validation (the full encoder) on first
    use. When an expert fails at test time the next-best validated model
    takes over, with a log line recording the substitution.
    """
    by_id = {m.model_id: m for m in members}
    prepared: set[ModelId] = set()

    def member_for(model_id: ModelId) -> PoolMember:
        member = by_id[model_id]
        if model_id not in prepared:
            member.fit(full_encoder)
            prepared.add(model_id)
        return member

    days = test_range.days()
    horizon = len(test_range)
    out: dict[tuple[ODKey, date], float] = {}
    for od in sorted(assignment.experts):
        losses = assignment.table.losses[od]
        ranked = sorted(losses, key=lambda m: (losses[m], m.priority))
        served = False
        for model_id in ranked:
            try:
                daily = member_for(model_id).forecast(od, test_range.start, horizon)
            except (ModelUnavailableError, NonFiniteError) as exc:
                logger.warning("%s: expert %s failed at test time (%s)", od, model_id, exc)
                continue
            if model_id != assignment.experts[od]:
                logger.warning("%s: substituted %s for %s", od, model_id, assignment.experts[od])
            weeks, weekly = weekly_sums(daily, days)
            for wk, value in zip(weeks, weekly):
                out[(od, wk)] = value
            served = True
            break
        if not served:
            raise CargocastError(f"{od}: every model failed at test time")
    return out
