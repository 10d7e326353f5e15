"""Forecast-accuracy metrics: RMSE, nRMSE, weighted nRMSE, win ratios.

Per-O&D errors are normalized by the O&D's mean actual so that O&Ds of
very different sizes are comparable; the network-wide figure weights each
O&D by its share of total shipped weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence, TypeVar

import numpy as np

from .data import ClusterBand, ClusterLabel, ODKey
from .errors import CargocastError

M = TypeVar("M", bound=Hashable)

ZERO_MEAN_REASON = "zero-mean OD"


@dataclass(frozen=True)
class SeriesPair:
    """Aligned weekly actual/predicted vectors for one O&D."""

    od: ODKey
    actual: np.ndarray
    predicted: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.actual, dtype=np.float64)
        p = np.asarray(self.predicted, dtype=np.float64)
        object.__setattr__(self, "actual", a)
        object.__setattr__(self, "predicted", p)
        if a.shape != p.shape or a.ndim != 1 or a.size < 1:
            raise CargocastError(
                f"{self.od}: actual {a.shape} and predicted {p.shape} must be equal-length vectors"
            )
        if np.any(a < 0):
            raise CargocastError(f"{self.od}: actuals must be non-negative")


def rmse(pair: SeriesPair) -> float:
    return float(np.sqrt(np.mean((pair.actual - pair.predicted) ** 2)))


def nrmse(pair: SeriesPair) -> float | None:
    """RMSE over mean actual; None when the mean is zero (excluded O&D)."""
    mean = float(np.mean(pair.actual))
    if mean == 0.0:
        return None
    return rmse(pair) / mean


def wnrmse(pairs: Iterable[SeriesPair]) -> float:
    """Weight-share-weighted mean of per-O&D nRMSE.

    Weights are each O&D's share of total actual weight, renormalized over
    the O&Ds that are not excluded for a zero mean.
    """
    weights: list[float] = []
    errors: list[float] = []
    for pair in pairs:
        value = nrmse(pair)
        if value is None:
            continue
        weights.append(float(np.sum(pair.actual)))
        errors.append(value)
    if not weights:
        raise CargocastError("all O&Ds excluded: cannot compute weighted nRMSE")
    w = np.asarray(weights)
    return float(np.sum(w / w.sum() * np.asarray(errors)))


def winner(
    losses: dict[M, float], model_order: Sequence[M]
) -> M:
    """Argmin over available models; exact ties go to the earliest model in
    ``model_order`` (the fixed priority list)."""
    if not losses:
        raise CargocastError("no available models to pick a winner from")
    rank = {m: i for i, m in enumerate(model_order)}
    return min(losses, key=lambda m: (losses[m], rank[m]))


def win_ratios(
    loss_table: dict[ODKey, dict[M, float]],
    model_order: Sequence[M],
    ods: set[ODKey] | None = None,
) -> dict[M, float]:
    """Fraction of O&Ds each model wins (lowest loss, fixed tie order).

    Restricted to ``ods`` when given (typically the significant cluster).
    Ratios are over all models in ``model_order`` and sum to 1.
    """
    counts = {m: 0 for m in model_order}
    total = 0
    for od, losses in loss_table.items():
        if ods is not None and od not in ods:
            continue
        if not losses:
            continue
        counts[winner(losses, model_order)] += 1
        total += 1
    if total == 0:
        raise CargocastError("no scored O&Ds for win ratios")
    return {m: counts[m] / total for m in model_order}


def ml_vs_baseline_winrate(
    loss_table: dict[ODKey, dict[M, float]],
    ml_models: set[M],
    baseline_models: set[M],
    ods: set[ODKey],
) -> float:
    """Share of O&Ds where the best ML loss strictly beats the best
    baseline loss. Ties and missing ML forecasts count for the baseline."""
    if not ml_models or not baseline_models:
        raise CargocastError("both model sets must be non-empty")
    wins = 0
    total = 0
    for od in ods:
        losses = loss_table.get(od)
        if not losses:
            continue
        ml_best = min((losses[m] for m in ml_models if m in losses), default=np.inf)
        base_best = min((losses[m] for m in baseline_models if m in losses), default=np.inf)
        total += 1
        if ml_best < base_best:
            wins += 1
    if total == 0:
        raise CargocastError("no scored O&Ds in the requested set")
    return wins / total


def weighted_nrmse(
    nrmse_by_od: dict[ODKey, float],
    weight_by_od: dict[ODKey, float],
    ods: set[ODKey] | None = None,
) -> float:
    """WnRMSE from already-computed per-O&D errors and weight totals."""
    keys = sorted(nrmse_by_od if ods is None else (set(nrmse_by_od) & ods))
    if not keys:
        raise CargocastError("no O&Ds to aggregate")
    w = np.array([weight_by_od[od] for od in keys])
    if w.sum() <= 0:
        raise CargocastError("zero total weight in weighted nRMSE")
    e = np.array([nrmse_by_od[od] for od in keys])
    return float(np.sum(w / w.sum() * e))


@dataclass(frozen=True)
class ClusterRow:
    """One row of the clustered-O&D rollup."""

    name: str
    sample_size: int
    revenue_share: float
    mean_nrmse: float
    wnrmse: float


def cluster_report(
    nrmse_by_od: dict[ODKey, float],
    weight_by_od: dict[ODKey, float],
    labels: dict[ODKey, ClusterLabel],
    revenue_by_od: dict[ODKey, float],
) -> list[ClusterRow]:
    """Rollup rows: the significant cluster first, then the four rank bands.

    Revenue shares are over the same reference window used for clustering,
    so the four band shares partition the total exactly. Cluster WnRMSE
    renormalizes weights within the cluster's scored O&Ds.
    """
    missing = set(nrmse_by_od) - set(labels)
    if missing:
        raise CargocastError(f"{len(missing)} scored O&Ds lack cluster labels")
    total_revenue = sum(revenue_by_od.values())
    if total_revenue <= 0:
        raise CargocastError("zero total revenue in cluster report")

    groups: list[tuple[str, set[ODKey]]] = [
        ("Significant cluster", {od for od, lab in labels.items() if lab.in_significant_cluster})
    ]
    for band in ClusterBand:
        groups.append((band.value, {od for od, lab in labels.items() if lab.band is band}))

    rows: list[ClusterRow] = []
    for name, members in groups:
        scored = sorted(set(nrmse_by_od) & members)
        revenue = sum(revenue_by_od.get(od, 0.0) for od in members)
        rows.append(
            ClusterRow(
                name=name,
                sample_size=len(members),
                revenue_share=revenue / total_revenue,
                mean_nrmse=float(np.mean([nrmse_by_od[od] for od in scored])) if scored else float("nan"),
                wnrmse=weighted_nrmse(nrmse_by_od, weight_by_od, members) if scored else float("nan"),
            )
        )
    return rows


@dataclass(frozen=True)
class ModelRow:
    """One row of the model-performance table."""

    model: str
    model_type: str
    win_ratio: float
    mean_nrmse: float
    wnrmse: float


@dataclass(frozen=True)
class MlWinRow:
    """ML win ratios against the statistical suite and the yoy benchmark."""

    name: str
    vs_statistical: float
    vs_benchmark: float


@dataclass
class EvaluationReport:
    """Everything the reporting layer needs, in table-shaped pieces."""

    model_rows: list[ModelRow]
    cluster_rows: list[ClusterRow]
    ml_win_rows: list[MlWinRow]
    excluded: list[tuple[ODKey, str]] = field(default_factory=list)
