"""End-to-end backtest orchestration and report generation.

A run replays the deployment cycle on frozen chronology: train the pool
on the training window, score every model per O&D on the validation
window, select experts, forecast the test window through the experts, and
roll everything up into the three report tables plus machine-readable
artifacts. Reruns with the same config are byte-identical.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .data import (
    ClusterLabel,
    DateRange,
    ODKey,
    PanelDataset,
    SplitSpec,
    ingest_bookings,
    rank_clusters,
    significant_cluster,
    write_bookings,
)
from .errors import CargocastError, ConfigError
from .features import EventWindow, FeatureConfig
from .meta import MetaConfig
from .metrics import (
    MlWinRow,
    ModelRow,
    SeriesPair,
    cluster_report,
    ml_vs_baseline_winrate,
    nrmse,
    weighted_nrmse,
    win_ratios,
)
from .moe import (
    BENCHMARK_NAME,
    ML_NAMES,
    STAT_FACTORIES,
    STAT_NAMES,
    ExpertAssignment,
    LossTable,
    ModelId,
    NeuralMember,
    PoolMember,
    StatMember,
    predict_moe,
    score_pool,
    select_experts,
    weekly_sums,
)
from .neural.base import NeuralConfig, PanelEncoder
from .synthetic import SYNTHETIC_START, SyntheticConfig, generate_synthetic

logger = logging.getLogger(__name__)

REFERENCE_DAYS = 365  # revenue/weight ranking window: the year before validation

ARTIFACTS = ("config.json", "loss_table.csv", "assignment.csv", "forecasts_test.csv", "report.json", "report.txt")


@dataclass(frozen=True)
class RunConfig:
    data_csv: str | None
    synthetic: SyntheticConfig | None
    split: SplitSpec
    pool: tuple[dict, ...]
    meta: MetaConfig
    neural: NeuralConfig
    features: FeatureConfig
    horizon_weeks: int = 26
    significant_share: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if (self.data_csv is None) == (self.synthetic is None):
            raise ConfigError("config needs exactly one of a bookings CSV or a synthetic spec")
        if self.horizon_weeks < 1:
            raise ConfigError("horizon_weeks must be >= 1")
        if not 0 < self.significant_share <= 1:
            raise ConfigError("significant_share must be in (0, 1]")


def _parse_events(raw) -> tuple[EventWindow, ...]:
    return tuple(EventWindow(int(d), float(m), int(w)) for d, m, w in raw)


def parse_synthetic_config(raw: dict) -> SyntheticConfig:
    kwargs = dict(raw)
    if "event_spec" in kwargs:
        kwargs["event_spec"] = _parse_events(kwargs["event_spec"])
    return SyntheticConfig(**kwargs)


def parse_feature_config(raw: dict) -> FeatureConfig:
    kwargs = dict(raw)
    if "events" in kwargs:
        kwargs["events"] = _parse_events(kwargs["events"])
    return FeatureConfig(**kwargs)


def parse_run_config(raw: dict) -> RunConfig:
    data = raw.get("data")
    if not isinstance(data, dict) or not ({"csv", "synthetic"} & set(data)):
        raise ConfigError('config "data" must hold "csv" or "synthetic"')
    seed = int(raw.get("seed", 0))

    split_raw = raw.get("split")
    if not split_raw or "train_end" not in split_raw or "valid_end" not in split_raw:
        raise ConfigError('config "split" needs train_end and valid_end')
    train_end = date.fromisoformat(split_raw["train_end"])
    valid_end = date.fromisoformat(split_raw["valid_end"])
    horizon_weeks = int(raw.get("horizon_weeks", 26))
    if "test_end" in split_raw:
        test_end = date.fromisoformat(split_raw["test_end"])
    else:
        test_end = valid_end + timedelta(days=7 * horizon_weeks)
    split = SplitSpec(train_end=train_end, valid_end=valid_end, test_end=test_end)

    for entry in raw.get("pool", []):
        name = entry.get("name")
        if name not in STAT_FACTORIES and name not in ML_NAMES:
            raise ConfigError(f"unknown pool model {name!r}")

    neural_raw = dict(raw.get("neural", {}))
    neural_raw.setdefault("seed", seed)
    meta_raw = dict(raw.get("meta", {}))
    meta_raw.setdefault("seed", seed)

    return RunConfig(
        data_csv=data.get("csv"),
        synthetic=parse_synthetic_config(data["synthetic"]) if "synthetic" in data else None,
        split=split,
        pool=tuple(dict(entry) for entry in raw.get("pool", [])),
        meta=MetaConfig(**meta_raw),
        neural=NeuralConfig(**neural_raw),
        features=parse_feature_config(raw.get("features", {})),
        horizon_weeks=horizon_weeks,
        significant_share=float(raw.get("significant_share", 0.9)),
        seed=seed,
    )


def build_members(config: RunConfig) -> list[PoolMember]:
    if not config.pool:
        raise ConfigError("empty model pool")
    members: list[PoolMember] = []
    for entry in config.pool:
        name = entry.get("name")
        model_id = ModelId(name=name, meta=bool(entry.get("meta", False)))
        if name in STAT_FACTORIES:
            if model_id.meta:
                raise ConfigError(f"{name} has no meta variant")
            members.append(StatMember(model_id, STAT_FACTORIES[name]))
        elif name in ML_NAMES:
            overrides = dict(entry.get("neural", {}))
            overrides.setdefault("seed", config.neural.seed)
            base = {k: getattr(config.neural, k) for k in NeuralConfig.__dataclass_fields__}
            base.update(overrides)
            members.append(NeuralMember(model_id, NeuralConfig(**base), config.meta))
        else:
            raise ConfigError(f"unknown pool model {name!r}")
    ids = [m.model_id for m in members]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate models in pool")
    return members


def load_panel(config: RunConfig) -> PanelDataset:
    if config.synthetic is not None:
        return generate_synthetic(config.synthetic)
    return ingest_bookings(config.data_csv)


@dataclass
class BacktestResult:
    panel: PanelDataset
    split: SplitSpec
    labels: dict[ODKey, ClusterLabel]
    table: LossTable
    assignment: ExpertAssignment
    weights: dict[ODKey, float]
    report: dict
    out_dir: Path


def reference_window(split: SplitSpec) -> DateRange:
    return DateRange(split.train_end - timedelta(days=REFERENCE_DAYS - 1), split.train_end)


def run_backtest(config: RunConfig, out_dir: str | Path, config_echo: dict | None = None) -> BacktestResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    panel = load_panel(config)
    split = config.split
    if panel.date_max < split.test_end:
        raise ConfigError(
            f"panel ends {panel.date_max}, before the test window end {split.test_end}"
        )
    test_range = split.test_range()
    if len(test_range) != 7 * config.horizon_weeks:
        raise ConfigError(
            f"test window is {len(test_range)} days but horizon_weeks={config.horizon_weeks} "
            f"implies {7 * config.horizon_weeks}"
        )

    ref = reference_window(split)
    significant = significant_cluster(panel, ref, share=config.significant_share)
    labels = rank_clusters(panel, ref, share=config.significant_share)
    revenue_by_od = {od: rev for od, (_, rev) in panel.od_totals(ref).items()}

    logger.info("scoring pool on validation window %s..%s", split.train_end, split.valid_end)
    members = build_members(config)
    train_encoder = PanelEncoder(panel, config.features, split.train_end)
    table = score_pool(members, train_encoder, panel, split)
    assignment = select_experts(table)

    weights = validation_weights(panel, config.features, split)
    check_selection_optimality(assignment, weights)

    logger.info("forecasting test window %s..%s through experts", test_range.start, test_range.end)
    full_encoder = PanelEncoder(panel, config.features, split.valid_end)
    moe_weekly = predict_moe(assignment, members, full_encoder, test_range)
    benchmark_weekly = benchmark_forecast(members, full_encoder, table, test_range)

    actual_weekly = actual_weekly_sums(panel, config.features, test_range)
    test_moe, test_bench, test_weight = test_nrmse_tables(
        table.scored_ods(), actual_weekly, moe_weekly, benchmark_weekly
    )

    report = build_report(
        config, split, table, assignment, weights, labels, significant, revenue_by_od,
        test_moe, test_bench, test_weight,
    )

    write_artifacts(out_dir, config_echo or {}, table, assignment, actual_weekly, moe_weekly,
                    benchmark_weekly, report)
    return BacktestResult(
        panel=panel,
        split=split,
        labels=labels,
        table=table,
        assignment=assignment,
        weights=weights,
        report=report,
        out_dir=out_dir,
    )


def validation_weights(panel: PanelDataset, features: FeatureConfig, split: SplitSpec) -> dict[ODKey, float]:
    """Total actual weight per O&D over the validation window."""
    totals = panel.od_totals(split.valid_range())
    return {od: w for od, (w, _) in totals.items()}


def actual_weekly_sums(
    panel: PanelDataset, features: FeatureConfig, window: DateRange
) -> dict[tuple[ODKey, date], float]:
    encoder = PanelEncoder(panel, FeatureConfig(k_year=0, k_week=0), window.end)
    days = window.days()
    lo = encoder.day_index(window.start)
    out: dict[tuple[ODKey, date], float] = {}
    for od in encoder.ods:
        daily = encoder.values[encoder.od_index(od), lo : lo + len(days)]
        weeks, sums = weekly_sums(daily, days)
        for wk, v in zip(weeks, sums):
            out[(od, wk)] = v
    return out


def check_selection_optimality(assignment: ExpertAssignment, weights: dict[ODKey, float]) -> None:
    """Eq.-1 invariants: expert loss is the per-O&D minimum, and the blend
    cannot be beaten on any model's own availability set."""
    table = assignment.table
    for od, losses in table.losses.items():
        best = min(losses.values())
        if assignment.validation_loss(od) != best:
            raise CargocastError(f"{od}: expert loss differs from the minimum")
    moe = {od: assignment.validation_loss(od) for od in table.losses}
    for model in table.models:
        covered = {od for od, losses in table.losses.items() if model in losses}
        if not covered:
            continue
        model_losses = {od: table.losses[od][model] for od in covered}
        if weighted_nrmse(moe, weights, covered) > weighted_nrmse(model_losses, weights, covered):
            raise CargocastError(f"selection lost to {model} on its own O&D set")


def benchmark_forecast(
    members: list[PoolMember],
    full_encoder: PanelEncoder,
    table: LossTable,
    test_range: DateRange,
) -> dict[tuple[ODKey, date], float]:
    """Year-over-year forecasts for the test window (the industry
    comparison line), regardless of whether yoy sits in the pool."""
    bench = next((m for m in members if m.model_id == ModelId(BENCHMARK_NAME)), None)
    if bench is None:
        bench = StatMember(ModelId(BENCHMARK_NAME), STAT_FACTORIES[BENCHMARK_NAME])
    bench.fit(full_encoder)
    days = test_range.days()
    out: dict[tuple[ODKey, date], float] = {}
    for od in table.scored_ods():
        daily = bench.forecast(od, test_range.start, len(test_range))
        weeks, sums = weekly_sums(daily, days)
        for wk, v in zip(weeks, sums):
            out[(od, wk)] = v
    return out


def test_nrmse_tables(
    ods: list[ODKey],
    actual_weekly: dict[tuple[ODKey, date], float],
    moe_weekly: dict[tuple[ODKey, date], float],
    benchmark_weekly: dict[tuple[ODKey, date], float],
) -> tuple[dict[ODKey, float], dict[ODKey, float], dict[ODKey, float]]:
    """Per-O&D test nRMSE for the expert blend and the benchmark."""
    weeks_by_od: dict[ODKey, list[date]] = {}
    for od, wk in moe_weekly:
        weeks_by_od.setdefault(od, []).append(wk)
    moe_out, bench_out, weight_out = {}, {}, {}
    for od in ods:
        weeks = sorted(weeks_by_od.get(od, []))
        if not weeks:
            continue
        actual = np.array([actual_weekly.get((od, wk), 0.0) for wk in weeks])
        if actual.sum() == 0:
            continue
        moe_pred = np.array([moe_weekly[(od, wk)] for wk in weeks])
        bench_pred = np.array([benchmark_weekly[(od, wk)] for wk in weeks])
        moe_out[od] = nrmse(SeriesPair(od=od, actual=actual, predicted=moe_pred))
        bench_out[od] = nrmse(SeriesPair(od=od, actual=actual, predicted=bench_pred))
        weight_out[od] = float(actual.sum())
    return moe_out, bench_out, weight_out


CLUSTER_GROUPS = ("Significant cluster", "Top 100", "101-500", "501-1000", "Above 1001")


def _group_members(name: str, labels: dict[ODKey, ClusterLabel]) -> set[ODKey]:
    if name == "Significant cluster":
        return {od for od, lab in labels.items() if lab.in_significant_cluster}
    return {od for od, lab in labels.items() if lab.band.value == name}


def build_report(
    config: RunConfig,
    split: SplitSpec,
    table: LossTable,
    assignment: ExpertAssignment,
    weights: dict[ODKey, float],
    labels: dict[ODKey, ClusterLabel],
    significant: set[ODKey],
    revenue_by_od: dict[ODKey, float],
    test_moe: dict[ODKey, float],
    test_bench: dict[ODKey, float],
    test_weight: dict[ODKey, float],
) -> dict:
    scored = set(table.losses)
    moe_losses = {od: assignment.validation_loss(od) for od in table.losses}

    ratios = win_ratios(table.losses, table.models, ods=significant & scored)
    model_rows: list[ModelRow] = []
    for model in table.models:
        covered = {od for od, losses in table.losses.items() if model in losses}
        model_losses = {od: table.losses[od][model] for od in covered}
        model_rows.append(
            ModelRow(
                model=str(model),
                model_type=model.model_type,
                win_ratio=ratios[model],
                mean_nrmse=float(np.mean([model_losses[od] for od in sorted(covered)])),
                wnrmse=weighted_nrmse(model_losses, weights, covered),
            )
        )
    model_rows.sort(key=lambda r: (-r.win_ratio, r.model))
    moe_row = ModelRow(
        model="moe",
        model_type="MoE",
        win_ratio=float("nan"),
        mean_nrmse=float(np.mean([moe_losses[od] for od in sorted(scored)])),
        wnrmse=weighted_nrmse(moe_losses, weights, scored),
    )

    cluster_rows = cluster_report(moe_losses, weights, labels, revenue_by_od)

    ml_ids = {m for m in table.models if m.name in ML_NAMES}
    stat_ids = {m for m in table.models if m.name in STAT_NAMES}
    bench_ids = {m for m in table.models if m.name == BENCHMARK_NAME}
    ml_rows: list[MlWinRow] = []
    for group in CLUSTER_GROUPS:
        members_set = _group_members(group, labels) & scored
        vs_stat = vs_bench = float("nan")
        if members_set and ml_ids and stat_ids:
            vs_stat = ml_vs_baseline_winrate(table.losses, ml_ids, stat_ids, members_set)
        if members_set and ml_ids and bench_ids:
            vs_bench = ml_vs_baseline_winrate(table.losses, ml_ids, bench_ids, members_set)
        ml_rows.append(MlWinRow(name=group, vs_statistical=vs_stat, vs_benchmark=vs_bench))

    test_cluster = significant & set(test_moe)
    if test_cluster:
        moe_wins = sum(1 for od in test_cluster if test_moe[od] < test_bench[od])
        moe_vs_bench = moe_wins / len(test_cluster)
    else:
        moe_vs_bench = float("nan")

    def row_dict(row) -> dict:
        return {k: _json_value(v) for k, v in vars(row).items()}

    return {
        "seed": config.seed,
        "split": {
            "train_end": split.train_end.isoformat(),
            "valid_end": split.valid_end.isoformat(),
            "test_end": split.test_end.isoformat(),
        },
        "n_ods": len(labels),
        "n_scored_ods": len(scored),
        "excluded": [[str(od), reason] for od, reason in table.excluded],
        "model_table": [row_dict(r) for r in model_rows + [moe_row]],
        "cluster_table": [row_dict(r) for r in cluster_rows],
        "ml_table": [row_dict(r) for r in ml_rows],
        "significant_cluster_size": len(significant),
        "win_ratio_total": _json_value(sum(ratios.values())),
        "moe_vs_benchmark_test_winrate": _json_value(moe_vs_bench),
        "test_scored_ods": len(test_moe),
        "test_moe_wnrmse": _json_value(
            weighted_nrmse(test_moe, test_weight) if test_moe else float("nan")
        ),
        "test_benchmark_wnrmse": _json_value(
            weighted_nrmse(test_bench, test_weight) if test_bench else float("nan")
        ),
        "selection_optimality_checked": True,
    }


def _json_value(v):
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


# ---------------------------------------------------------------------------
# Artifact files
# ---------------------------------------------------------------------------


def write_artifacts(
    out_dir: Path,
    config_echo: dict,
    table: LossTable,
    assignment: ExpertAssignment,
    actual_weekly: dict,
    moe_weekly: dict,
    benchmark_weekly: dict,
    report: dict,
) -> None:
    (out_dir / "config.json").write_text(json.dumps(config_echo, indent=2, sort_keys=True) + "\n")

    with (out_dir / "loss_table.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["origin", "destination", "model_id", "loss"])
        for od in table.scored_ods():
            for model in table.models:
                if model in table.losses[od]:
                    value = repr(table.losses[od][model])
                elif model in table.unavailable.get(od, set()):
                    value = "unavailable"
                else:
                    continue
                writer.writerow([od.origin, od.destination, str(model), value])

    with (out_dir / "assignment.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["origin", "destination", "model_id", "validation_loss"])
        for od in sorted(assignment.experts):
            writer.writerow(
                [od.origin, od.destination, str(assignment.experts[od]), repr(assignment.validation_loss(od))]
            )

    with (out_dir / "forecasts_test.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["origin", "destination", "week_start", "actual", "moe", "benchmark"])
        for od, wk in sorted(moe_weekly):
            writer.writerow(
                [
                    od.origin,
                    od.destination,
                    wk.isoformat(),
                    repr(actual_weekly.get((od, wk), 0.0)),
                    repr(moe_weekly[(od, wk)]),
                    repr(benchmark_weekly.get((od, wk), 0.0)),
                ]
            )

    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out_dir / "report.txt").write_text(render_report(report))


def _fmt(value, width=10, digits=3) -> str:
    if value is None or (isinstance(value, float) and not np.isfinite(value)):
        return "-".rjust(width)
    if isinstance(value, float):
        return f"{value:.{digits}f}".rjust(width)
    return str(value).rjust(width)


def render_report(report: dict) -> str:
    lines: list[str] = []
    lines.append("Model performance and win ratio on significant cluster")
    lines.append(f"{'Model Name':<18}{'Model Type':<12}{'Win ratio':>10}{'nRMSE':>10}{'WnRMSE':>10}")
    for row in report["model_table"]:
        lines.append(
            f"{row['model']:<18}{row['model_type']:<12}"
            f"{_fmt(row['win_ratio'])}{_fmt(row['mean_nrmse'])}{_fmt(row['wnrmse'])}"
        )
    lines.append("")
    lines.append("Aggregated metrics for clustered O&Ds")
    lines.append(f"{'O&Ds':<22}{'Sample Size':>12}{'Share of Revenue':>18}{'nRMSE':>10}{'WnRMSE':>10}")
    for row in report["cluster_table"]:
        lines.append(
            f"{row['name']:<22}{row['sample_size']:>12}"
            f"{_fmt(row['revenue_share'], width=18)}{_fmt(row['mean_nrmse'])}{_fmt(row['wnrmse'])}"
        )
    lines.append("")
    lines.append("Win ratios of ML models for clustered O&Ds")
    lines.append(f"{'O&Ds':<22}{'Statistical baseline':>22}{'Industry benchmark':>20}")
    for row in report["ml_table"]:
        lines.append(
            f"{row['name']:<22}{_fmt(row['vs_statistical'], width=22)}{_fmt(row['vs_benchmark'], width=20)}"
        )
    lines.append("")
    lines.append(
        f"Expert blend vs industry benchmark on test window: "
        f"win rate {_fmt(report['moe_vs_benchmark_test_winrate'], width=8)} over "
        f"{report['test_scored_ods']} scored O&Ds"
    )
    return "\n".join(lines) + "\n"


def cmd_report_text(run_dir: str | Path) -> str:
    run_dir = Path(run_dir)
    for name in ARTIFACTS:
        if not (run_dir / name).exists():
            raise CargocastError(f"run directory missing artifact {name}")
    report = json.loads((run_dir / "report.json").read_text())
    return render_report(report)


def generate_csv(synthetic: SyntheticConfig, out_path: str | Path) -> None:
    panel = generate_synthetic(synthetic)
    write_bookings(panel, out_path)


# ---------------------------------------------------------------------------
# Default desk-scale experiment
# ---------------------------------------------------------------------------


def default_run_config(seed: int = 2024) -> dict:
    """The standard desk-scale backtest: 200 synthetic O&Ds, three years of
    daily history, 26-week validation and test windows (all week-aligned)."""
    train_weeks = 156
    train_end = SYNTHETIC_START + timedelta(days=train_weeks * 7 - 1)
    valid_end = train_end + timedelta(days=26 * 7)
    test_end = valid_end + timedelta(days=26 * 7)
    n_days = (test_end - SYNTHETIC_START).days + 1
    return {
        "seed": seed,
        "data": {
            "synthetic": {
                "n_ods": 200,
                "n_days": n_days,
                "base_level_spread": 1.2,
                "weekly_amp": 0.4,
                "yearly_amp": 0.25,
                "event_spec": [[45, 1.8, 4], [328, 1.5, 3]],
                "zero_inflation_tail": 0.15,
                "noise_cv": 0.35,
                "seed": seed,
            }
        },
        "split": {
            "train_end": train_end.isoformat(),
            "valid_end": valid_end.isoformat(),
            "test_end": test_end.isoformat(),
        },
        "features": {"k_year": 2, "k_week": 2, "events": [[45, 1.8, 4], [328, 1.5, 3]]},
        "pool": (
            [{"name": name} for name in sorted(STAT_NAMES | {BENCHMARK_NAME})]
            + [
                {"name": "dnn_ladd"},
                {"name": "nbeats"},
                {"name": "tft", "neural": {"lookback": 56, "epochs": 2, "max_batches_per_epoch": 200}},
                {"name": "dnn_ladd", "meta": True},
            ]
        ),
        "neural": {
            "hidden_dim": 32,
            "embed_dim": 4,
            "ladd_window": 5,
            "lookback": 84,
            "epochs": 3,
            "batch": 128,
            "lr": 3e-3,
            "max_batches_per_epoch": 250,
        },
        "meta": {
            "inner_lr": 0.05,
            "outer_lr": 1e-3,
            "inner_steps": 2,
            "meta_batch": 4,
            "meta_iters": 40,
            "finetune_steps": 5,
        },
        "horizon_weeks": 26,
        "significant_share": 0.9,
    }
