"""Panel data model: O&D demand records, daily series, splits, clusters.

The panel is a set of (O&D, departure date) records of shipped weight and
revenue. Everything downstream consumes either the immutable
:class:`PanelDataset` or a per-O&D regularized daily series
(:class:`ODSeries`) derived from it.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from datetime import date, timedelta
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import CargocastError, IngestError, UnknownODError
from .features import FeatureConfig, feature_matrix

_STATION_RE = re.compile(r"^[A-Z]{3}$")

CSV_HEADER = ["origin", "destination", "departure_date", "weight_kg", "revenue"]


@dataclass(frozen=True, order=True)
class ODKey:
    """Ordered origin/destination station pair, e.g. AMS -> JFK."""

    origin: str
    destination: str

    def __post_init__(self):
        for code in (self.origin, self.destination):
            if not _STATION_RE.match(code):
                raise CargocastError(f"station code {code!r} must match [A-Z]{{3}}")
        if self.origin == self.destination:
            raise CargocastError(f"origin equals destination: {self.origin}")

    def __str__(self) -> str:
        return f"{self.origin}-{self.destination}"


@dataclass(frozen=True)
class DemandRecord:
    """Shipped weight and revenue for one O&D on one departure date."""

    od: ODKey
    departure_date: date
    weight_kg: float
    revenue: float

    def __post_init__(self):
        if not (np.isfinite(self.weight_kg) and self.weight_kg >= 0):
            raise CargocastError(f"weight_kg must be finite and >= 0, got {self.weight_kg}")
        if not (np.isfinite(self.revenue) and self.revenue >= 0):
            raise CargocastError(f"revenue must be finite and >= 0, got {self.revenue}")


@dataclass(frozen=True)
class DateRange:
    """Inclusive calendar interval [start, end]."""

    start: date
    end: date

    def __post_init__(self):
        if self.start > self.end:
            raise CargocastError(f"empty date range {self.start}..{self.end}")

    def __len__(self) -> int:
        return (self.end - self.start).days + 1

    def __contains__(self, d: date) -> bool:
        return self.start <= d <= self.end

    def days(self) -> list[date]:
        return [self.start + timedelta(days=i) for i in range(len(self))]


class PanelDataset:
    """Immutable collection of demand records with at most one per (od, date)."""

    def __init__(self, records: list[DemandRecord]):
        if not records:
            raise CargocastError("cannot build an empty PanelDataset")
        seen: dict[tuple[ODKey, date], DemandRecord] = {}
        for rec in records:
            key = (rec.od, rec.departure_date)
            if key in seen:
                raise CargocastError(f"duplicate record for {rec.od} on {rec.departure_date}")
            seen[key] = rec
        self._records = tuple(sorted(seen.values(), key=lambda r: (r.od, r.departure_date)))
        self._by_od: dict[ODKey, tuple[DemandRecord, ...]] = {}
        bucket: dict[ODKey, list[DemandRecord]] = {}
        for rec in self._records:
            bucket.setdefault(rec.od, []).append(rec)
        self._by_od = {od: tuple(rs) for od, rs in bucket.items()}
        self.date_min = min(r.departure_date for r in self._records)
        self.date_max = max(r.departure_date for r in self._records)

    @property
    def records(self) -> tuple[DemandRecord, ...]:
        return self._records

    def ods(self) -> list[ODKey]:
        return sorted(self._by_od)

    def stations(self) -> list[str]:
        codes = {od.origin for od in self._by_od} | {od.destination for od in self._by_od}
        return sorted(codes)

    def records_for(self, od: ODKey) -> tuple[DemandRecord, ...]:
        if od not in self._by_od:
            raise UnknownODError(f"{od} not present in dataset")
        return self._by_od[od]

    def __contains__(self, od: ODKey) -> bool:
        return od in self._by_od

    def od_totals(self, window: DateRange) -> dict[ODKey, tuple[float, float]]:
        """Per-OD (weight, revenue) totals inside ``window``. ODs with no
        records in the window appear with zero totals."""
        totals = {od: (0.0, 0.0) for od in self._by_od}
        for rec in self._records:
            if rec.departure_date in window:
                w, r = totals[rec.od]
                totals[rec.od] = (w + rec.weight_kg, r + rec.revenue)
        return totals


@dataclass(frozen=True)
class ODSeries:
    """One O&D's gap-free daily weight series with per-day feature rows.

    Days without a booking record are true zeros (no shipment), not
    missing observations.
    """

    od: ODKey
    start_date: date
    values: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 1:
            raise CargocastError("values must be a 1-d vector")
        if self.features.shape[0] != self.values.shape[0]:
            raise CargocastError(
                f"features rows ({self.features.shape[0]}) != values length ({self.values.shape[0]})"
            )

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def end_date(self) -> date:
        return self.start_date + timedelta(days=len(self) - 1)

    def date_index(self, d: date) -> int:
        idx = (d - self.start_date).days
        if not 0 <= idx < len(self):
            raise CargocastError(f"{d} outside series range of {self.od}")
        return idx

    def slice_values(self, rng: DateRange) -> np.ndarray:
        lo = self.date_index(rng.start)
        hi = self.date_index(rng.end)
        return self.values[lo : hi + 1]


@dataclass(frozen=True)
class SplitSpec:
    """Chronological train/validation/test boundaries (all inclusive ends)."""

    train_end: date
    valid_end: date
    test_end: date

    def __post_init__(self):
        if not (self.train_end < self.valid_end <= self.test_end):
            raise CargocastError(
                f"need train_end < valid_end <= test_end, got "
                f"{self.train_end}, {self.valid_end}, {self.test_end}"
            )

    def valid_range(self) -> DateRange:
        return DateRange(self.train_end + timedelta(days=1), self.valid_end)

    def test_range(self) -> DateRange:
        if self.valid_end == self.test_end:
            raise CargocastError("split has no test window")
        return DateRange(self.valid_end + timedelta(days=1), self.test_end)


class ClusterBand(Enum):
    """Rank bands over the weight-sorted O&D list."""

    TOP100 = "Top 100"
    R101_500 = "101-500"
    R501_1000 = "501-1000"
    ABOVE_1001 = "Above 1001"


@dataclass(frozen=True)
class ClusterLabel:
    band: ClusterBand
    in_significant_cluster: bool


def ingest_bookings(path: str | Path) -> PanelDataset:
    """Read a bookings CSV into a PanelDataset.

    Duplicate (od, date) rows are merged additively. Row numbers in errors
    are 1-based over data rows (the header is row 0).
    """
    path = Path(path)
    merged: dict[tuple[ODKey, date], tuple[float, float]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        if [h.strip() for h in header] != CSV_HEADER:
            raise IngestError(f"{path}: bad header {header!r}, expected {CSV_HEADER}")
        n_rows = 0
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            n_rows += 1
            if len(row) != 5:
                raise IngestError(f"expected 5 fields, got {len(row)}", row=row_no)
            origin, dest, date_str, weight_str, revenue_str = (c.strip() for c in row)
            try:
                od = ODKey(origin, dest)
            except CargocastError as exc:
                raise IngestError(str(exc), row=row_no) from None
            try:
                dep = date.fromisoformat(date_str)
            except ValueError:
                raise IngestError(f"bad date {date_str!r}", row=row_no) from None
            try:
                weight = float(weight_str)
                revenue = float(revenue_str)
            except ValueError:
                raise IngestError(f"bad numeric field in {row!r}", row=row_no) from None
            if not np.isfinite(weight) or weight < 0:
                raise IngestError(f"negative or non-finite weight {weight_str}", row=row_no)
            if not np.isfinite(revenue) or revenue < 0:
                raise IngestError(f"negative or non-finite revenue {revenue_str}", row=row_no)
            key = (od, dep)
            w, r = merged.get(key, (0.0, 0.0))
            merged[key] = (w + weight, r + revenue)
    if n_rows == 0:
        raise IngestError(f"{path}: no data rows")
    records = [
        DemandRecord(od=k[0], departure_date=k[1], weight_kg=w, revenue=r)
        for k, (w, r) in merged.items()
    ]
    return PanelDataset(records)


def write_bookings(ds: PanelDataset, path: str | Path) -> None:
    """Write a PanelDataset back to the bookings CSV schema."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for rec in ds.records:
            writer.writerow(
                [
                    rec.od.origin,
                    rec.od.destination,
                    rec.departure_date.isoformat(),
                    repr(rec.weight_kg),
                    repr(rec.revenue),
                ]
            )


def regularize(
    ds: PanelDataset,
    od: ODKey,
    rng: DateRange,
    feature_config: FeatureConfig | None = None,
) -> ODSeries:
    """Zero-filled daily series for one O&D over ``rng``, with features.

    Raises UnknownODError for an absent O&D (distinct from a series that
    exists but is all zero).
    """
    records = ds.records_for(od)
    if rng.start < ds.date_min or rng.end > ds.date_max:
        raise CargocastError(
            f"range {rng.start}..{rng.end} outside dataset bounds "
            f"{ds.date_min}..{ds.date_max}"
        )
    values = np.zeros(len(rng))
    for rec in records:
        offset = (rec.departure_date - rng.start).days
        if 0 <= offset < len(rng):
            values[offset] = rec.weight_kg
    fc = feature_config or FeatureConfig()
    feats = feature_matrix(rng.days(), fc)
    return ODSeries(od=od, start_date=rng.start, values=values, features=feats)


def significant_cluster(
    ds: PanelDataset, reference_window: DateRange, share: float = 0.9
) -> set[ODKey]:
    """Smallest prefix of revenue-ranked O&Ds covering ``share`` of revenue.

    Ranking is by descending revenue inside the reference window; revenue
    ties break lexicographically by O&D key.
    """
    if not 0 < share <= 1:
        raise CargocastError(f"share must be in (0, 1], got {share}")
    totals = ds.od_totals(reference_window)
    total_revenue = sum(r for _, r in totals.values())
    if total_revenue <= 0:
        raise CargocastError("zero total revenue in reference window")
    # Zero-revenue ODs can never be part of the smallest covering prefix.
    ranked = sorted(
        ((od, rev) for od, (_, rev) in totals.items() if rev > 0),
        key=lambda kv: (-kv[1], kv[0]),
    )
    cluster: set[ODKey] = set()
    cum = 0.0
    for od, revenue in ranked:
        if cum >= share * total_revenue:
            break
        cluster.add(od)
        cum += revenue
    return cluster


def rank_clusters(
    ds: PanelDataset, reference_window: DateRange, share: float = 0.9
) -> dict[ODKey, ClusterLabel]:
    """Label every O&D with its weight-rank band and significance flag.

    Bands follow the ranked list: 1-100, 101-500, 501-1000, above 1001.
    Weight ties break lexicographically by key.
    """
    totals = ds.od_totals(reference_window)
    significant = significant_cluster(ds, reference_window, share=share)
    ranked = sorted(totals.items(), key=lambda kv: (-kv[1][0], kv[0]))
    labels: dict[ODKey, ClusterLabel] = {}
    for rank, (od, _) in enumerate(ranked, start=1):
        if rank <= 100:
            band = ClusterBand.TOP100
        elif rank <= 500:
            band = ClusterBand.R101_500
        elif rank <= 1000:
            band = ClusterBand.R501_1000
        else:
            band = ClusterBand.ABOVE_1001
        labels[od] = ClusterLabel(band=band, in_significant_cluster=od in significant)
    return labels


def week_start(d: date) -> date:
    """Monday of the ISO week containing ``d``."""
    return d - timedelta(days=d.weekday())


def weekly_aggregate(daily: dict[tuple[ODKey, date], float]) -> dict[tuple[ODKey, date], float]:
    """Sum daily values into ISO weeks keyed by each week's Monday."""
    weekly: dict[tuple[ODKey, date], float] = {}
    for (od, d), value in daily.items():
        key = (od, week_start(d))
        weekly[key] = weekly.get(key, 0.0) + value
    return weekly
