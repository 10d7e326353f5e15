"""Shared neural-model plumbing: config, sample batches, panel encoding.

Targets are scaled per O&D by the O&D's training-window mean before they
reach any network, so the squared-error training objective weighs small
and large markets alike. O&Ds with a zero training mean cannot be scaled
and are excluded from neural training and prediction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from datetime import date, timedelta

import numpy as np

from ..data import DateRange, ODKey, PanelDataset, regularize
from ..errors import CargocastError, ConfigError, ModelUnavailableError
from ..features import FeatureConfig, build_features

MODEL_KINDS = ("dnn_ladd", "nbeats", "tft")

N_DENSE = 3  # log-scale, zero fraction, coefficient of variation


def substream(seed: int, *parts) -> np.random.Generator:
    """Independent, named RNG substream derived from a master seed."""
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return np.random.default_rng((seed, int.from_bytes(digest, "big")))


@dataclass(frozen=True)
class NeuralConfig:
    hidden_dim: int = 64
    embed_dim: int = 8
    ladd_window: int = 7
    lookback: int = 84
    n_blocks: int = 2
    n_stacks: int = 2
    n_heads: int = 2
    dropout: float = 0.0
    lr: float = 1e-3
    epochs: int = 50
    batch: int = 64
    seed: int = 0
    horizon_chunk: int = 28
    max_batches_per_epoch: int | None = None

    def __post_init__(self):
        if min(self.hidden_dim, self.embed_dim, self.lookback, self.horizon_chunk) < 1:
            raise ConfigError("hidden_dim, embed_dim, lookback, horizon_chunk must be positive")
        if self.ladd_window < 0:
            raise ConfigError("ladd_window must be >= 0")
        if self.hidden_dim % self.n_heads != 0:
            raise ConfigError(
                f"n_heads ({self.n_heads}) must divide hidden_dim ({self.hidden_dim})"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    def with_seed(self, seed: int) -> "NeuralConfig":
        return replace(self, seed=seed)


@dataclass
class SampleBatch:
    """Model inputs for a batch of (O&D, anchor date) samples.

    Histories and labels are in per-O&D scaled units. Fields a given
    architecture does not consume stay None; labels are None at
    prediction time.
    """

    cats: np.ndarray  # [B, 4] int: origin, destination, month-1, weekday
    dense: np.ndarray  # [B, n_dense]
    ladd: np.ndarray | None = None  # [B, 2W+1, F]
    history: np.ndarray | None = None  # [B, L]
    past_feats: np.ndarray | None = None  # [B, L, F]
    future_feats: np.ndarray | None = None  # [B, H, F]
    labels: np.ndarray | None = None  # [B, 1]
    labels_h: np.ndarray | None = None  # [B, H]

    @property
    def size(self) -> int:
        return self.cats.shape[0]

    def take(self, idx: np.ndarray) -> "SampleBatch":
        pick = lambda a: None if a is None else a[idx]
        return SampleBatch(
            cats=self.cats[idx],
            dense=self.dense[idx],
            ladd=pick(self.ladd),
            history=pick(self.history),
            past_feats=pick(self.past_feats),
            future_feats=pick(self.future_feats),
            labels=pick(self.labels),
            labels_h=pick(self.labels_h),
        )


# Days of calendar-feature table kept before the panel start and after the
# fit end; bounds the usable LADD width and prediction horizon.
PAD_BEFORE = 31
PAD_AFTER = 420


class PanelEncoder:
    """Per-O&D series, scales, vocabularies, and a date-feature table for
    one fit window ending at `fit_end`.

    Values cover panel start through fit_end; calendar features extend
    PAD_AFTER days further so prediction batches for future dates can be
    assembled from the same table.
    """

    def __init__(self, panel: PanelDataset, feature_config: FeatureConfig, fit_end: date):
        if fit_end < panel.date_min:
            raise ConfigError("fit_end precedes the panel")
        self.panel = panel
        self.features = feature_config
        self.fit_end = min(fit_end, panel.date_max)
        self.start = panel.date_min
        self.n_days = (self.fit_end - self.start).days + 1

        self.stations = panel.stations()
        self._station_idx = {code: i for i, code in enumerate(self.stations)}
        self.ods = sorted(panel.ods())
        self._od_idx = {od: i for i, od in enumerate(self.ods)}

        window = DateRange(self.start, self.fit_end)
        values = np.zeros((len(self.ods), self.n_days))
        for i, od in enumerate(self.ods):
            values[i] = regularize(panel, od, window, feature_config).values
        self.values = values
        self.scales = values.mean(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            self.scaled = np.where(self.scales[:, None] > 0, values / self.scales[:, None], 0.0)
        self.dense = np.zeros((len(self.ods), N_DENSE))
        for i in range(len(self.ods)):
            if self.scales[i] > 0:
                self.dense[i] = [
                    np.log1p(self.scales[i]),
                    float(np.mean(values[i] == 0)),
                    float(np.std(values[i])) / self.scales[i],
                ]
            else:
                self.dense[i] = [0.0, 1.0, 0.0]

        table_days = [
            self.start + timedelta(days=k - PAD_BEFORE)
            for k in range(PAD_BEFORE + self.n_days + PAD_AFTER)
        ]
        self.feat_table = np.stack([build_features(d, feature_config) for d in table_days])
        self.month_table = np.array([d.month - 1 for d in table_days], dtype=np.int64)
        self.dow_table = np.array([d.weekday() for d in table_days], dtype=np.int64)
        self.cat_od = np.stack(
            [
                np.array([self._station_idx[od.origin] for od in self.ods], dtype=np.int64),
                np.array([self._station_idx[od.destination] for od in self.ods], dtype=np.int64),
            ],
            axis=1,
        )

    @property
    def n_stations(self) -> int:
        return len(self.stations)

    @property
    def n_features(self) -> int:
        return self.features.n_features

    def od_index(self, od: ODKey) -> int:
        if od not in self._od_idx:
            raise CargocastError(f"{od} not present in panel")
        return self._od_idx[od]

    def scale(self, od: ODKey) -> float:
        return float(self.scales[self.od_index(od)])

    def trainable_od_indices(self) -> np.ndarray:
        return np.flatnonzero(self.scales > 0)

    def day_index(self, d: date) -> int:
        return (d - self.start).days

    def date_of(self, index: int) -> date:
        return self.start + timedelta(days=index)

    def scaled_series(self, od: ODKey) -> np.ndarray:
        i = self.od_index(od)
        if self.scales[i] <= 0:
            raise ModelUnavailableError(f"{od}: zero training mean, cannot scale")
        return self.scaled[i]

    def _feat_rows(self, anchor_idx: np.ndarray, offsets: np.ndarray) -> np.ndarray:
        rows = anchor_idx[:, None] + offsets[None, :] + PAD_BEFORE
        if rows.min() < 0 or rows.max() >= self.feat_table.shape[0]:
            raise CargocastError("date outside the precomputed feature table")
        return self.feat_table[rows]

    def _cats(self, od_idx: np.ndarray, anchor_idx: np.ndarray) -> np.ndarray:
        t = anchor_idx + PAD_BEFORE
        return np.column_stack(
            [self.cat_od[od_idx, 0], self.cat_od[od_idx, 1], self.month_table[t], self.dow_table[t]]
        )

    def batch(
        self,
        kind: str,
        od_idx: np.ndarray,
        anchor_idx: np.ndarray,
        cfg: NeuralConfig,
        horizon: int,
        with_labels: bool,
        history_rows: np.ndarray | None = None,
    ) -> SampleBatch:
        """Assemble a SampleBatch for `kind` at (od, anchor) pairs.

        Anchor is the forecast-origin day index (0 = panel start). For the
        per-date architecture the anchor is the predicted day itself.
        `history_rows` overrides the stored scaled history (rolling
        prediction with model feedback).
        """
        if kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {kind!r}")
        od_idx = np.asarray(od_idx, dtype=np.int64)
        anchor_idx = np.asarray(anchor_idx, dtype=np.int64)
        w = cfg.ladd_window
        lookback = cfg.lookback
        cats = self._cats(od_idx, anchor_idx)
        dense = self.dense[od_idx]
        batch = SampleBatch(cats=cats, dense=dense)

        if kind in ("dnn_ladd", "nbeats"):
            batch.ladd = self._feat_rows(anchor_idx, np.arange(-w, w + 1))

        if kind == "dnn_ladd":
            if with_labels:
                if anchor_idx.min() < 0 or anchor_idx.max() >= self.n_days:
                    raise CargocastError("label day outside the fit window")
                batch.labels = self.scaled[od_idx, anchor_idx][:, None]
            return batch

        if history_rows is not None:
            batch.history = history_rows
        else:
            if anchor_idx.min() - lookback < 0:
                raise ModelUnavailableError(f"{lookback} lookback days unavailable")
            steps = anchor_idx[:, None] + np.arange(-lookback, 0)[None, :]
            batch.history = self.scaled[od_idx[:, None], steps]

        if kind == "tft":
            batch.past_feats = self._feat_rows(anchor_idx, np.arange(-lookback, 0))
            batch.future_feats = self._feat_rows(anchor_idx, np.arange(horizon))

        if with_labels:
            if anchor_idx.max() + horizon - 1 >= self.n_days:
                raise CargocastError("label window extends beyond the fit window")
            steps = anchor_idx[:, None] + np.arange(horizon)[None, :]
            batch.labels_h = self.scaled[od_idx[:, None], steps]
        return batch
