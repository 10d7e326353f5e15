"""Calendar feature engineering: harmonic encodings and event flags.

Every feature is a pure function of the calendar date, so the same vectors
can be built for past and future dates alike.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

YEAR_PERIOD = 365.25
WEEK_PERIOD = 7.0


@dataclass(frozen=True)
class EventWindow:
    """A recurring calendar event: active within +-half_width days of doy."""

    day_of_year: int
    multiplier: float
    half_width: int

    def __post_init__(self):
        if self.multiplier <= 0:
            raise ValueError(f"event multiplier must be > 0, got {self.multiplier}")
        if self.half_width < 0:
            raise ValueError(f"event half_width must be >= 0, got {self.half_width}")

    def active(self, doy: int) -> bool:
        return abs(doy - self.day_of_year) <= self.half_width


@dataclass(frozen=True)
class FeatureConfig:
    """Harmonic orders and event list for date feature vectors.

    k_year yearly harmonics, k_week weekly harmonics, one 0/1 proximity
    flag per event. Defaults keep the feature count small.
    """

    k_year: int = 3
    k_week: int = 2
    events: tuple[EventWindow, ...] = ()

    def __post_init__(self):
        if self.k_year < 0 or self.k_week < 0:
            raise ValueError("harmonic orders must be >= 0")

    @property
    def n_features(self) -> int:
        return 2 * self.k_year + 2 * self.k_week + len(self.events)


def build_features(d: date, config: FeatureConfig) -> np.ndarray:
    """Feature vector for one date: yearly + weekly harmonics + event flags.

    Day-of-year is 1-based; day-of-week has Monday = 0.
    """
    doy = d.timetuple().tm_yday
    dow = d.weekday()
    parts: list[float] = []
    for k in range(1, config.k_year + 1):
        angle = 2.0 * np.pi * k * doy / YEAR_PERIOD
        parts.append(np.sin(angle))
        parts.append(np.cos(angle))
    for k in range(1, config.k_week + 1):
        angle = 2.0 * np.pi * k * dow / WEEK_PERIOD
        parts.append(np.sin(angle))
        parts.append(np.cos(angle))
    for event in config.events:
        parts.append(1.0 if event.active(doy) else 0.0)
    return np.asarray(parts, dtype=np.float64)


def feature_matrix(days: list[date], config: FeatureConfig) -> np.ndarray:
    """Stack build_features rows for a list of dates."""
    if not days:
        return np.zeros((0, config.n_features))
    return np.stack([build_features(d, config) for d in days])


def ladd_window(d: date, w: int, config: FeatureConfig) -> np.ndarray:
    """Feature rows for the symmetric window [d-w, d+w], in calendar order.

    Shape is [2w+1, n_features]; the middle row is build_features(d).
    """
    if w < 0:
        raise ValueError(f"window half-width must be >= 0, got {w}")
    days = [d + timedelta(days=offset) for offset in range(-w, w + 1)]
    return feature_matrix(days, config)
