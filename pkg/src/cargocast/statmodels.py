"""Statistical baseline forecasters and the year-over-year benchmark.

All models satisfy the same contract: ``fit_values`` on a daily training
slice, then ``predict(horizon)`` for a horizon-length non-negative daily
forecast. ``predict_raw`` skips the non-negativity clamp so the linear
equivariance properties of the recursions stay directly testable.

Smoothing parameters are optimized by golden-section or coordinate grid
search on in-sample one-step squared error; this keeps the statistical
suite free of any dependence on the autodiff stack.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod

import numpy as np
from scipy.signal import lfilter

from .data import DateRange, ODSeries
from .errors import CargocastError, InsufficientHistoryError

ALPHA_LO, ALPHA_HI = 0.01, 0.99
GRID_21 = np.linspace(0.0, 1.0, 21)
THETA_GRID = np.arange(1.0, 10.0 + 1e-9, 0.5)

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section(f, lo: float, hi: float, tol: float = 1e-6) -> tuple[float, float]:
    """Deterministic golden-section minimizer on [lo, hi]."""
    a, b = lo, hi
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = f(x1), f(x2)
    while b - a > tol:
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = f(x2)
    return (x1, f1) if f1 <= f2 else (x2, f2)


def ses_path(y: np.ndarray, alpha: float) -> np.ndarray:
    """Smoothed levels s_t with s_1 = y_1, s_t = a*y_t + (1-a)*s_{t-1}."""
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise CargocastError("ses_path: empty series")
    if y.size == 1:
        return y.copy()
    rest, _ = lfilter([alpha], [1.0, -(1.0 - alpha)], y[1:], zi=[(1.0 - alpha) * y[0]])
    return np.concatenate(([y[0]], rest))


def ses_sse(y: np.ndarray, alpha: float) -> float:
    """One-step in-sample squared error of the SES recursion."""
    s = ses_path(y, alpha)
    return float(np.sum((y[1:] - s[:-1]) ** 2))


class Forecaster(ABC):
    """fit/predict contract shared by every model in the pool."""

    name: str = "forecaster"
    min_history: int = 1

    def __init__(self):
        self._fitted = False

    def fit(self, series: ODSeries, train_range: DateRange) -> "Forecaster":
        return self.fit_values(series.slice_values(train_range))

    def fit_values(self, y: np.ndarray) -> "Forecaster":
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 1:
            raise CargocastError(f"{self.name}: training slice must be 1-d")
        if y.size < self.min_history:
            raise InsufficientHistoryError(
                f"{self.name}: needs >= {self.min_history} observations, got {y.size}"
            )
        if not np.all(np.isfinite(y)):
            raise CargocastError(f"{self.name}: non-finite training values")
        self._fit(y)
        self._fitted = True
        return self

    def predict(self, horizon: int) -> np.ndarray:
        return np.maximum(self.predict_raw(horizon), 0.0)

    def predict_raw(self, horizon: int) -> np.ndarray:
        if not self._fitted:
            raise CargocastError(f"{self.name}: predict before fit")
        if horizon < 1:
            raise CargocastError(f"horizon must be >= 1, got {horizon}")
        out = self._forecast(horizon)
        if not np.all(np.isfinite(out)):
            raise CargocastError(f"{self.name}: non-finite forecast")
        return out

    @abstractmethod
    def _fit(self, y: np.ndarray) -> None: ...

    @abstractmethod
    def _forecast(self, horizon: int) -> np.ndarray: ...


class HistoricAverage(Forecaster):
    """Mean of the whole training slice, extended flat. Always available."""

    name = "historic_avg"

    def _fit(self, y):
        self.level_ = float(np.mean(y))

    def _forecast(self, horizon):
        return np.full(horizon, self.level_)


class WindowAverage(Forecaster):
    """Mean of the last `window` observations (or all, if fewer)."""

    name = "window_avg"

    def __init__(self, window: int = 28):
        super().__init__()
        if window < 1:
            raise CargocastError(f"window must be >= 1, got {window}")
        self.window = window

    def _fit(self, y):
        self.level_ = float(np.mean(y[-self.window :]))

    def _forecast(self, horizon):
        return np.full(horizon, self.level_)


class SeasonalNaive(Forecaster):
    """Repeat the last observed value of the same seasonal phase."""

    name = "seasonal_naive"

    def __init__(self, m: int = 7):
        super().__init__()
        if m < 1:
            raise CargocastError(f"season length must be >= 1, got {m}")
        self.m = m
        self.min_history = m

    def _fit(self, y):
        self.tail_ = y[-self.m :].copy()

    def _forecast(self, horizon):
        return np.array([self.tail_[(h - 1) % self.m] for h in range(1, horizon + 1)])


class YoyBenchmark(Forecaster):
    """Industry benchmark: the value 364 days earlier (same weekday).

    Falls back to the historic average for dates whose lag precedes the
    available history.
    """

    name = "yoy"
    LAG = 364

    def _fit(self, y):
        self.history_ = y.copy()
        self.fallback_ = float(np.mean(y))

    def _forecast(self, horizon):
        n = self.history_.size
        out = np.empty(horizon)
        for h in range(1, horizon + 1):
            j = n - 1 + h - self.LAG
            out[h - 1] = self.history_[j] if 0 <= j < n else self.fallback_
        return out


class Ses(Forecaster):
    """Simple exponential smoothing; alpha optimized unless given."""

    name = "ses"

    def __init__(self, alpha: float | None = None):
        super().__init__()
        if alpha is not None and not 0.0 <= alpha <= 1.0:
            raise CargocastError(f"alpha must be in [0, 1], got {alpha}")
        self.alpha = alpha
        self.min_history = 1 if alpha is not None else 10

    def _fit(self, y):
        if self.alpha is None:
            self.alpha_, _ = golden_section(lambda a: ses_sse(y, a), ALPHA_LO, ALPHA_HI)
        else:
            self.alpha_ = self.alpha
        self.level_ = float(ses_path(y, self.alpha_)[-1])

    def _forecast(self, horizon):
        return np.full(horizon, self.level_)


class Croston(Forecaster):
    """Croston's intermittent-demand method, classic variant.

    Non-zero demand sizes and inter-demand intervals are smoothed
    separately with the same alpha; the forecast is their ratio.
    """

    name = "croston"

    def __init__(self, alpha: float = 0.1):
        super().__init__()
        if not 0.0 <= alpha <= 1.0:
            raise CargocastError(f"alpha must be in [0, 1], got {alpha}")
        self.alpha = alpha

    def _fit(self, y):
        nonzero = np.flatnonzero(y > 0)
        if nonzero.size == 0:
            self.rate_ = 0.0
            return
        sizes = y[nonzero]
        positions = nonzero + 1  # 1-based; first interval = index of first demand
        intervals = np.diff(positions, prepend=0).astype(np.float64)
        z_hat = float(ses_path(sizes, self.alpha)[-1])
        p_hat = float(ses_path(intervals, self.alpha)[-1])
        self.rate_ = z_hat / p_hat

    def _forecast(self, horizon):
        return np.full(horizon, self.rate_)


class HoltWinters(Forecaster):
    """Additive Holt-Winters with coordinate-grid-optimized parameters."""

    name = "holt_winters"

    def __init__(
        self,
        alpha: float | None = None,
        beta: float | None = None,
        gamma: float | None = None,
        m: int = 7,
    ):
        super().__init__()
        if m < 1:
            raise CargocastError(f"season length must be >= 1, got {m}")
        for nm, v in (("alpha", alpha), ("beta", beta), ("gamma", gamma)):
            if v is not None and not 0.0 <= v <= 1.0:
                raise CargocastError(f"{nm} must be in [0, 1], got {v}")
        self.alpha, self.beta, self.gamma, self.m = alpha, beta, gamma, m
        self.min_history = 2 * m  # two full seasons for the initial states

    def _fit(self, y):
        free = [nm for nm, v in (("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)) if v is None]
        start = {
            "alpha": self.alpha if self.alpha is not None else 0.2,
            "beta": self.beta if self.beta is not None else 0.05,
            "gamma": self.gamma if self.gamma is not None else 0.05,
        }
        best = _coordinate_grid(
            lambda p: _hw_sse(y, p["alpha"], p["beta"], p["gamma"], self.m), start, free
        )
        self.alpha_, self.beta_, self.gamma_ = best["alpha"], best["beta"], best["gamma"]
        _, self.state_ = _hw_run(
            y,
            np.array([self.alpha_]),
            np.array([self.beta_]),
            np.array([self.gamma_]),
            self.m,
        )
        self.n_ = y.size

    def _forecast(self, horizon):
        level, trend, seas = self.state_
        out = np.empty(horizon)
        for h in range(1, horizon + 1):
            j0 = self.n_ + h - self.m * math.ceil(h / self.m) - 1  # 0-based step index
            out[h - 1] = level[0] + h * trend[0] + seas[0, j0 % self.m]
        return out


def _hw_run(y, alphas, betas, gammas, m):
    """Vectorized additive Holt-Winters over parameter lanes.

    Returns per-lane one-step SSE and the final (level, trend, seasonal
    ring buffer) state.
    """
    n = y.size
    lanes = alphas.size
    l0 = float(np.mean(y[:m]))
    b0 = (float(np.mean(y[m : 2 * m])) - l0) / m
    level = np.full(lanes, l0)
    trend = np.full(lanes, b0)
    seas = np.tile(y[:m] - l0, (lanes, 1))
    sse = np.zeros(lanes)
    for t in range(n):
        slot = t % m
        s_prev = seas[:, slot].copy()
        pred = level + trend + s_prev
        err = y[t] - pred
        sse += err * err
        new_level = alphas * (y[t] - s_prev) + (1.0 - alphas) * (level + trend)
        new_trend = betas * (new_level - level) + (1.0 - betas) * trend
        seas[:, slot] = gammas * (y[t] - new_level) + (1.0 - gammas) * s_prev
        level, trend = new_level, new_trend
    return sse, (level, trend, seas)


def _hw_sse(y, alphas, betas, gammas, m):
    sse, _ = _hw_run(np.asarray(y), np.asarray(alphas), np.asarray(betas), np.asarray(gammas), m)
    return sse


def _coordinate_grid(sse_fn, start: dict[str, float], free: list[str], sweeps: int = 3):
    """Coordinate descent where each free axis is scanned on a 21-point
    grid with the other axes held fixed. `sse_fn` takes a dict of lane
    arrays (all same length) and returns per-lane SSE."""
    current = dict(start)
    if not free:
        return current
    for _ in range(sweeps):
        moved = False
        for axis in free:
            lanes = {
                nm: (GRID_21 if nm == axis else np.full(GRID_21.size, current[nm]))
                for nm in ("alpha", "beta", "gamma")
            }
            sse = sse_fn(lanes)
            best = int(np.argmin(sse))
            if GRID_21[best] != current[axis]:
                current[axis] = float(GRID_21[best])
                moved = True
        if not moved:
            break
    return current


class AutoEts(Forecaster):
    """Additive exponential-smoothing family with AICc model selection.

    Candidates: level only (ANN = SES), level+trend (AAN), level+seasonal
    (ANA), level+trend+seasonal (AAA = additive Holt-Winters).
    AICc = n ln(SSE/n) + 2 k n / (n - k - 1), k counting smoothing
    parameters plus initial states.
    """

    name = "auto_ets"
    SSE_FLOOR = 1e-12

    def __init__(self, m: int = 7):
        super().__init__()
        if m < 1:
            raise CargocastError(f"season length must be >= 1, got {m}")
        self.m = m
        self.min_history = max(2 * m, 10)

    def _fit(self, y):
        n = y.size
        m = self.m
        candidates: list[tuple[str, int, float, dict]] = []

        alpha, _ = golden_section(lambda a: ses_sse(y, a), ALPHA_LO, ALPHA_HI)
        candidates.append(
            ("ANN", 2, ses_sse(y, alpha), {"alpha": alpha, "level": float(ses_path(y, alpha)[-1])})
        )

        best_aan = _coordinate_grid(
            lambda p: _aan_sse(y, p["alpha"], p["beta"]), {"alpha": 0.2, "beta": 0.05, "gamma": 0.0}, ["alpha", "beta"]
        )
        sse_aan, state_aan = _aan_run(y, np.array([best_aan["alpha"]]), np.array([best_aan["beta"]]))
        candidates.append(
            ("AAN", 4, float(sse_aan[0]), {"level": state_aan[0][0], "trend": state_aan[1][0]})
        )

        if n >= 2 * m:
            best_ana = _coordinate_grid(
                lambda p: _hw_sse(y, p["alpha"], np.zeros_like(p["alpha"]), p["gamma"], m),
                {"alpha": 0.2, "beta": 0.0, "gamma": 0.05},
                ["alpha", "gamma"],
            )
            sse_ana, state_ana = _hw_run(
                y, np.array([best_ana["alpha"]]), np.array([0.0]), np.array([best_ana["gamma"]]), m
            )
            candidates.append(("ANA", 3 + m, float(sse_ana[0]), {"state": state_ana}))

            best_aaa = _coordinate_grid(
                lambda p: _hw_sse(y, p["alpha"], p["beta"], p["gamma"], m),
                {"alpha": 0.2, "beta": 0.05, "gamma": 0.05},
                ["alpha", "beta", "gamma"],
            )
            sse_aaa, state_aaa = _hw_run(
                y, np.array([best_aaa["alpha"]]), np.array([best_aaa["beta"]]), np.array([best_aaa["gamma"]]), m
            )
            candidates.append(("AAA", 5 + m, float(sse_aaa[0]), {"state": state_aaa}))

        scored = []
        self.candidates_ = []
        for kind, k, sse, state in candidates:
            if n <= k + 1:
                continue
            aicc = n * math.log(max(sse, self.SSE_FLOOR) / n) + 2.0 * k * n / (n - k - 1)
            scored.append((aicc, k, kind, state))
            self.candidates_.append((kind, k, sse))
        if not scored:
            raise InsufficientHistoryError(f"auto_ets: {n} observations fit no candidate")
        order = {"ANN": 0, "AAN": 1, "ANA": 2, "AAA": 3}
        scored.sort(key=lambda row: (row[0], row[1], order[row[2]]))
        _, _, self.selected_, self._state = scored[0]
        self.n_ = n

    def _forecast(self, horizon):
        if self.selected_ == "ANN":
            return np.full(horizon, self._state["level"])
        if self.selected_ == "AAN":
            hs = np.arange(1, horizon + 1)
            return self._state["level"] + hs * self._state["trend"]
        level, trend, seas = self._state["state"]
        out = np.empty(horizon)
        for h in range(1, horizon + 1):
            j0 = self.n_ + h - self.m * math.ceil(h / self.m) - 1
            out[h - 1] = level[0] + h * trend[0] + seas[0, j0 % self.m]
        return out


def _aan_run(y, alphas, betas):
    """Vectorized Holt linear trend over parameter lanes."""
    n = y.size
    b0 = float(y[1] - y[0]) if n >= 2 else 0.0
    level = np.full(alphas.size, float(y[0]) - b0)
    trend = np.full(alphas.size, b0)
    sse = np.zeros(alphas.size)
    for t in range(n):
        pred = level + trend
        err = y[t] - pred
        sse += err * err
        new_level = alphas * y[t] + (1.0 - alphas) * (level + trend)
        trend = betas * (new_level - level) + (1.0 - betas) * trend
        level = new_level
    return sse, (level, trend)


def _aan_sse(y, alphas, betas):
    sse, _ = _aan_run(y, alphas, betas)
    return sse


class DotTheta(Forecaster):
    """Dynamic optimized theta-line forecaster.

    The theta line mixes the series with a linear trend; the trend is
    refit on each expanding prefix during in-sample evaluation (the
    "dynamic" part) and on the full slice for the final forecast. Theta is
    grid-searched and the SES alpha golden-sectioned per theta.
    """

    name = "dot"
    min_history = 10

    def __init__(self, theta: float | None = None):
        super().__init__()
        if theta is not None and theta < 1.0:
            raise CargocastError(f"theta must be >= 1, got {theta}")
        self.theta = theta

    def _fit(self, y):
        n = y.size
        ts = np.arange(1, n + 1, dtype=np.float64)
        dyn_here, dyn_next = _expanding_trend(y)
        thetas = [self.theta] if self.theta is not None else list(THETA_GRID)
        best: tuple[float, float, float] | None = None  # (sse, theta, alpha)
        for theta in thetas:
            z = theta * y + (1.0 - theta) * dyn_here

            def sse_for(alpha, _z=z, _theta=theta):
                s = ses_path(_z, alpha)
                pred = (1.0 / _theta) * s[:-1] + (1.0 - 1.0 / _theta) * dyn_next[:-1]
                return float(np.sum((y[1:] - pred) ** 2))

            alpha, sse = golden_section(sse_for, ALPHA_LO, ALPHA_HI)
            if best is None or sse < best[0]:
                best = (sse, theta, alpha)
        _, self.theta_, self.alpha_ = best
        coef = np.polyfit(ts, y, deg=1)
        self.slope_, self.intercept_ = float(coef[0]), float(coef[1])
        z_full = self.theta_ * y + (1.0 - self.theta_) * (self.intercept_ + self.slope_ * ts)
        self.level_ = float(ses_path(z_full, self.alpha_)[-1])
        self.n_ = n

    def _forecast(self, horizon):
        hs = np.arange(1, horizon + 1)
        line = self.intercept_ + self.slope_ * (self.n_ + hs)
        return (1.0 / self.theta_) * self.level_ + (1.0 - 1.0 / self.theta_) * line


def _expanding_trend(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares line refit on each prefix y[:t+1].

    Returns (value of the prefix line at t, value at t+1), both 1-based in
    time. The one-point prefix degenerates to a flat line through y_1.
    """
    n = y.size
    dyn_here = np.empty(n)
    dyn_next = np.empty(n)
    s_t = s_tt = s_y = s_ty = 0.0
    for i in range(n):
        t = i + 1.0
        s_t += t
        s_tt += t * t
        s_y += y[i]
        s_ty += t * y[i]
        den = (i + 1) * s_tt - s_t * s_t
        if den <= 0:
            slope = 0.0
            intercept = y[0]
        else:
            slope = ((i + 1) * s_ty - s_t * s_y) / den
            intercept = (s_y - slope * s_t) / (i + 1)
        dyn_here[i] = intercept + slope * t
        dyn_next[i] = intercept + slope * (t + 1.0)
    return dyn_here, dyn_next
