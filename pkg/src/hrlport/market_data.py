"""
Price ingestion and return statistics.

Loads adjusted-close CSV data into an immutable price panel and derives
the quantities the agents and the simulator consume: per-day log2 return
vectors, per-period return matrices, rolling windows of those matrices,
and windowed moment estimates (mean vector, covariance matrix).

Day/period convention used throughout the package: row 0 of the price
matrix is an anchor day; trading period ``t`` (1-based) covers rows
``(t-1)*K + 1 .. t*K``, so the closing price of period ``t`` is row
``t*K`` and the "close of period 0" is the anchor row itself.  A series
with ``D`` rows therefore holds ``(D - 1) // K`` complete periods.

All returns are log base 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd


class MarketDataError(ValueError):
    """Raised when a price file or an index into it is unusable."""


@dataclass(frozen=True)
class PriceSeries:
    """Adjusted closing prices: rows = trading days, columns = assets."""

    tickers: tuple[str, ...]
    prices: np.ndarray          # (days, assets) float64, strictly positive
    calendar: np.ndarray        # (days,) datetime64[D], ascending

    def __post_init__(self):
        if self.prices.ndim != 2 or self.prices.shape[1] != len(self.tickers):
            raise MarketDataError("price matrix shape does not match ticker list")
        if len(self.calendar) != self.prices.shape[0]:
            raise MarketDataError("calendar length does not match price rows")
        if not np.all(np.isfinite(self.prices)):
            raise MarketDataError("price matrix contains non-finite values")
        if np.any(self.prices <= 0.0):
            raise MarketDataError("price matrix contains non-positive prices")

    @property
    def n_assets(self) -> int:
        return len(self.tickers)

    @property
    def n_days(self) -> int:
        return self.prices.shape[0]

    def n_periods(self, days_per_period: int) -> int:
        """Complete trading periods after the anchor row."""
        return (self.n_days - 1) // days_per_period

    def day_index(self, t: int, k: int, days_per_period: int) -> int:
        """Row of day k (1..K) in period t (1-based); (t, K) is the period close."""
        return (t - 1) * days_per_period + k

    def period_close(self, t: int, days_per_period: int) -> np.ndarray:
        """Closing price vector of period t; t = 0 returns the anchor row."""
        row = t * days_per_period
        if not 0 <= row < self.n_days:
            raise MarketDataError(f"period {t} out of range")
        return self.prices[row]

    def restrict(self, tickers: Sequence[str]) -> "PriceSeries":
        """Column subset in the given ticker order."""
        try:
            cols = [self.tickers.index(t) for t in tickers]
        except ValueError as exc:
            raise MarketDataError(f"unknown asset in selection: {exc}") from exc
        return PriceSeries(tuple(tickers), self.prices[:, cols].copy(), self.calendar)

    def slice_days(self, start: int, stop: int) -> "PriceSeries":
        """Row subset [start, stop)."""
        return PriceSeries(self.tickers, self.prices[start:stop].copy(),
                           self.calendar[start:stop].copy())


@dataclass(frozen=True)
class FluctuationTensor:
    """K x n matrix of daily log2 returns for one trading period."""

    period_index: int
    values: np.ndarray          # (K, n)


@dataclass(frozen=True)
class ReturnWindow:
    """The M consecutive fluctuation tensors preceding period t."""

    period_index: int
    tensors: tuple[FluctuationTensor, ...]

    def __post_init__(self):
        if not self.tensors:
            raise MarketDataError("empty return window")
        indices = [tensor.period_index for tensor in self.tensors]
        if indices != list(range(indices[0], indices[0] + len(indices))):
            raise MarketDataError("window tensors are not consecutive")

    def to_vector(self) -> np.ndarray:
        """Chronological, row-major flattening (the state layout contract)."""
        return np.concatenate([t.values.ravel() for t in self.tensors])


@dataclass(frozen=True)
class MomentEstimates:
    """Windowed per-day return moments: mean vector and covariance matrix."""

    mean: np.ndarray            # (n,)
    covariance: np.ndarray      # (n, n), exactly symmetric

    def __post_init__(self):
        cov = self.covariance
        if cov.shape[0] != cov.shape[1] or cov.shape[0] != self.mean.shape[0]:
            raise MarketDataError("moment shapes inconsistent")
        scale = max(np.abs(cov).max(), 1.0)
        if np.abs(cov - cov.T).max() > 1e-12 * scale:
            raise MarketDataError("covariance not symmetric")
        if np.any(np.diag(cov) < 0.0):
            raise MarketDataError("negative variance on covariance diagonal")


DJIA_MANIFEST = "djia29.txt"


def default_asset_manifest() -> tuple[str, ...]:
    """The 29-stock DJIA universe shipped with the package."""
    text = resources.files("hrlport.data").joinpath(DJIA_MANIFEST).read_text()
    return tuple(line.strip() for line in text.splitlines() if line.strip())


def read_manifest(path: str | Path) -> tuple[str, ...]:
    """Read a one-ticker-per-line manifest file."""
    lines = Path(path).read_text().splitlines()
    return tuple(line.strip() for line in lines if line.strip())


def load_prices(path: str | Path,
                required_assets: Sequence[str] | None = None) -> PriceSeries:
    """Load an adjusted-close CSV (``date,TICKER1,TICKER2,...``).

    Rows are sorted ascending by date.  Assets with any missing or blank
    cell are dropped; if such an asset (or one absent from the file) is
    listed in ``required_assets``, loading fails instead.  Returns the
    series restricted to ``required_assets`` in that order when given,
    otherwise all surviving assets in file order.
    """
    path = Path(path)
    if not path.exists():
        raise MarketDataError(f"price file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, skipinitialspace=True)
    except Exception as exc:
        raise MarketDataError(f"cannot parse CSV {path}: {exc}") from exc
    if frame.empty or frame.shape[1] < 2:
        raise MarketDataError(f"{path}: need a date column and at least one asset")

    date_col = frame.columns[0]
    try:
        dates = pd.to_datetime(frame[date_col], format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise MarketDataError(f"{path}: unparseable date: {exc}") from exc
    if dates.duplicated().any():
        raise MarketDataError(f"{path}: duplicate trading days")

    order = np.argsort(dates.to_numpy(), kind="stable")
    frame = frame.iloc[order].reset_index(drop=True)
    calendar = dates.to_numpy()[order].astype("datetime64[D]")

    asset_cols = [c for c in frame.columns if c != date_col]
    kept: list[str] = []
    columns: list[np.ndarray] = []
    dropped: list[str] = []
    for col in asset_cols:
        raw = frame[col]
        if raw.isna().any() or (raw.str.strip() == "").any():
            dropped.append(col)
            continue
        try:
            values = raw.astype(np.float64).to_numpy()
        except ValueError as exc:
            raise MarketDataError(f"{path}: unparseable cell in {col}: {exc}") from exc
        if np.any(~np.isfinite(values)) or np.any(values <= 0.0):
            raise MarketDataError(f"{path}: non-positive or non-finite price in {col}")
        kept.append(col)
        columns.append(values)

    if required_assets is not None:
        missing = [a for a in required_assets if a not in kept]
        gap = [a for a in missing if a in dropped]
        if gap:
            raise MarketDataError(f"{path}: required assets have missing data: {gap}")
        if missing:
            raise MarketDataError(f"{path}: required asset columns absent: {missing}")

    if not kept:
        raise MarketDataError(f"{path}: no complete asset columns")

    series = PriceSeries(tuple(kept), np.column_stack(columns), calendar)
    if required_assets is not None:
        series = series.restrict(required_assets)
    return series


def daily_return_vector(prices: PriceSeries, t: int, k: int,
                        days_per_period: int) -> np.ndarray:
    """log2 price ratio of day k in period t over its predecessor day.

    For k = 1 the predecessor is the close of period t-1 (the anchor row
    when t = 1).
    """
    K = days_per_period
    if not 1 <= k <= K:
        raise MarketDataError(f"day index {k} outside 1..{K}")
    row = prices.day_index(t, k, K)
    if t < 1 or row >= prices.n_days:
        raise MarketDataError(f"period {t} day {k} out of range")
    return np.log2(prices.prices[row] / prices.prices[row - 1])


def fluctuation_tensor(prices: PriceSeries, t: int,
                       days_per_period: int) -> FluctuationTensor:
    """All K daily return vectors of period t, stacked as rows."""
    K = days_per_period
    if t < 1 or t > prices.n_periods(K):
        raise MarketDataError(f"period {t} has incomplete history")
    block = prices.prices[(t - 1) * K: t * K + 1]
    return FluctuationTensor(t, np.log2(block[1:] / block[:-1]))


def return_window(prices: PriceSeries, t: int, window_periods: int,
                  days_per_period: int) -> ReturnWindow:
    """The M fluctuation tensors for periods t-M .. t-1 (state input at t)."""
    M = window_periods
    if t <= M:
        raise MarketDataError(f"period {t}: need at least {M} prior periods")
    tensors = tuple(fluctuation_tensor(prices, s, days_per_period)
                    for s in range(t - M, t))
    return ReturnWindow(t, tensors)


def moment_estimates(prices: PriceSeries, t: int, window_periods: int,
                     days_per_period: int) -> MomentEstimates:
    """Mean and covariance of daily returns around period t.

    The mean uses only the K days of period t.  The covariance pools the
    K*M daily returns of periods t-M+1 .. t, demeans with the pooled
    grand mean, and divides by K*M - n - 1 (the denominator is part of
    the estimator's contract here, nonstandard as it is).
    """
    K, M = days_per_period, window_periods
    n = prices.n_assets
    denom = K * M - n - 1
    if denom <= 0:
        raise MarketDataError(f"degenerate covariance denominator K*M-n-1={denom}")
    if t < M or t > prices.n_periods(K):
        raise MarketDataError(f"period {t}: need {M} complete periods of returns")

    current = fluctuation_tensor(prices, t, K).values
    mean = current.mean(axis=0)

    pooled = np.vstack([fluctuation_tensor(prices, s, K).values
                        for s in range(t - M + 1, t + 1)])
    deviations = pooled - pooled.mean(axis=0)

    # One triangle, mirrored, so sigma_ij == sigma_ji bit-for-bit.
    cov = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            s = float(deviations[:, i] @ deviations[:, j]) / denom
            cov[i, j] = s
            cov[j, i] = s
    return MomentEstimates(mean, cov)
