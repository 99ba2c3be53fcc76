"""
Out-of-sample evaluation harness.

Rolls a frozen strategy over a held-out window behind a K*M-period
observation pre-roll, collects the per-day total-asset log returns, and
summarizes them into the six standard metrics (AR, DR, Std, SR, LStd,
STR).  Ships the buy-and-hold and constant-rebalance baselines, the
four-window experiment schedule, and the ablation wiring that degrades
the two-level hierarchy to its parts.

Ratios whose denominators vanish are reported as None and serialized as
the literal token ``undefined``, never as NaN or infinity.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from .agents import AuxiliaryPolicy, AuxState, ExecState, ExecutivePolicy
from .market_data import PriceSeries, ReturnWindow
from .trading_env import (
    BankruptcyError,
    EnvConfig,
    PeriodOutcome,
    TradingEnv,
    holding_weights,
)

UNDEFINED = "undefined"


class BacktestError(ValueError):
    """Raised on unusable experiment windows or strategy inputs."""


@dataclass(frozen=True)
class ExperimentSpec:
    """One train/test window pair."""

    name: str
    train_start: np.datetime64
    train_end: np.datetime64
    test_start: np.datetime64
    test_days: int = 120

    def __post_init__(self):
        if not self.train_end < self.test_start:
            raise BacktestError("training window must end before the test window")
        if self.test_days < 1:
            raise BacktestError("test_days must be positive")


def _day(text: str) -> np.datetime64:
    return np.datetime64(text, "D")


def experiment_schedule() -> tuple[ExperimentSpec, ...]:
    """The four staggered evaluations: 3-year training windows, each
    followed by a 120-trading-day test window."""
    rows = [
        ("1", "2018-01-01", "2020-12-31", "2021-01-01"),
        ("2", "2018-07-01", "2021-06-30", "2021-07-01"),
        ("3", "2019-01-01", "2021-12-31", "2022-01-01"),
        ("4", "2019-07-01", "2022-06-30", "2022-07-01"),
    ]
    return tuple(ExperimentSpec(name, _day(a), _day(b), _day(c), 120)
                 for name, a, b, c in rows)


def preroll_days(env_cfg: EnvConfig, window_periods: int) -> int:
    """Observation rows needed ahead of the first test day."""
    return env_cfg.days_per_period * window_periods + 1


def slice_training(prices: PriceSeries, spec: ExperimentSpec) -> PriceSeries:
    """Rows inside [train_start, train_end]; the env's own pre-roll comes
    out of this window."""
    mask = (prices.calendar >= spec.train_start) & (prices.calendar <= spec.train_end)
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise BacktestError(f"no trading days in training window {spec.name}")
    return prices.slice_days(int(rows[0]), int(rows[-1]) + 1)


def slice_backtest(prices: PriceSeries, spec: ExperimentSpec,
                   env_cfg: EnvConfig, window_periods: int) -> PriceSeries:
    """Pre-roll plus test rows: K*M+1 days ending just before test_start,
    then test_days trading days."""
    first_test = int(np.searchsorted(prices.calendar, spec.test_start, side="left"))
    need = preroll_days(env_cfg, window_periods)
    if first_test < need:
        raise BacktestError(
            f"experiment {spec.name}: need {need} pre-roll days before "
            f"{spec.test_start}, have {first_test}")
    if first_test + spec.test_days > prices.n_days:
        raise BacktestError(
            f"experiment {spec.name}: test window runs past the data "
            f"({prices.n_days - first_test} of {spec.test_days} days available)")
    return prices.slice_days(first_test - need, first_test + spec.test_days)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    """Six-number summary of a daily log2 return series.

    ``sharpe``, ``downside_std`` and ``sortino`` are None when their
    denominators are undefined (zero dispersion, or fewer than two
    below-threshold days).
    """

    accumulated_return: float       # AR: sum of daily returns
    daily_return: float             # DR: mean daily return
    std: float                      # population std (divisor = day count)
    sharpe: float | None
    downside_std: float | None      # LStd, divisor N_L - 1
    sortino: float | None
    daily_returns: np.ndarray
    truncated: bool = False

    def __post_init__(self):
        days = len(self.daily_returns)
        if self.std < 0 or (self.downside_std is not None and self.downside_std < 0):
            raise BacktestError("dispersion metrics cannot be negative")
        if abs(self.accumulated_return - self.daily_return * days) > 1e-9:
            raise BacktestError("AR must equal DR times the day count")

    def as_row(self) -> list[str]:
        def cell(value):
            return UNDEFINED if value is None else repr(float(value))

        return [cell(self.accumulated_return), cell(self.daily_return),
                cell(self.std), cell(self.sharpe), cell(self.downside_std),
                cell(self.sortino)]


def compute_metrics(daily_returns: Sequence[float], risk_free: float = 0.0,
                    mar: float = 0.0, truncated: bool = False) -> MetricsReport:
    """Summarize a daily log2 return series.

    The overall dispersion uses the population divisor (the full day
    count) while the downside dispersion clamps returns at ``mar`` and
    divides by N_L - 1, N_L being the number of strictly-below-MAR days.
    """
    returns = np.asarray(daily_returns, dtype=np.float64)
    if returns.size < 2:
        raise BacktestError("need at least two daily observations")
    accumulated = float(returns.sum())
    mean = accumulated / returns.size
    std = float(np.sqrt(np.mean((returns - mean) ** 2)))
    # Constant series leave rounding dust in the deviations; snap it to the
    # exact-arithmetic zero so the ratio is flagged undefined, not inflated.
    if std <= 16.0 * np.finfo(np.float64).eps * max(1.0, float(np.abs(returns).max())):
        std = 0.0
    sharpe = (mean - risk_free) / std if std > 0.0 else None

    below = int(np.sum(returns < mar))
    if below >= 2:
        clamped = np.minimum(returns, mar) - mar
        downside = float(np.sqrt(np.sum(clamped ** 2) / (below - 1)))
        sortino = (mean - mar) / downside
    else:
        downside = None
        sortino = None
    return MetricsReport(accumulated, mean, std, sharpe, downside, sortino,
                         returns, truncated)


# ---------------------------------------------------------------------------
# Strategies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecisionContext:
    """Everything a strategy may look at when choosing period weights."""

    period: int                     # 1-based within the episode
    window: ReturnWindow
    prices_prev: np.ndarray
    positions: np.ndarray
    investment: float


def _check_long_allocation(weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.sum() > 1.0 + 1e-9:
        raise BacktestError("baseline allocations must leave a cash remainder")
    return w


class UniformBuyAndHold:
    """Trade once into the initial weights, then hold the positions."""

    def __init__(self, initial_weights: np.ndarray):
        self.initial_weights = _check_long_allocation(initial_weights)

    def reset(self) -> None:
        pass

    def decide(self, ctx: DecisionContext) -> np.ndarray:
        if ctx.period == 1:
            return self.initial_weights
        return holding_weights(ctx.positions, ctx.prices_prev, ctx.investment)


class ConstantRebalance:
    """Re-issue the same target weights every period."""

    def __init__(self, fixed_weights: np.ndarray):
        self.fixed_weights = _check_long_allocation(fixed_weights)

    def reset(self) -> None:
        pass

    def decide(self, ctx: DecisionContext) -> np.ndarray:
        return self.fixed_weights


class HierarchyStrategy:
    """The trained stack, or one of its ablations.

    full: auxiliary baseline modified by the executive residual.
    lsv1: the auxiliary baseline trades directly.
    lsv2: the executive acts on equal weights 1/n instead of the baseline.
    """

    def __init__(self, mode: str, aux: AuxiliaryPolicy | None,
                 executive: ExecutivePolicy | None):
        if mode not in ("full", "lsv1", "lsv2"):
            raise BacktestError(f"unknown ablation mode {mode!r}")
        if mode in ("full", "lsv1") and aux is None:
            raise BacktestError(f"mode {mode!r} needs the auxiliary policy")
        if mode in ("full", "lsv2") and executive is None:
            raise BacktestError(f"mode {mode!r} needs the executive policy")
        self.mode = mode
        self.aux = aux
        self.executive = executive
        self._prev_aux: np.ndarray | None = None

    def reset(self) -> None:
        self._prev_aux = None

    def decide(self, ctx: DecisionContext) -> np.ndarray:
        n = len(ctx.positions)
        if self.mode == "lsv2":
            baseline = np.full(n, 1.0 / n)
        else:
            if self._prev_aux is None:
                self._prev_aux = np.zeros(n)
            baseline = self.aux.act(AuxState(self._prev_aux, ctx.window))
            self._prev_aux = baseline
        if self.mode == "lsv1":
            return baseline
        return self.executive.act(ExecState(baseline, ctx.window))


def strategy_ubah(initial_weights: np.ndarray) -> UniformBuyAndHold:
    return UniformBuyAndHold(initial_weights)


def strategy_crp(fixed_weights: np.ndarray) -> ConstantRebalance:
    return ConstantRebalance(fixed_weights)


def ablation_mode(mode: str, aux: AuxiliaryPolicy | None,
                  executive: ExecutivePolicy | None) -> HierarchyStrategy:
    return HierarchyStrategy(mode, aux, executive)


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BacktestResult:
    metrics: MetricsReport
    outcomes: tuple[PeriodOutcome, ...]
    daily_dates: np.ndarray


def run_backtest(strategy, prices: PriceSeries, spec: ExperimentSpec,
                 env_cfg: EnvConfig, window_periods: int,
                 sigma_timing: str = "realized") -> BacktestResult:
    """Roll the frozen strategy over the experiment's test window.

    The series is sliced to the K*M+1-day pre-roll plus the test days;
    only complete periods are traded.  A bankruptcy truncates the run and
    flags the report.
    """
    sliced = slice_backtest(prices, spec, env_cfg, window_periods)
    env = TradingEnv(sliced, env_cfg, window_periods, sigma_timing)
    strategy.reset()
    outcomes: list[PeriodOutcome] = []
    daily: list[float] = []
    dates: list[np.datetime64] = []
    truncated = False
    K = env_cfg.days_per_period
    while not env.done:
        ctx = DecisionContext(
            period=env.t,
            window=env.window(),
            prices_prev=sliced.period_close(env.t + window_periods - 1, K),
            positions=env.state.positions,
            investment=env_cfg.investment_per_period,
        )
        raw_first_day = (env.t + window_periods - 1) * K + 1
        try:
            outcome = env.step(strategy.decide(ctx))
        except BankruptcyError:
            truncated = True
            break
        outcomes.append(outcome)
        daily.extend(outcome.daily_asset_log_returns.tolist())
        dates.extend(sliced.calendar[raw_first_day: raw_first_day + K])
    metrics = compute_metrics(daily, truncated=truncated)
    return BacktestResult(metrics, tuple(outcomes), np.array(dates))


# ---------------------------------------------------------------------------
# Report serialization
# ---------------------------------------------------------------------------

REPORT_HEADER = ("experiment", "strategy", "AR", "DR", "Std", "SR", "LStd", "STR")
DAILY_HEADER = ("experiment", "strategy", "day", "date", "log_return", "cum_return")

HIGHER_IS_BETTER = {"AR": True, "DR": True, "Std": False, "SR": True,
                    "LStd": False, "STR": True}


def write_report_csv(rows: Iterable[tuple[str, str, MetricsReport]],
                     sink: IO[str] | str | Path) -> None:
    """One row per strategy x experiment."""
    own = isinstance(sink, (str, Path))
    handle = open(sink, "w", newline="", encoding="utf-8") if own else sink
    try:
        writer = csv.writer(handle)
        writer.writerow(REPORT_HEADER)
        for experiment, strategy, report in rows:
            writer.writerow([experiment, strategy, *report.as_row()])
    finally:
        if own:
            handle.close()


def write_daily_csv(rows: Iterable[tuple[str, str, BacktestResult]],
                    sink: IO[str] | str | Path) -> None:
    """Per-day return series for accumulated-return trajectory plots."""
    own = isinstance(sink, (str, Path))
    handle = open(sink, "w", newline="", encoding="utf-8") if own else sink
    try:
        writer = csv.writer(handle)
        writer.writerow(DAILY_HEADER)
        for experiment, strategy, result in rows:
            cum = 0.0
            for day, (date, value) in enumerate(
                    zip(result.daily_dates, result.metrics.daily_returns), start=1):
                cum += float(value)
                writer.writerow([experiment, strategy, day, str(date),
                                 repr(float(value)), repr(cum)])
    finally:
        if own:
            handle.close()


def mark_best(rows: Sequence[dict]) -> dict[str, set[int]]:
    """Indices of the best row per metric column; undefined cells are
    skipped, ties all win."""
    best: dict[str, set[int]] = {}
    for metric, higher in HIGHER_IS_BETTER.items():
        values = [(i, row[metric]) for i, row in enumerate(rows)
                  if row.get(metric) is not None]
        if not values:
            best[metric] = set()
            continue
        target = max(v for _, v in values) if higher else min(v for _, v in values)
        best[metric] = {i for i, v in values if v == target}
    return best
