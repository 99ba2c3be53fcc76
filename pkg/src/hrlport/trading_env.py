"""
Long/short trading simulator with exact transaction accounting.

One trading period = K trading days; positions are adjusted only at
period boundaries.  Orders are integer share counts obtained by flooring
the target cash allocation, cash pays commissions, debt interest and
short borrow fees, and every period produces a full audit record
(returns, variance, turnover, objective, reward, order legs).

Monetary quantities are float64 currency units; returns are log base 2.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable

import numpy as np

from .market_data import (
    MomentEstimates,
    PriceSeries,
    ReturnWindow,
    moment_estimates,
    return_window,
)

TRADING_DAYS_PER_YEAR = 252


class TradingError(ValueError):
    """Raised on inconsistent inputs to a trading operation."""


class BankruptcyError(RuntimeError):
    """Total assets hit zero or below; the episode cannot continue."""

    def __init__(self, value: float, period: int | None = None, day: int | None = None):
        where = "" if period is None else f" in period {period}, day {day}"
        super().__init__(f"total assets non-positive (v={value:.2f}){where}")
        self.period = period
        self.day = day
        self.value = value


@dataclass(frozen=True)
class EnvConfig:
    """Market frictions, investment sizing and reward penalties.

    Annual borrow rates are prorated to one period as
    ``annual * days_per_period / day_count_basis``.
    ``portfolio_floor`` defaults to 20% of the per-period investment.
    """

    n_assets: int = 29
    days_per_period: int = 5
    commission_rate: float = 0.001
    cash_borrow_rate: float = 0.03      # annual, charged on negative cash
    stock_borrow_rate: float = 0.03     # annual, charged on short positions
    investment_ratio: float = 1.0
    initial_capital: float = 1e8
    portfolio_floor: float | None = None
    risk_penalty: float = 10.0
    turnover_penalty: float = 0.001
    day_count_basis: int = TRADING_DAYS_PER_YEAR

    def __post_init__(self):
        if self.n_assets < 1:
            raise TradingError("n_assets must be positive")
        if self.days_per_period < 1:
            raise TradingError("days_per_period must be positive")
        if not 0.0 < self.investment_ratio <= 1.0:
            raise TradingError("investment_ratio must lie in (0, 1]")
        if min(self.commission_rate, self.cash_borrow_rate, self.stock_borrow_rate) < 0:
            raise TradingError("rates must be non-negative")
        if self.risk_penalty < 0 or self.turnover_penalty < 0:
            raise TradingError("penalty coefficients must be non-negative")
        if self.initial_capital <= 0:
            raise TradingError("initial_capital must be positive")
        if self.floor_value <= 0:
            raise TradingError("portfolio_floor must be positive")

    @property
    def investment_per_period(self) -> float:
        return self.investment_ratio * self.initial_capital

    @property
    def floor_value(self) -> float:
        if self.portfolio_floor is not None:
            return self.portfolio_floor
        return 0.2 * self.investment_per_period

    def period_rate(self, annual: float) -> float:
        return annual * self.days_per_period / self.day_count_basis


@dataclass(frozen=True)
class AccountState:
    """Cash, integer share positions, and marked total value after a period."""

    period: int
    cash: float
    positions: np.ndarray       # (n,) int64
    total_assets: float
    prev_total: float
    prev_portfolio_value: float

    @staticmethod
    def initial(cfg: EnvConfig) -> "AccountState":
        v0 = cfg.initial_capital
        return AccountState(
            period=0,
            cash=v0,
            positions=np.zeros(cfg.n_assets, dtype=np.int64),
            total_assets=v0,
            prev_total=v0,
            prev_portfolio_value=cfg.investment_per_period,
        )


@dataclass(frozen=True)
class OrderLeg:
    """One Table-style order record for a single asset.

    ``shares`` is the unsigned order size |dq|; the split fields record
    how the order decomposes against the position held beforehand.
    """

    asset: int
    kind: str                   # buy | buy_return | sell | borrow_sell | sell_borrow
    shares: int
    returned: int = 0           # shares handed back against a short (buy side)
    sold_held: int = 0          # shares sold out of a long position (sell side)
    borrowed: int = 0           # shares borrowed to sell (sell side)

    @property
    def signed_shares(self) -> int:
        return self.shares if self.kind in ("buy", "buy_return") else -self.shares


@dataclass(frozen=True)
class PeriodOutcome:
    """Audit record for one executed trading period."""

    period: int
    period_log_return: float            # log2 portfolio return; NaN if v_p <= 0
    daily_asset_log_returns: np.ndarray     # (K,) total-assets daily log2 returns
    daily_portfolio_log_returns: np.ndarray  # (K,) portfolio daily log2 returns
    variance: float
    transaction_ratio: float
    objective: float                    # NaN whenever period_log_return is NaN
    reward: float                       # floor-clamped, always finite
    order_legs: tuple[OrderLeg, ...]
    cash: float
    total_assets: float


def target_position(weights: np.ndarray, investment: float,
                    prices_prev: np.ndarray) -> np.ndarray:
    """Integer share targets: floor(investment * w / p), floor toward -inf."""
    if investment <= 0:
        raise TradingError("investment must be positive")
    if np.any(prices_prev <= 0):
        raise TradingError("non-positive price")
    return np.floor(investment * np.asarray(weights, dtype=np.float64)
                    / prices_prev).astype(np.int64)


def holding_weights(positions: np.ndarray, prices_prev: np.ndarray,
                    investment: float) -> np.ndarray:
    """Weights whose floored target reproduces ``positions`` exactly.

    Padding by half a share keeps the floor stable against the rounding
    of investment * w / p.
    """
    return (positions + 0.5) * prices_prev / investment


def market_order(q_new: np.ndarray, q_old: np.ndarray) -> np.ndarray:
    """Share changes needed to move from held to target positions."""
    if q_new.shape != q_old.shape:
        raise TradingError("position vectors differ in length")
    return q_new - q_old


def classify_order_legs(dq: np.ndarray, q_old: np.ndarray) -> tuple[OrderLeg, ...]:
    """Describe each non-zero order as the matching long/short operation.

    Purely descriptive: every cash effect flows through update_cash.
    """
    if dq.shape != q_old.shape:
        raise TradingError("order and position vectors differ in length")
    legs: list[OrderLeg] = []
    for i, (d, q) in enumerate(zip(dq.tolist(), q_old.tolist())):
        if d == 0:
            continue
        if d > 0:
            if q >= 0:
                legs.append(OrderLeg(i, "buy", d))
            else:
                legs.append(OrderLeg(i, "buy_return", d, returned=min(d, -q)))
        else:
            size = -d
            if q <= 0:
                legs.append(OrderLeg(i, "borrow_sell", size, borrowed=size))
            elif q >= size:
                legs.append(OrderLeg(i, "sell", size, sold_held=size))
            else:
                legs.append(OrderLeg(i, "sell_borrow", size,
                                     sold_held=q, borrowed=size - q))
    return tuple(legs)


def update_cash(cash_prev: float, dq: np.ndarray, q_new: np.ndarray,
                prices_prev: np.ndarray, cfg: EnvConfig) -> float:
    """Cash after rebalancing: trade cost, commission, short borrow fee.

    Negative cash carried into the period is first grown by one period of
    debt interest; positive cash earns nothing.  The borrow fee applies
    once per period to the freshly held short positions at the prior
    close.
    """
    if len(dq) != cfg.n_assets or len(q_new) != cfg.n_assets:
        raise TradingError("vector length does not match configured n_assets")
    cash = float(cash_prev)
    if cash < 0.0:
        cash *= 1.0 + cfg.period_rate(cfg.cash_borrow_rate)
    trade_cost = float(dq @ prices_prev)
    commission = cfg.commission_rate * float(np.abs(dq) @ prices_prev)
    shorts = q_new < 0
    borrow_fee = cfg.period_rate(cfg.stock_borrow_rate) * float(
        np.abs(q_new[shorts]) @ prices_prev[shorts])
    return cash - trade_cost - commission - borrow_fee


def revalue(cash: float, positions: np.ndarray, prices: np.ndarray) -> float:
    """Mark the account: cash plus positions at the given prices."""
    return float(cash + positions @ prices)


def period_log_return(v_now: float, v_prev: float) -> float:
    """log2 growth of total assets over one period."""
    if v_now <= 0.0 or v_prev <= 0.0:
        raise BankruptcyError(min(v_now, v_prev))
    return math.log2(v_now / v_prev)


def portfolio_log_return(v_now: float, v_prev: float, investment: float) -> float:
    """log2 growth of the period's P&L base: (v_t - v_{t-1} + T_t) / T_t."""
    vp = v_now - v_prev + investment
    if vp <= 0.0:
        raise TradingError(f"non-positive portfolio value {vp:.2f}; reward path "
                           "must use the floored branch")
    return math.log2(vp / investment)


def transaction_ratio(dq: np.ndarray, prices_prev: np.ndarray,
                      investment: float) -> float:
    """Traded notional divided by the investment scale."""
    if investment <= 0:
        raise TradingError("investment must be positive")
    return float(np.abs(dq) @ prices_prev) / investment


def portfolio_variance(weights: np.ndarray, covariance: np.ndarray) -> float:
    """Quadratic form w' Sigma w."""
    w = np.asarray(weights, dtype=np.float64)
    if covariance.shape != (w.size, w.size):
        raise TradingError("covariance dimension does not match weights")
    return float(w @ covariance @ w)


def objective(period_return: float, variance: float, turnover: float,
              cfg: EnvConfig) -> float:
    """Risk- and turnover-adjusted daily return: xi/K - l1*V - l2*eps."""
    return (period_return / cfg.days_per_period
            - cfg.risk_penalty * variance
            - cfg.turnover_penalty * turnover)


def executive_reward(portfolio_value: float, investment: float,
                     weights: np.ndarray, covariance: np.ndarray,
                     turnover: float, cfg: EnvConfig) -> float:
    """Objective with the portfolio value floored at the configured bound.

    Total and continuous: below the floor the return term freezes at
    log2(floor/investment), so exploration cannot produce -inf rewards.
    """
    floored = max(portfolio_value, cfg.floor_value)
    return (math.log2(floored / investment) / cfg.days_per_period
            - cfg.risk_penalty * portfolio_variance(weights, covariance)
            - cfg.turnover_penalty * turnover)


def step(state: AccountState, weights: np.ndarray, prices: PriceSeries,
         moments: MomentEstimates, cfg: EnvConfig, *,
         raw_period: int) -> tuple[AccountState, PeriodOutcome]:
    """Execute one trading period at the given raw period of the series.

    Rebalances against the prior close, charges all costs, marks the
    account through each of the K days, and evaluates the return,
    variance, turnover, objective and reward of the executed weights.
    """
    K = cfg.days_per_period
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (cfg.n_assets,):
        raise TradingError("weight vector length does not match n_assets")
    if not np.all(np.isfinite(w)):
        raise TradingError("non-finite portfolio weights")

    p_prev = prices.period_close(raw_period - 1, K)
    investment = cfg.investment_per_period

    q_new = target_position(w, investment, p_prev)
    dq = market_order(q_new, state.positions)
    legs = classify_order_legs(dq, state.positions)
    cash = update_cash(state.cash, dq, q_new, p_prev, cfg)

    v_prev = state.total_assets
    daily_asset = np.empty(K)
    daily_portfolio = np.empty(K)
    v_day_prev = v_prev
    vp_day_prev = state.prev_portfolio_value
    v_day = v_prev
    for k in range(1, K + 1):
        p_day = prices.prices[prices.day_index(raw_period, k, K)]
        v_day = revalue(cash, q_new, p_day)
        if v_day <= 0.0 or v_day_prev <= 0.0:
            raise BankruptcyError(v_day, period=state.period + 1, day=k)
        daily_asset[k - 1] = math.log2(v_day / v_day_prev)
        vp_day = v_day - v_prev + investment
        if vp_day > 0.0 and vp_day_prev > 0.0:
            daily_portfolio[k - 1] = math.log2(vp_day / vp_day_prev)
        else:
            daily_portfolio[k - 1] = math.nan
        v_day_prev = v_day
        vp_day_prev = vp_day

    v_now = v_day
    vp = v_now - v_prev + investment
    xi = math.log2(vp / investment) if vp > 0.0 else math.nan
    eps = transaction_ratio(dq, p_prev, investment)
    variance = portfolio_variance(w, moments.covariance)
    theta = objective(xi, variance, eps, cfg)
    reward = executive_reward(vp, investment, w, moments.covariance, eps, cfg)

    new_state = AccountState(
        period=state.period + 1,
        cash=cash,
        positions=q_new,
        total_assets=v_now,
        prev_total=v_prev,
        prev_portfolio_value=vp,
    )
    outcome = PeriodOutcome(
        period=state.period + 1,
        period_log_return=xi,
        daily_asset_log_returns=daily_asset,
        daily_portfolio_log_returns=daily_portfolio,
        variance=variance,
        transaction_ratio=eps,
        objective=theta,
        reward=reward,
        order_legs=legs,
        cash=cash,
        total_assets=v_now,
    )
    return new_state, outcome


class TradingEnv:
    """Episode driver: rolls AccountState over a PriceSeries.

    The first ``window_periods`` raw periods (plus the anchor day) are
    reserved as observation pre-roll; episode period ``t`` (1-based)
    trades raw period ``t + window_periods``.  Moment estimates are
    cached per raw period since the series is immutable.
    """

    def __init__(self, prices: PriceSeries, cfg: EnvConfig, window_periods: int,
                 sigma_timing: str = "realized"):
        if prices.n_assets != cfg.n_assets:
            raise TradingError("price series asset count does not match config")
        if sigma_timing not in ("realized", "decision"):
            raise TradingError(f"unknown sigma_timing {sigma_timing!r}")
        self.prices = prices
        self.cfg = cfg
        self.window_periods = window_periods
        self.sigma_timing = sigma_timing
        self.horizon = prices.n_periods(cfg.days_per_period) - window_periods
        if self.horizon < 1:
            raise TradingError(
                f"series holds {prices.n_periods(cfg.days_per_period)} periods; "
                f"need more than the {window_periods}-period pre-roll")
        self._moment_cache: dict[int, MomentEstimates] = {}
        self.reset()

    def reset(self) -> None:
        self.t = 1
        self.state = AccountState.initial(self.cfg)

    def clone(self) -> "TradingEnv":
        """Fresh episode over the same data; the moment cache is shared."""
        twin = TradingEnv(self.prices, self.cfg, self.window_periods,
                          self.sigma_timing)
        twin._moment_cache = self._moment_cache
        return twin

    @property
    def done(self) -> bool:
        return self.t > self.horizon

    def _raw_period(self, t: int) -> int:
        return t + self.window_periods

    def window(self, t: int | None = None) -> ReturnWindow:
        """Observation tensor for episode period t (defaults to current)."""
        t = self.t if t is None else t
        return return_window(self.prices, self._raw_period(t),
                             self.window_periods, self.cfg.days_per_period)

    def moments(self, t: int | None = None, *, timing: str | None = None) -> MomentEstimates:
        """Moment estimates for episode period t under the given timing."""
        t = self.t if t is None else t
        timing = self.sigma_timing if timing is None else timing
        raw = self._raw_period(t)
        if timing == "decision":
            raw -= 1
        if raw not in self._moment_cache:
            self._moment_cache[raw] = moment_estimates(
                self.prices, raw, self.window_periods, self.cfg.days_per_period)
        return self._moment_cache[raw]

    def step(self, weights: np.ndarray) -> PeriodOutcome:
        """Trade the current period with the given weights and advance."""
        if self.done:
            raise TradingError("episode finished; reset() before stepping")
        self.state, outcome = step(self.state, weights, self.prices,
                                   self.moments(), self.cfg,
                                   raw_period=self._raw_period(self.t))
        self.t += 1
        return outcome

    def advance(self) -> None:
        """Move to the next period without trading (observation-only phase)."""
        if self.done:
            raise TradingError("episode finished; reset() before advancing")
        self.t += 1


PERIOD_LOG_HEADER = ("t", "xi", "V", "eps", "theta", "r_ex", "c", "v")


def write_period_log(outcomes: Iterable[PeriodOutcome], sink: IO[str] | str | Path) -> None:
    """Serialize one row per executed period for audit and plotting."""
    own = isinstance(sink, (str, Path))
    handle = open(sink, "w", newline="", encoding="utf-8") if own else sink
    try:
        writer = csv.writer(handle)
        writer.writerow(PERIOD_LOG_HEADER)
        for o in outcomes:
            writer.writerow([o.period, repr(o.period_log_return), repr(o.variance),
                             repr(o.transaction_ratio), repr(o.objective),
                             repr(o.reward), repr(o.cash), repr(o.total_assets)])
    finally:
        if own:
            handle.close()
