"""Hierarchical two-agent RL portfolio engine.

A long/short trading simulator with exact integer-share accounting, a
two-level (baseline + residual) policy stack trained by policy gradient
and DDPG, and a backtest harness with risk-adjusted metrics, baselines
and ablation modes.
"""

__version__ = "0.1.0"

from .agents import AgentConfig
from .backtest import ExperimentSpec, MetricsReport, compute_metrics
from .market_data import PriceSeries, load_prices
from .trading_env import AccountState, EnvConfig, TradingEnv
from .training import TrainConfig

__all__ = [
    "__version__",
    "AgentConfig",
    "AccountState",
    "EnvConfig",
    "ExperimentSpec",
    "MetricsReport",
    "PriceSeries",
    "TradingEnv",
    "TrainConfig",
    "compute_metrics",
    "load_prices",
]
