"""
Figure rendering for run reports.

Every function reads one of the run's CSV artifacts and writes a PNG
next to it: accumulated-return trajectories per experiment, risk/return
scatters (slopes from the origin visualize the return-per-risk ratios),
and the four-panel training tracking dashboard.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import pandas as pd

FIG_DPI = 150


def _read(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, na_values=["undefined"])


def plot_cumulative_returns(daily_csv: str | Path, out_png: str | Path,
                            experiment: str | None = None) -> Path:
    """Accumulated log2 return per strategy over the test days."""
    frame = _read(daily_csv)
    frame["experiment"] = frame["experiment"].astype(str)
    if experiment is not None:
        frame = frame[frame["experiment"] == str(experiment)]
    fig, ax = plt.subplots(figsize=(7, 4))
    for strategy, group in frame.groupby("strategy"):
        ax.plot(group["day"], group["cum_return"], label=strategy, linewidth=1.2)
    ax.axhline(0.0, color="gray", linewidth=0.6)
    ax.set_xlabel("trading day")
    ax.set_ylabel("accumulated log2 return")
    title = "Accumulated return"
    if experiment is not None:
        title += f" (experiment {experiment})"
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, out_png)


def plot_risk_return(report_csv: str | Path, out_png: str | Path,
                     experiment: str | None = None) -> Path:
    """Daily return against total and downside dispersion, one point per
    strategy; steeper slopes from the origin mean better ratios."""
    frame = _read(report_csv)
    frame["experiment"] = frame["experiment"].astype(str)
    if experiment is not None:
        frame = frame[frame["experiment"] == str(experiment)]
    fig, axes = plt.subplots(1, 2, figsize=(9, 4), sharey=True)
    for ax, risk_col, label in ((axes[0], "Std", "standard deviation"),
                                (axes[1], "LStd", "downside deviation")):
        for _, row in frame.iterrows():
            if pd.isna(row[risk_col]) or pd.isna(row["DR"]):
                continue
            ax.scatter(row[risk_col], row["DR"], s=24)
            ax.annotate(row["strategy"], (row[risk_col], row["DR"]),
                        fontsize=7, xytext=(3, 3), textcoords="offset points")
        ax.axhline(0.0, color="gray", linewidth=0.6)
        ax.set_xlabel(label)
    axes[0].set_ylabel("daily log2 return")
    title = "Risk / return"
    if experiment is not None:
        title += f" (experiment {experiment})"
    fig.suptitle(title)
    return _save(fig, out_png)


def plot_tracking(tracking_csv: str | Path, out_png: str | Path,
                  title: str = "Training tracking") -> Path:
    """Four panels over training steps: cumulative return and reward,
    training objectives, amplified cumulative variance, and the counts of
    positive-return / positive-reward periods."""
    frame = _read(tracking_csv)
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))

    ax = axes[0, 0]
    ax.plot(frame["step"], frame["AR"], label="AR", color="tab:blue")
    ax.plot(frame["step"], frame["ARD"], label="ARD", color="tab:orange")
    ax.set_title("accumulated return / reward")
    ax.legend(fontsize=8)

    ax = axes[0, 1]
    if frame["actor_obj"].notna().any():
        ax.plot(frame["step"], frame["actor_obj"], label="actor objective",
                color="tab:green")
    if frame["critic_loss"].notna().any():
        twin = ax.twinx()
        twin.plot(frame["step"], frame["critic_loss"], label="critic loss",
                  color="tab:red", linewidth=0.9)
        twin.set_yscale("log")
        twin.legend(fontsize=8, loc="upper right")
    ax.set_title("training objectives")
    ax.legend(fontsize=8, loc="upper left")

    ax = axes[1, 0]
    ax.plot(frame["step"], frame["AV"], color="tab:purple")
    ax.set_title("accumulated variance (amplified)")

    ax = axes[1, 1]
    ax.plot(frame["step"], frame["NP"], label="NP", color="tab:blue")
    ax.plot(frame["step"], frame["NPR"], label="NPR", color="tab:orange")
    ax.set_title("positive-return / positive-reward periods")
    ax.legend(fontsize=8)

    for ax in axes.ravel():
        ax.set_xlabel("training step")
    fig.suptitle(title)
    return _save(fig, out_png)


def _save(fig, out_png: str | Path) -> Path:
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_png, dpi=FIG_DPI)
    plt.close(fig)
    return out_png
