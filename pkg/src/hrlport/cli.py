"""
Command-line entry point.

Subcommands: ``ingest`` (validate a price CSV and summarize coverage),
``train`` (both training phases per experiment, emitting checkpoints and
tracking CSVs), ``backtest`` (roll frozen strategies over the test
windows, emitting report and daily-return CSVs plus per-period audit
logs), and ``report`` (consolidate per-experiment tables with best-value
marking and render the figures).

Every command writes its manifest before doing any work, so a crashed
run still identifies the attempt.  Output root resolution: ``--out``
flag, then the HRLPORT_OUT environment variable, then the config file,
then ``runs/``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .agents import (
    AgentError,
    AuxiliaryPolicy,
    Critic,
    ExecutivePolicy,
    load_bundle,
    save_bundle,
)
from .backtest import (
    BacktestError,
    ExperimentSpec,
    REPORT_HEADER,
    ablation_mode,
    mark_best,
    run_backtest,
    slice_training,
    strategy_crp,
    strategy_ubah,
    write_daily_csv,
    write_report_csv,
)
from .config import (
    ConfigError,
    RunConfig,
    checkpoint_fingerprint,
    config_fingerprint,
    config_to_dict,
    experiment_seeds,
    load_config,
)
from .market_data import (
    MarketDataError,
    default_asset_manifest,
    load_prices,
    read_manifest,
)
from .trading_env import TradingEnv, TradingError, write_period_log
from .training import TrainingError, train_auxiliary, train_executive

ENV_OUT_VAR = "HRLPORT_OUT"

KNOWN_ERRORS = (MarketDataError, ConfigError, BacktestError, AgentError,
                TradingError, TrainingError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hrlport",
        description="Hierarchical two-agent RL portfolio engine: ingest, "
                    "train, backtest, report.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--data", help="adjusted-close CSV (date,TICKER,...)")
        p.add_argument("--out", help="output root directory")
        p.add_argument("--seed", type=int, help="root random seed")

    p = sub.add_parser("ingest", help="validate a price CSV and summarize it")
    common(p)
    p.add_argument("--manifest", help="asset manifest file (one ticker per line)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="run both training phases")
    common(p)
    p.add_argument("--experiment", default="all",
                   help="experiment name or 'all' (default)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("backtest", help="evaluate strategies out of sample")
    common(p)
    p.add_argument("--mode", default="full",
                   choices=["full", "lsv1", "lsv2", "baselines"],
                   help="strategy set to evaluate (default: full)")
    p.add_argument("--experiment", default="all",
                   help="experiment name or 'all' (default)")
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("report", help="consolidate reports and render figures")
    p.add_argument("run_dir", nargs="?",
                   help="run directory (default: resolved output root)")
    common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KNOWN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def _resolve_config(args) -> RunConfig:
    out_flag = args.out if args.out is not None else os.environ.get(ENV_OUT_VAR)
    return load_config(args.config, data=args.data, out=out_flag,
                       seed=args.seed)


def _file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, cfg: RunConfig | None,
                    **extra) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "package_version": __version__,
        "created_utc": datetime.now(timezone.utc).isoformat(),
    }
    if cfg is not None:
        payload.update({
            "seed": cfg.seed,
            "config": config_to_dict(cfg),
            "config_fingerprint": config_fingerprint(cfg),
            "checkpoint_fingerprint": checkpoint_fingerprint(cfg),
        })
        if cfg.data_path and Path(cfg.data_path).exists():
            payload["data_sha256"] = _file_sha256(cfg.data_path)
    payload.update(extra)
    path = out_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def _require_data(cfg: RunConfig) -> str:
    if not cfg.data_path:
        raise ConfigError("no price data given; pass --data or set it in the "
                          "config file")
    return cfg.data_path


def _load_series(cfg: RunConfig):
    series = load_prices(_require_data(cfg), cfg.assets)
    if series.n_assets != cfg.env.n_assets:
        raise ConfigError(
            f"data provides {series.n_assets} assets but env.n_assets is "
            f"{cfg.env.n_assets}; align the config or pass an asset list")
    return series


def _artifacts_ok(paths) -> bool:
    return all(Path(p).exists() for p in paths)


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    cfg = _resolve_config(args)
    data = _require_data(cfg)
    out_dir = Path(cfg.output_dir)
    _write_manifest(out_dir, "ingest", cfg)

    # Load everything first to report coverage, then enforce requirements.
    everything = load_prices(data)
    header = [c for c in _csv_columns(data) if c != _csv_columns(data)[0]]
    dropped = [c for c in header if c not in everything.tickers]

    required = list(cfg.assets) if cfg.assets is not None else None
    if getattr(args, "manifest", None):
        required = list(read_manifest(args.manifest))
    if required is not None:
        load_prices(data, required)  # raises when a required asset is unusable

    default_universe = default_asset_manifest()
    summary = {
        "file": str(data),
        "sha256": _file_sha256(data),
        "rows": everything.n_days,
        "date_range": [str(everything.calendar[0]),
                       str(everything.calendar[-1])],
        "complete_assets": list(everything.tickers),
        "dropped_assets": dropped,
        "required_assets": required,
        "default_manifest_coverage":
            sum(t in everything.tickers for t in default_universe),
    }
    summary_path = out_dir / "ingest_summary.json"
    summary_path.write_text(json.dumps(summary, indent=2) + "\n",
                            encoding="utf-8")

    print(f"{data}: {everything.n_days} trading days, "
          f"{len(everything.tickers)} complete assets "
          f"({summary['date_range'][0]} .. {summary['date_range'][1]})")
    if dropped:
        print(f"dropped (missing data): {', '.join(dropped)}")
    return 0 if _artifacts_ok([summary_path]) else 1


def _csv_columns(path: str | Path) -> list[str]:
    with open(path, newline="", encoding="utf-8") as handle:
        try:
            return next(csv.reader(handle))
        except StopIteration:
            raise MarketDataError(f"{path}: empty file") from None


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    specs = cfg.select_experiments(args.experiment)
    out_dir = Path(cfg.output_dir)
    _write_manifest(out_dir, "train", cfg,
                    experiments=[s.name for s in specs])
    series = _load_series(cfg)

    agent_cfg = cfg.agent
    n, M = cfg.env.n_assets, agent_cfg.window_periods
    K = cfg.env.days_per_period
    artifacts: list[Path] = []
    for spec in specs:
        exp_dir = out_dir / f"exp{spec.name}"
        exp_dir.mkdir(parents=True, exist_ok=True)
        train_prices = slice_training(series, spec)
        env = TradingEnv(train_prices, cfg.env, M, agent_cfg.sigma_timing)
        seeds = experiment_seeds(cfg.seed, spec.name)
        train_cfg = replace(cfg.train, seed=seeds["train_seed"])

        aux = AuxiliaryPolicy.create(n, M, K, agent_cfg.hidden,
                                     seeds["aux_init"], agent_cfg.weight_bound)
        aux_record = train_auxiliary(env, aux, agent_cfg, train_cfg)

        executive = ExecutivePolicy.create(n, M, K, agent_cfg.hidden,
                                           seeds["actor_init"],
                                           agent_cfg.residual_bound)
        critic = Critic.create(n, M, K, agent_cfg.hidden, seeds["critic_init"])
        result = train_executive(env, aux, executive, critic, agent_cfg,
                                 train_cfg)

        aux_csv = exp_dir / "tracking_aux.csv"
        exec_csv = exp_dir / "tracking_exec.csv"
        aux_record.write_csv(aux_csv)
        result.record.write_csv(exec_csv)
        ckpt_dir = exp_dir / "checkpoints"
        save_bundle(ckpt_dir, fingerprint=checkpoint_fingerprint(cfg),
                    aux=aux, executive=result.executive, critic=result.critic,
                    target_actor=result.target_actor,
                    target_critic=result.target_critic)
        artifacts += [aux_csv, exec_csv, ckpt_dir / "bundle.json"]
        final = result.record.entries[-1] if result.record.entries else None
        status = (f"ARD={final.cum_reward:.4f} NPR={final.periods_positive_reward}"
                  if final else "no executive rounds")
        print(f"experiment {spec.name}: trained over {env.horizon} periods; "
              f"{status}")
    return 0 if _artifacts_ok(artifacts) else 1


# ---------------------------------------------------------------------------
# backtest
# ---------------------------------------------------------------------------

def _strategies_for(mode: str, cfg: RunConfig, exp_name: str, out_dir: Path):
    n = cfg.env.n_assets
    equal = np.full(n, 1.0 / n)
    if mode == "baselines":
        return [("UBAH", strategy_ubah(equal)), ("CRP", strategy_crp(equal))]
    ckpt_dir = out_dir / f"exp{exp_name}" / "checkpoints"
    bundle = load_bundle(ckpt_dir, checkpoint_fingerprint(cfg))
    aux = bundle.get("aux")
    executive = bundle.get("executive")
    if mode in ("full", "lsv1") and aux is None:
        raise BacktestError(f"mode {mode!r} needs an auxiliary checkpoint in "
                            f"{ckpt_dir}")
    if mode in ("full", "lsv2") and executive is None:
        raise BacktestError(f"mode {mode!r} needs an executive checkpoint in "
                            f"{ckpt_dir}")
    return [(mode, ablation_mode(mode, aux, executive))]


def cmd_backtest(args) -> int:
    cfg = _resolve_config(args)
    specs = cfg.select_experiments(args.experiment)
    out_dir = Path(cfg.output_dir)
    _write_manifest(out_dir, "backtest", cfg, mode=args.mode,
                    experiments=[s.name for s in specs])
    series = _load_series(cfg)

    report_rows = []
    daily_rows = []
    artifacts: list[Path] = []
    for spec in specs:
        for name, strategy in _strategies_for(args.mode, cfg, spec.name, out_dir):
            result = run_backtest(strategy, series, spec, cfg.env,
                                  cfg.agent.window_periods,
                                  cfg.agent.sigma_timing)
            report_rows.append((spec.name, name, result.metrics))
            daily_rows.append((spec.name, name, result))
            period_csv = out_dir / f"periods_exp{spec.name}_{name}.csv"
            write_period_log(result.outcomes, period_csv)
            artifacts.append(period_csv)
            flag = " [truncated: bankruptcy]" if result.metrics.truncated else ""
            print(f"experiment {spec.name} {name}: "
                  f"AR={result.metrics.accumulated_return:.6f}{flag}")

    report_csv = out_dir / "report.csv"
    daily_csv = out_dir / "daily_returns.csv"
    _merge_csv(report_csv, lambda sink: write_report_csv(report_rows, sink),
               replaced={(e, s) for e, s, _ in report_rows})
    _merge_csv(daily_csv, lambda sink: write_daily_csv(daily_rows, sink),
               replaced={(e, s) for e, s, _ in daily_rows})
    artifacts += [report_csv, daily_csv]
    return 0 if _artifacts_ok(artifacts) else 1


def _merge_csv(path: Path, render_new, replaced: set[tuple[str, str]]) -> None:
    """Overwrite rows for the freshly evaluated (experiment, strategy)
    pairs, keep everything else, and write the union sorted by key.
    Successive invocations thereby accumulate one comparison table."""
    import io

    sink = io.StringIO()
    render_new(sink)
    new_lines = sink.getvalue().splitlines()
    header, new_rows = new_lines[0], new_lines[1:]
    kept: list[str] = []
    if path.exists():
        old_lines = path.read_text(encoding="utf-8").splitlines()
        for line in old_lines[1:]:
            key = tuple(next(csv.reader([line]))[:2])
            if key not in replaced:
                kept.append(line)

    def sort_key(line: str):
        cells = next(csv.reader([line]))
        # Daily rows carry a numeric day column third; report rows do not.
        day = int(cells[2]) if len(cells) > 2 and cells[2].isdigit() else 0
        return (cells[0], cells[1], day)

    body = sorted(kept + new_rows, key=sort_key)
    path.write_text("\r\n".join([header, *body]) + "\r\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _read_report_rows(path: Path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as handle:
        for record in csv.DictReader(handle):
            row: dict = {"experiment": record["experiment"],
                         "strategy": record["strategy"]}
            for metric in REPORT_HEADER[2:]:
                cell = record[metric]
                row[metric] = None if cell == "undefined" else float(cell)
            rows.append(row)
    return rows


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir) if args.run_dir else Path(
        _resolve_config(args).output_dir)
    report_csv = run_dir / "report.csv"
    if not report_csv.exists():
        print(f"error: no report.csv under {run_dir}; run `hrlport backtest` "
              "first", file=sys.stderr)
        return 1
    report_dir = run_dir / "report"
    _write_manifest(report_dir, "report", None, run_dir=str(run_dir))

    from . import plots  # matplotlib import deferred to the command

    rows = _read_report_rows(report_csv)
    experiments = sorted({row["experiment"] for row in rows})
    artifacts: list[Path] = []
    for experiment in experiments:
        exp_rows = [r for r in rows if r["experiment"] == experiment]
        best = mark_best(exp_rows)
        out_csv = report_dir / f"consolidated_exp{experiment}.csv"
        with open(out_csv, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow([*REPORT_HEADER, "best_in"])
            for i, row in enumerate(exp_rows):
                marks = sorted(m for m, winners in best.items() if i in winners)
                writer.writerow([
                    row["experiment"], row["strategy"],
                    *("undefined" if row[m] is None else repr(row[m])
                      for m in REPORT_HEADER[2:]),
                    ";".join(marks),
                ])
        artifacts.append(out_csv)
        _print_table(experiment, exp_rows, best)

        figures = report_dir / "figures"
        daily_csv = run_dir / "daily_returns.csv"
        if daily_csv.exists():
            artifacts.append(plots.plot_cumulative_returns(
                daily_csv, figures / f"cumulative_exp{experiment}.png",
                experiment))
        artifacts.append(plots.plot_risk_return(
            report_csv, figures / f"risk_return_exp{experiment}.png",
            experiment))
        for phase in ("aux", "exec"):
            tracking = run_dir / f"exp{experiment}" / f"tracking_{phase}.csv"
            if tracking.exists():
                artifacts.append(plots.plot_tracking(
                    tracking, figures / f"tracking_exp{experiment}_{phase}.png",
                    title=f"Experiment {experiment} ({phase} phase)"))
    return 0 if _artifacts_ok(artifacts) else 1


def _print_table(experiment: str, rows: list[dict], best: dict) -> None:
    print(f"\nexperiment {experiment}")
    header = ["strategy", *REPORT_HEADER[2:]]
    print("  " + "  ".join(f"{h:>10}" for h in header))
    for i, row in enumerate(rows):
        cells = [f"{row['strategy']:>10}"]
        for metric in REPORT_HEADER[2:]:
            value = row[metric]
            text = "undefined" if value is None else f"{value:.4f}"
            if i in best.get(metric, set()):
                text += "*"
            cells.append(f"{text:>10}")
        print("  " + "  ".join(cells))


if __name__ == "__main__":
    sys.exit(main())
