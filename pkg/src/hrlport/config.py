"""
Declarative run configuration.

One JSON file (all sections optional) merged over the built-in defaults,
then overridden by CLI flags: flags > file > defaults.  The root seed is
the only entropy source; the training loops and network initializers all
derive from it.  A structural fingerprint (dimensions and action bounds)
guards checkpoint compatibility; the full configuration is serialized
verbatim into every run manifest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .agents import AgentConfig
from .backtest import ExperimentSpec, experiment_schedule
from .trading_env import EnvConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Raised on malformed configuration files or overrides."""


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig
    agent: AgentConfig
    train: TrainConfig
    experiments: tuple[ExperimentSpec, ...]
    data_path: str | None
    output_dir: str
    assets: tuple[str, ...] | None      # None: packaged DJIA manifest
    seed: int

    def experiment(self, name: str) -> ExperimentSpec:
        for spec in self.experiments:
            if spec.name == name:
                return spec
        raise ConfigError(f"no experiment named {name!r} in the configuration")

    def select_experiments(self, which: str) -> tuple[ExperimentSpec, ...]:
        if which == "all":
            return self.experiments
        return (self.experiment(which),)


def default_run_config() -> RunConfig:
    return RunConfig(
        env=EnvConfig(),
        agent=AgentConfig(),
        train=TrainConfig(),
        experiments=experiment_schedule(),
        data_path=None,
        output_dir="runs",
        assets=None,
        seed=0,
    )


def _merge_dataclass(instance, section: dict, label: str):
    valid = set(instance.__dataclass_fields__)
    unknown = set(section) - valid
    if unknown:
        raise ConfigError(f"unknown {label} option(s): {sorted(unknown)}")
    if "hidden" in section:
        section = {**section, "hidden": tuple(section["hidden"])}
    try:
        return replace(instance, **section)
    except (TypeError, ValueError, RuntimeError) as exc:
        raise ConfigError(f"invalid {label} configuration: {exc}") from exc


def _parse_experiments(raw: list[dict]) -> tuple[ExperimentSpec, ...]:
    specs = []
    for entry in raw:
        try:
            specs.append(ExperimentSpec(
                name=str(entry["name"]),
                train_start=np.datetime64(entry["train_start"], "D"),
                train_end=np.datetime64(entry["train_end"], "D"),
                test_start=np.datetime64(entry["test_start"], "D"),
                test_days=int(entry.get("test_days", 120)),
            ))
        except KeyError as exc:
            raise ConfigError(f"experiment entry missing key {exc}") from exc
    if not specs:
        raise ConfigError("experiments list cannot be empty")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError("experiment names must be unique")
    return tuple(specs)


def load_config(path: str | Path | None = None, *, data: str | None = None,
                out: str | None = None, seed: int | None = None) -> RunConfig:
    """Defaults, overlaid by the file at ``path``, overlaid by flags."""
    cfg = default_run_config()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw: dict[str, Any] = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        known = {"env", "agent", "train", "experiments", "data", "out",
                 "assets", "seed"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown top-level option(s): {sorted(unknown)}")
        cfg = replace(
            cfg,
            env=_merge_dataclass(cfg.env, raw.get("env", {}), "env"),
            agent=_merge_dataclass(cfg.agent, raw.get("agent", {}), "agent"),
            train=_merge_dataclass(cfg.train, raw.get("train", {}), "train"),
            experiments=(_parse_experiments(raw["experiments"])
                         if "experiments" in raw else cfg.experiments),
            data_path=raw.get("data", cfg.data_path),
            output_dir=raw.get("out", cfg.output_dir),
            assets=tuple(raw["assets"]) if "assets" in raw else cfg.assets,
            seed=int(raw.get("seed", cfg.seed)),
        )
    if data is not None:
        cfg = replace(cfg, data_path=data)
    if out is not None:
        cfg = replace(cfg, output_dir=out)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    # One root seed drives everything, including the training loops.
    cfg = replace(cfg, train=replace(cfg.train, seed=cfg.seed))
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    """JSON-ready verbatim serialization (manifest payload)."""
    return {
        "env": asdict(cfg.env),
        "agent": {**asdict(cfg.agent), "hidden": list(cfg.agent.hidden)},
        "train": asdict(cfg.train),
        "experiments": [
            {"name": s.name, "train_start": str(s.train_start),
             "train_end": str(s.train_end), "test_start": str(s.test_start),
             "test_days": s.test_days}
            for s in cfg.experiments
        ],
        "data": cfg.data_path,
        "out": cfg.output_dir,
        "assets": list(cfg.assets) if cfg.assets is not None else None,
        "seed": cfg.seed,
    }


def _canonical(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


def config_fingerprint(cfg: RunConfig) -> str:
    """Hash of the full configuration (recorded in run manifests)."""
    return hashlib.sha256(_canonical(config_to_dict(cfg))).hexdigest()


def checkpoint_fingerprint(cfg: RunConfig) -> str:
    """Hash of the structural subset a checkpoint must agree on: network
    dimensions and action bounds."""
    payload = {
        "n_assets": cfg.env.n_assets,
        "days_per_period": cfg.env.days_per_period,
        "window_periods": cfg.agent.window_periods,
        "hidden": list(cfg.agent.hidden),
        "weight_bound": cfg.agent.weight_bound,
        "residual_bound": cfg.agent.residual_bound,
    }
    return hashlib.sha256(_canonical(payload)).hexdigest()


def experiment_seeds(root_seed: int, experiment_name: str) -> dict[str, Any]:
    """Deterministic per-experiment entropy: three initializer generators
    plus an integer seed for the training loops."""
    tag = int.from_bytes(hashlib.sha256(experiment_name.encode()).digest()[:4],
                         "big")
    seq = np.random.SeedSequence([root_seed, tag])
    children = seq.spawn(4)
    return {
        "aux_init": np.random.default_rng(children[0]),
        "actor_init": np.random.default_rng(children[1]),
        "critic_init": np.random.default_rng(children[2]),
        "train_seed": int(children[3].generate_state(1)[0]),
    }
