"""Experiment configuration: a versioned JSON document.

Top-level keys (all optional except ``version``)::

    {
      "format": "stnas-config", "version": 1,
      "seed": 0, "precision": 32,
      "task": {SyntheticTaskSpec fields; "seed" defaults to the run seed},
      "network": {"preset": "toy"} or NetSpec fields (a preset may be combined
                 with "hidden" / "dropout_p" overrides),
      "estimator": {"kind": "st" | "darts" | "snas", "tau", "tau_decay", "tau_floor"},
      "warmup" | "search" | "retrain": {"batch_size", "lr", "lr_final", "decay",
                 "patience", "max_epochs", "betas", "eps"},
      "retrain_val_fraction": 0.05,
      "memory": {"batch": 8, "frames": 60}
    }

Unknown keys anywhere raise :class:`ConfigError`.
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .autodiff import ContractError
from .estimators import EstimatorConfig
from .search import StageConfig, retrain_config, search_config, warmup_config
from .supernet import NetSpec, preset
from .tasks import SyntheticTaskSpec

FORMAT = "stnas-config"
VERSION = 1


class ConfigError(ValueError):
    pass


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _reject_unknown(section: str, d: dict, allowed: set[str]) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{section} must be an object")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    precision: int = 32
    task: dict = field(default_factory=dict)
    network: dict = field(default_factory=lambda: {"preset": "toy"})
    estimator: dict = field(default_factory=dict)
    warmup: dict = field(default_factory=dict)
    search: dict = field(default_factory=dict)
    retrain: dict = field(default_factory=dict)
    retrain_val_fraction: float = 0.05
    memory: dict = field(default_factory=lambda: {"batch": 8, "frames": 60})

    # ------------------------------------------------------------- resolution

    def task_spec(self) -> SyntheticTaskSpec:
        d = dict(self.task)
        d.setdefault("seed", self.seed)
        return SyntheticTaskSpec(**d)

    def net_spec(self) -> NetSpec:
        d = dict(self.network)
        t = self.task_spec()
        if "preset" in d:
            name = d.pop("preset")
            spec = preset(name, input_dim=t.input_dim, output_dim=t.vocab)
            for k, v in d.items():
                setattr(spec, k, v)
            spec.init_seed = d.get("init_seed", self.seed)
            return NetSpec.from_dict(spec.to_dict())
        d.setdefault("input_dim", t.input_dim)
        d.setdefault("output_dim", t.vocab)
        d.setdefault("init_seed", self.seed)
        return NetSpec(**d)

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(**self.estimator)

    def stage(self, name: str) -> StageConfig:
        make = {"warmup": warmup_config, "search": search_config, "retrain": retrain_config}[name]
        return make(**getattr(self, name))

    # ---------------------------------------------------------- validation

    def validate(self) -> "ExperimentConfig":
        """Build every component once so errors surface before any compute."""
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if not 0.0 < self.retrain_val_fraction < 1.0:
            raise ConfigError("retrain_val_fraction must lie in (0, 1)")
        _reject_unknown("task", self.task, _fields(SyntheticTaskSpec))
        _reject_unknown("network", self.network, _fields(NetSpec) | {"preset"})
        _reject_unknown("estimator", self.estimator, _fields(EstimatorConfig))
        for name in ("warmup", "search", "retrain"):
            _reject_unknown(name, getattr(self, name), _fields(StageConfig) - {"stage"})
        _reject_unknown("memory", self.memory, {"batch", "frames"})
        try:
            self.task_spec().validate()
            self.net_spec()
            self.estimator_config()
            for name in ("warmup", "search", "retrain"):
                self.stage(name)
        except (ContractError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    # ------------------------------------------------------------ documents

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        if d.pop("format", FORMAT) != FORMAT:
            raise ConfigError(f"format must be {FORMAT!r}")
        version = d.pop("version", None)
        if version != VERSION:
            raise ConfigError(f"unsupported config version {version!r} (expected {VERSION})")
        _reject_unknown("config", d, _fields(cls))
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return {"format": FORMAT, "version": VERSION, **dataclasses.asdict(self)}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(copy.deepcopy(self), **kw).validate()


def load_config(path) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(d)


def planted_context_config(seed: int = 0, **overrides) -> ExperimentConfig:
    """Desk-scale preset: one WSJ-candidate block on a half-width-2 planted task."""
    base = dict(
        seed=seed,
        task={"kind": "planted-context", "vocab": 2, "t_min": 24, "t_max": 24, "input_dim": 4,
              "num_items": 600, "num_test": 200, "required_half_width": 2, "noise": 0.1},
        network={"preset": "toy"},
        warmup={"batch_size": 32, "max_epochs": 100},
        search={"batch_size": 32, "max_epochs": 60},
        retrain={"batch_size": 32, "max_epochs": 100},
    )
    base.update(overrides)
    return ExperimentConfig(**base).validate()


def desk_config(seed: int = 0, **overrides) -> ExperimentConfig:
    """Six searching blocks (WSJ candidates, width 32) on a frame-classification task."""
    base = dict(
        seed=seed,
        task={"kind": "frame-classification", "vocab": 5, "t_min": 30, "t_max": 60, "input_dim": 8,
              "num_items": 1000, "num_test": 100, "noise": 0.5},
        network={"preset": "desk", "dropout_p": 0.1},
        warmup={"batch_size": 32, "max_epochs": 30},
        search={"batch_size": 32, "max_epochs": 30},
        retrain={"batch_size": 32, "max_epochs": 60},
    )
    base.update(overrides)
    return ExperimentConfig(**base).validate()
