"""Run configuration: YAML sections layered over per-experiment presets.

Every section is a dataclass; keys that do not name a field are rejected
before anything runs.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from ..solver import ConfigError, ScheduleConfig

EXPERIMENTS = ("toy", "blr", "bias-rate", "gradcheck", "recurrence")


@dataclass
class ModelSection:
    eps_dim: int = 3
    eps_var: float = 1.0
    hidden: tuple = (50, 50)
    activation: str = "relu"
    full_cov: bool = False
    init_log_std: float = 0.0
    init_seed: int = 1
    # separate constants for the covariance block; None keeps one group
    cov_C_alpha: Optional[float] = None
    cov_C_gamma: Optional[float] = None


@dataclass
class EvalSection:
    grid: int = 100
    extent: Optional[tuple] = None  # (xmin, xmax, ymin, ymax)
    n_samples: int = 10_000
    kl_mix: int = 2_000
    seed: int = 12345


@dataclass
class SyntheticSection:
    N: int = 200
    D: int = 2
    seed: int = 0


@dataclass
class McmcSection:
    steps: int = 1_000_000
    seed: int = 0


@dataclass
class FixtureSection:
    n: int = 4
    p: int = 2
    kappa: float = 1.0
    noise: float = 0.5
    coupled: float = 0.0
    seed: int = 0


@dataclass
class BiasSection:
    reps: int = 50
    checkpoints: tuple = (10, 100, 1000, 10000)
    freeze_theta: bool = False
    workers: int = 1
    fixture: FixtureSection = field(default_factory=FixtureSection)


@dataclass
class GradcheckSection:
    trials: int = 100
    tol: float = 1e-4
    seed: int = 0


@dataclass
class RunConfig:
    experiment: str = "toy"
    seed: int = 0
    deterministic: bool = False
    target: str = "two-modal"
    data: Optional[str] = None  # BLR csv; the synthetic section is used when absent
    n: int = 1024
    out: Optional[str] = None
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelSection = field(default_factory=ModelSection)
    eval: EvalSection = field(default_factory=EvalSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    mcmc: McmcSection = field(default_factory=McmcSection)
    bias: BiasSection = field(default_factory=BiasSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schedule"] = self.schedule.to_dict()
        return _plain(d)

    def digest(self) -> str:
        """Hash of everything that affects results (the output path does not)."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


# ----------------------------------------------------------------- presets

PRESETS: dict[str, dict] = {
    "toy": {
        "n": 1024,
        "schedule": {
            "C_alpha": 3e-4, "C_beta": 0.99, "C1": 100, "C2": 1000, "C_gamma": 0.9, "mu": 0.999,
            "T": 200, "constant_batches": True, "output": "final",
        },
    },
    "blr": {
        "n": 1000,
        "model": {
            "eps_dim": 3, "eps_var": 100.0, "hidden": [200, 200], "full_cov": True,
            "cov_C_alpha": 0.2, "cov_C_gamma": 0.6,
        },
        "schedule": {
            "C_alpha": 1.5e-4, "C_beta": 0.999, "C1": 50, "C2": 500, "C_gamma": 0.7, "mu": 0.999,
            "T": 600, "constant_batches": True, "output": "final",
        },
    },
    "bias-rate": {
        "schedule": {"C_alpha": 0.05, "C_beta": 0.5, "C1": 0.5, "C2": 0.5, "C_gamma": 0.9, "mu": 0.99, "T": 10000},
    },
    "gradcheck": {},
    "recurrence": {},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _coerce(value, default, annotation: str, where: str):
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    # YAML 1.1 reads "3e-4" (no dot) as a string
    if isinstance(value, str) and "float" in annotation:
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {value!r}") from None
    return value


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    proto = cls()
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        current = getattr(proto, key)
        path = f"{where}.{key}" if where else key
        if dataclasses.is_dataclass(current):
            kwargs[key] = _build(type(current), value, path)
        else:
            kwargs[key] = _coerce(value, current, str(names[key].type), path)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def build_config(raw: Optional[dict] = None, experiment: Optional[str] = None, **overrides) -> RunConfig:
    """Validate ``raw``, layer it over the preset for its experiment, apply overrides."""
    raw = dict(raw or {})
    if experiment is not None:
        if raw.get("experiment", experiment) != experiment:
            raise ConfigError(f"config is for {raw['experiment']!r}, command runs {experiment!r}")
        raw["experiment"] = experiment
    exp = raw.get("experiment", "toy")
    if exp not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {exp!r}")
    merged = _merge(PRESETS[exp], raw)
    for key, value in overrides.items():
        if value is None:
            continue
        node = merged
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    cfg = _build(RunConfig, merged, "")
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.n < 1:
        raise ConfigError("pool size n must be at least 1")
    if cfg.experiment == "toy" and cfg.target not in ("two-modal", "star", "banana"):
        raise ConfigError(f"unknown toy target {cfg.target!r}")
    if cfg.eval.grid < 2:
        raise ConfigError("eval.grid must be at least 2")
    if cfg.eval.extent is not None and len(cfg.eval.extent) != 4:
        raise ConfigError("eval.extent needs four numbers")
    if cfg.bias.reps < 1 or any(int(c) < 1 for c in cfg.bias.checkpoints):
        raise ConfigError("bias.reps and checkpoints must be positive")
    if (cfg.model.cov_C_alpha is None) != (cfg.model.cov_C_gamma is None):
        raise ConfigError("model.cov_C_alpha and model.cov_C_gamma go together")


def load_config(path, experiment: Optional[str] = None, **overrides) -> RunConfig:
    text = Path(path).read_text()
    raw = yaml.safe_load(text) or {}
    return build_config(raw, experiment, **overrides)
