"""Experiment configuration: JSON in, validated dataclasses out.

Every section is optional and falls back to the desk-scale defaults; unknown
keys anywhere are rejected so that typos fail loudly.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .algorithms import ALGORITHMS, HyperParams
from .models import ModelSpec
from .tasks import TaskDistributionConfig

SEED_ENV = "METALAND_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSection:
    hidden_dims: tuple = (64, 64)
    input_dim: int | None = None


@dataclass(frozen=True)
class EpisodeSection:
    n_way: int = 5
    k_shot: int = 1
    targets_per_class: int = 15


@dataclass(frozen=True)
class EvalSection:
    flatness_tasks: int = 60
    coherence_tasks: int = 500
    fixed_eval: bool = True
    power_tol: float = 1e-6
    power_max_iters: int = 500


@dataclass(frozen=True)
class BaselineSection:
    batch_size: int = 64
    iterations_per_epoch: int = 25


@dataclass(frozen=True)
class SeedSection:
    master: int = 0
    eval: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = "maml"
    model: ModelSection = ModelSection()
    tasks: TaskDistributionConfig = TaskDistributionConfig()
    episode: EpisodeSection = EpisodeSection()
    hyper: HyperParams = HyperParams()
    baseline: BaselineSection = BaselineSection()
    epochs: int = 25
    iterations_per_epoch: int = 100
    eval: EvalSection = EvalSection()
    seeds: SeedSection = SeedSection()
    output_dir: str = "runs/default"

    def model_spec(self) -> ModelSpec:
        """Architecture used during training (baseline head spans all train classes)."""
        n_way = self.tasks.n_train_classes if self.algorithm == "finetune" else self.episode.n_way
        return ModelSpec(self.tasks.input_dim, tuple(self.model.hidden_dims), n_way)

    def effective_hyper(self) -> HyperParams:
        if self.algorithm == "fomaml":
            return replace(self.hyper, order="first", gamma=0.0)
        if self.algorithm in ("maml", "finetune"):
            return replace(self.hyper, gamma=0.0)
        return self.hyper

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["hidden_dims"] = list(self.model.hidden_dims)
        return d


_SECTIONS = {
    "model": ModelSection,
    "tasks": TaskDistributionConfig,
    "episode": EpisodeSection,
    "hyper": HyperParams,
    "baseline": BaselineSection,
    "eval": EvalSection,
    "seeds": SeedSection,
}

# named scale presets; explicit keys in the file win
PROFILES = {
    "desk": {"epochs": 25, "iterations_per_epoch": 100},
    "paper": {"epochs": 100, "iterations_per_epoch": 500},
}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; valid keys are {sorted(known)}")
    kwargs = {}
    for name, value in data.items():
        if name in ("hidden_dims",):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from None


def from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    profile = data.pop("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    data = {**PROFILES[profile], **data}
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}; valid keys are {sorted(top | {'profile'})}")
    kwargs = {}
    for name, value in data.items():
        if name in _SECTIONS:
            kwargs[name] = _build(_SECTIONS[name], value, name)
        else:
            kwargs[name] = value
    cfg = ExperimentConfig(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.algorithm not in ALGORITHMS:
        raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {cfg.algorithm!r}")
    if cfg.model.input_dim is not None and cfg.model.input_dim != cfg.tasks.input_dim:
        raise ConfigError(f"model.input_dim={cfg.model.input_dim} but tasks.input_dim={cfg.tasks.input_dim}")
    if cfg.algorithm in ("maml", "fomaml") and cfg.hyper.gamma != 0:
        raise ConfigError(f"hyper.gamma is only used by maml_reg, got {cfg.hyper.gamma} for {cfg.algorithm}")
    if cfg.algorithm == "maml_reg" and cfg.hyper.n < 2:
        raise ConfigError("maml_reg needs hyper.n >= 2")
    if cfg.epochs < 0 or cfg.iterations_per_epoch < 0:
        raise ConfigError("epochs and iterations_per_epoch must be >= 0")
    ep = cfg.episode
    if ep.n_way < 2 or ep.k_shot < 1 or ep.targets_per_class < 1:
        raise ConfigError(f"invalid episode shape {ep}")
    if ep.n_way > min(cfg.tasks.n_train_classes, cfg.tasks.n_test_classes):
        raise ConfigError(f"{ep.n_way}-way episodes need at least that many classes in each split")
    ev = cfg.eval
    if ev.flatness_tasks < 0 or ev.coherence_tasks < 2:
        raise ConfigError("eval.flatness_tasks must be >= 0 and eval.coherence_tasks >= 2")
    if ev.power_tol <= 0 or ev.power_max_iters < 1:
        raise ConfigError("eval.power_tol must be > 0 and eval.power_max_iters >= 1")
    if cfg.baseline.batch_size < 1 or cfg.baseline.iterations_per_epoch < 0:
        raise ConfigError("invalid baseline section")
    if any(int(h) < 1 for h in cfg.model.hidden_dims):
        raise ConfigError("hidden_dims must be positive")


def load(path, env: bool = True) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from None
    cfg = from_dict(data)
    return apply_env(cfg) if env else cfg


def apply_env(cfg: ExperimentConfig) -> ExperimentConfig:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
    return replace(cfg, seeds=replace(cfg.seeds, master=seed))
