"""Run configuration."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from ..errors import ConfigError, DomainError
from ..optim import OptimConfig

STRATEGIES = ("grpo", "root-only-extra", "deep-grpo", "uniform-pivot", "expand-all", "tree-dispersed")
BRANCHING = ("deep-grpo", "uniform-pivot", "expand-all")
EVAL_MODES = ("greedy", "sample", "exact")


@dataclass(frozen=True)
class RunConfig:
    # environment
    env_kind: str = "planted"
    depth: int = 12
    arity: int = 4
    correct_fraction: float = 1e-3
    env_seed: int | None = None
    fixture: str = "appendix-a"
    n_prompts: int = 1
    # strategy
    strategy: str = "deep-grpo"
    G: int = 8
    K: int = 8
    pivots: int = 1
    extra: int = 0
    tree_pivots: int = 4
    tree_branches: int = 2
    gamma: float = 2.0
    segment_len: int = 2
    # optimization
    optim: OptimConfig = field(default_factory=OptimConfig)
    policy_init: str = "uniform"
    init_scale: float = 1.0
    # estimator
    estimator_capacity: int = 4096
    estimator_epochs: int = 50
    estimator_lr: float = 0.5
    estimator_every: int = 1
    # schedule and output
    steps: int = 400
    max_rollouts: int | None = None
    eval_every: int = 20
    eval_mode: str = "greedy"
    eval_samples: int = 64
    seeds: tuple[int, ...] = (0,)
    metrics_path: str | None = None
    metrics_format: str = "csv"
    rollout_log: str | None = None
    record_wall_time: bool = False

    def __post_init__(self):
        try:
            self.validate()
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc

    def validate(self) -> None:
        if self.env_kind not in ("planted", "fixture"):
            raise ConfigError(f"env_kind must be 'planted' or 'fixture', got {self.env_kind!r}")
        if self.env_kind == "fixture" and self.n_prompts != 1:
            raise ConfigError("fixture environments support a single prompt")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.eval_mode not in EVAL_MODES:
            raise ConfigError(f"eval_mode must be one of {EVAL_MODES}")
        if self.metrics_format not in ("csv", "jsonl"):
            raise ConfigError("metrics_format must be csv or jsonl")
        for name in ("G",):
            if getattr(self, name) < 2:
                raise ConfigError(f"{name} must be >= 2")
        for name in ("K", "pivots", "tree_pivots", "tree_branches", "segment_len", "n_prompts",
                     "estimator_capacity", "estimator_every", "eval_every", "eval_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.steps < 0 or self.extra < 0:
            raise ConfigError("steps and extra must be non-negative")
        if self.max_rollouts is not None and self.max_rollouts < 1:
            raise ConfigError("max_rollouts must be positive")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    @property
    def branching(self) -> bool:
        return self.strategy in BRANCHING

    @property
    def learns_estimator(self) -> bool:
        return self.strategy in ("deep-grpo", "expand-all")

    @property
    def effective_gamma(self) -> float:
        return 0.0 if self.strategy == "uniform-pivot" else self.gamma

    @property
    def root_rollouts(self) -> int:
        return self.G + (self.extra if self.strategy == "root-only-extra" else 0)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["seeds"] = list(self.seeds)
        return out


OPTIM_FIELDS = {f.name for f in fields(OptimConfig)}
RUN_FIELDS = {f.name for f in fields(RunConfig)} - {"optim"}
ALIASES = {"lambda": "lam"}


def _coerce(template: Any, value: Any, name: str) -> Any:
    if value is None:
        return None
    if isinstance(template, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{name}: not a boolean: {value!r}")
        return bool(value)
    try:
        if isinstance(template, int):
            return int(value)
        if isinstance(template, float):
            return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    if isinstance(template, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split()]
        return tuple(int(v) for v in value)
    return value


def override(config: RunConfig, key: str, value: Any) -> RunConfig:
    """Return ``config`` with one field replaced; accepts ``optim.x``, bare optimizer names and ``lambda``."""
    key = key.replace("-", "_")
    key = key.split(".", 1)[1] if key.startswith("optim.") else key
    key = ALIASES.get(key, key)
    try:
        if key in OPTIM_FIELDS:
            cur = getattr(config.optim, key)
            return replace(config, optim=replace(config.optim, **{key: _coerce(cur, value, key)}))
        if key in RUN_FIELDS:
            cur = getattr(config, key)
            if key in ("env_seed", "max_rollouts"):
                value = None if value in (None, "none", "None", "") else int(value)
                return replace(config, **{key: value})
            if cur is None:
                return replace(config, **{key: value})
            return replace(config, **{key: _coerce(cur, value, key)})
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown config field {key!r}")


def from_dict(doc: dict, base: RunConfig | None = None) -> RunConfig:
    config = base or RunConfig()
    for key, value in doc.items():
        if key == "optim":
            for k, v in value.items():
                config = override(config, k, v)
        else:
            config = override(config, key, value)
    return config


def load_config(path: str | Path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return from_dict(doc)


def budget(config: RunConfig, n_selected: int) -> int:
    """Rollouts spent in one step when ``n_selected`` trajectories are branched."""
    if config.strategy == "tree-dispersed":
        return config.G + n_selected * config.tree_pivots * config.tree_branches
    if config.branching:
        return config.G + n_selected * config.pivots * config.K
    return config.root_rollouts
