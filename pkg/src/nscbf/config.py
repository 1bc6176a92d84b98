"""Run configuration: a strict YAML schema covering system selection,
training hyperparameters, and evaluation settings.

Unknown keys are rejected at every nesting level so a typo never silently
falls back to a default. A fully resolved copy (defaults filled in) is
echoed into the output directory, and a short hash of that resolved form
identifies the run in artifact headers.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field, fields

import yaml

from .learner import TrainConfig
from .systems import SystemModel, make_system, perturb_dynamics

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class SystemConfig:
    name: str = "inverted_pendulum"
    inertia_scale: float = 1.0
    noise_stddev: float = 0.0
    use_feature_map: bool = True
    overrides: dict = field(default_factory=dict)  # extra make_system kwargs

    def validate(self):
        if self.name not in ("inverted_pendulum", "quadpend"):
            raise ConfigError(f"unknown system '{self.name}'")
        if self.inertia_scale <= 0:
            raise ConfigError("inertia_scale must be > 0")
        if self.noise_stddev < 0:
            raise ConfigError("noise_stddev must be >= 0")
        if not isinstance(self.overrides, dict):
            raise ConfigError("system.overrides must be a mapping")
        return self


@dataclass
class EvalConfig:
    boundary_samples: int = 10_000
    worst_batch: int = 2_000
    worst_steps: int = 20
    volume_samples: int = 200_000
    fi_rollouts: int = 500
    nominal: str = "k_lqr"
    dt: float = 0.002
    horizon: float = 10.0
    seed: int = 0
    slice_dims: tuple = (0, 1)
    slice_resolution: int = 201
    noise_sweep: tuple = (0.0,)
    inertia_sweep: tuple = (1.0,)

    def validate(self):
        if min(self.boundary_samples, self.worst_batch, self.volume_samples,
               self.fi_rollouts) < 1:
            raise ConfigError("evaluation sample counts must be >= 1")
        if self.nominal not in ("k0", "k_lqr", "k_lqr_agg"):
            raise ConfigError(f"unknown nominal controller '{self.nominal}'")
        if self.dt <= 0 or self.horizon <= 0:
            raise ConfigError("dt and horizon must be > 0")
        if self.slice_resolution < 2:
            raise ConfigError("slice_resolution must be >= 2")
        if len(self.slice_dims) != 2:
            raise ConfigError("slice_dims must name two state coordinates")
        if any(s < 0 for s in self.noise_sweep) or \
                any(s <= 0 for s in self.inertia_sweep):
            raise ConfigError("sweep values out of range")
        return self


@dataclass
class RunConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = "runs/default"
    schema_version: int = CONFIG_SCHEMA_VERSION

    def validate(self):
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(
                f"unsupported config schema_version {self.schema_version}")
        self.system.validate()
        try:
            self.train.validate()
        except ValueError as e:
            raise ConfigError(f"train: {e}") from e
        self.eval.validate()
        return self


_LIST_FIELDS = {"hidden", "slice_dims", "noise_sweep", "inertia_sweep"}


def _build(cls, data, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(
                f"unknown key '{path}{key}'; known keys: "
                + ", ".join(sorted(known)))
        sub = {"system": SystemConfig, "train": TrainConfig,
               "eval": EvalConfig}.get(key)
        if sub is not None:
            value = _build(sub, value, f"{path}{key}.")
        elif key in _LIST_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"'{path}{key}' must be a list")
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_config(path: str) -> RunConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
    return _build(RunConfig, data, "").validate()


def resolved_dict(cfg: RunConfig) -> dict:
    out = dataclasses.asdict(cfg)

    def fix(obj):
        if isinstance(obj, dict):
            return {k: fix(v) for k, v in obj.items()}
        if isinstance(obj, tuple):
            return [fix(v) for v in obj]
        return obj
    return fix(out)


def resolved_yaml(cfg: RunConfig) -> str:
    return yaml.safe_dump(resolved_dict(cfg), sort_keys=True,
                          default_flow_style=False)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(resolved_yaml(cfg).encode()).hexdigest()[:12]


def write_resolved(cfg: RunConfig, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "resolved_config.yaml")
    with open(path, "w") as fh:
        fh.write(resolved_yaml(cfg))
    return path


def build_system(sc: SystemConfig, inertia_scale: float = None,
                 noise_stddev: float = None) -> SystemModel:
    """Instantiate the configured plant, optionally overriding the physical
    perturbations (used by rollout sweeps)."""
    scale = sc.inertia_scale if inertia_scale is None else inertia_scale
    noise = sc.noise_stddev if noise_stddev is None else noise_stddev
    kwargs = dict(sc.overrides)
    if sc.name == "quadpend":
        kwargs.setdefault("use_feature_map", sc.use_feature_map)
        kwargs["inertia_scale"] = scale
    elif scale != 1.0:
        # the toy's inertia enters through m l^2: scale the pendulum mass
        kwargs["m_p"] = kwargs.get("m_p", 1.0) * scale
    try:
        sys = make_system(sc.name, **kwargs)
    except TypeError as e:
        raise ConfigError(f"system.overrides: {e}") from e
    return perturb_dynamics(sys, noise) if noise > 0 else sys
