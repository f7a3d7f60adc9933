"""Run configuration: nested frozen dataclasses loaded strictly from JSON.

Every key is optional (defaults fill in), but unknown keys are rejected at
every nesting level. ``to_dict``/``from_dict`` round-trip exactly, so the
snapshot written next to a run reloads to the identical effective config.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from .env import EnvConfig
from .errors import ConfigError
from .intrinsic import IntrinsicConfig
from .policy_opt import SCHEDULES, PpoCoeffs, SmoothCoeffs
from .terrain import Terrain, TerrainKind, TerrainParams

VARIANTS = ("ppo", "ecim", "ecim_minus_aecpom", "ecim_minus_mcrf", "ecim_minus_imdeem")
BASELINE_BETA = 0.01


@dataclass(frozen=True)
class EntropyConfig:
    schedule: str = "return_proportional"
    beta_max: float = 0.02
    tau: int = 128
    r_max: typing.Optional[float] = None
    fixed_beta: float = BASELINE_BETA


@dataclass(frozen=True)
class NetConfig:
    hidden: tuple = (64, 64)
    init_log_std: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "ecim"
    terrain: str = "flat"
    terrain_params: TerrainParams = field(default_factory=TerrainParams)
    env: EnvConfig = field(default_factory=EnvConfig)
    n_envs: int = 64
    rollout_steps: int = 400
    iterations: int = 300
    seeds: tuple = (0, 1, 2, 3, 4)
    eval_interval: int = 10
    eval_episodes: int = 5
    steps_window: int = 10
    ppo: PpoCoeffs = field(default_factory=PpoCoeffs)
    smooth: SmoothCoeffs = field(default_factory=SmoothCoeffs)
    entropy: EntropyConfig = field(default_factory=EntropyConfig)
    intrinsic: IntrinsicConfig = field(default_factory=IntrinsicConfig)
    net: NetConfig = field(default_factory=NetConfig)
    output_dir: str = "runs"

    def validate(self) -> "TrainConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        try:
            TerrainKind(self.terrain)
        except ValueError:
            raise ConfigError(f"unknown terrain {self.terrain!r}") from None
        self.terrain_params.validate()
        self.env.validate()
        self.ppo.validate()
        self.smooth.validate()
        self.intrinsic.validate()
        if self.entropy.schedule not in SCHEDULES:
            raise ConfigError(f"unknown entropy schedule {self.entropy.schedule!r}")
        if self.entropy.tau < 1 or self.entropy.beta_max < 0 or self.entropy.fixed_beta < 0:
            raise ConfigError("entropy settings out of range")
        if self.entropy.r_max is not None and self.entropy.r_max <= 0:
            raise ConfigError("entropy.r_max must be positive when given")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.n_envs < 1 or self.rollout_steps < 1:
            raise ConfigError("n_envs and rollout_steps must be >= 1")
        if self.n_envs * self.rollout_steps < self.ppo.minibatches:
            raise ConfigError("fewer samples per iteration than minibatches")
        if self.eval_interval < 1 or self.eval_episodes < 1 or self.steps_window < 1:
            raise ConfigError("eval_interval, eval_episodes and steps_window must be >= 1")
        if not self.net.hidden or any(int(h) < 1 for h in self.net.hidden):
            raise ConfigError("net.hidden must list positive layer widths")
        return self

    def terrain_spec(self) -> Terrain:
        return Terrain(TerrainKind(self.terrain), self.terrain_params)


def apply_variant(cfg: TrainConfig, variant: str | None = None) -> TrainConfig:
    """Effective config for an ablation variant (idempotent).

    ppo: fixed entropy weight, no smoothness terms, no bonuses.
    ecim_minus_aecpom: fixed entropy weight. ecim_minus_mcrf: no smoothness
    terms. ecim_minus_imdeem: no bonuses. ecim: unchanged.
    """
    variant = cfg.variant if variant is None else variant
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    fixed = replace(cfg.entropy, schedule="fixed", fixed_beta=BASELINE_BETA)
    no_smooth = replace(cfg.smooth, lambda_t=0.0, lambda_s=0.0)
    no_bonus = replace(cfg.intrinsic, eta_icm=0.0, eta_rnd=0.0, eta_cnt=0.0)
    out = replace(cfg, variant=variant)
    if variant == "ppo":
        out = replace(out, entropy=fixed, smooth=no_smooth, intrinsic=no_bonus)
    elif variant == "ecim_minus_aecpom":
        out = replace(out, entropy=fixed)
    elif variant == "ecim_minus_mcrf":
        out = replace(out, smooth=no_smooth)
    elif variant == "ecim_minus_imdeem":
        out = replace(out, intrinsic=no_bonus)
    return out


# ---------------------------------------------------------------------------
# (De)serialization
# ---------------------------------------------------------------------------


def to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            value = to_dict(value)
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def _coerce(name: str, tp, value):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{name}: expected an object")
        return _from_dict(tp, value, prefix=name + ".")
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(name, args[0], value)
    if tp is tuple or tp == "tuple":
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list")
        return tuple(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string")
        return value
    return value


def _from_dict(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {k: _coerce(prefix + k, hints[k], v) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def from_dict(data: dict) -> TrainConfig:
    return _from_dict(TrainConfig, data).validate()


def load_config(path: str | Path) -> TrainConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_dict(data)


def dump_config(cfg: TrainConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))
