"""Run configuration: nested dataclasses with a JSON file format.

Every field has a default, so an empty file is a valid config; file
values override defaults and command-line overrides (dotted paths)
override the file. Parsing then serializing then parsing again is the
identity. The config hash used for checkpoint pairing and plot
grouping is a sha256 over the canonical JSON with ``seed`` and
``out_dir`` removed, so sibling seeds of one experiment share a hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

from .envs import GridConfig
from .errors import ConfigError
from .nets import NetworkConfig
from .planner import PlannerConfig
from .search_tree import MvcParams


@dataclass
class TrainConfig:
    episodes: int = 300
    buffer_capacity: int = 256          # trajectories
    min_buffer: int = 8                 # episodes before updates start
    batch_size: int = 32
    unroll_steps: int = 5
    bootstrap_steps: int = 5
    lr: float = 3e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_value: float = 0.25
    weight_reward: float = 1.0
    weight_policy: float = 1.0
    train_steps_per_env_step: float = 1.0
    max_grad_norm: float = 5.0          # 0 disables clipping
    temp_initial: float = 1.0
    temp_final: float = 0.25
    temp_switch: float = 0.5            # fraction of episodes
    log_every: int = 10                 # episodes per metrics row
    checkpoint_every: int = 500         # gradient steps
    # Wall-clock timing in metrics breaks run-to-run byte equality, so
    # it is opt-in; with it off the plan_ms column is written as 0.
    log_timing: bool = False

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigError("episodes must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.unroll_steps < 1:
            raise ConfigError("unroll_steps must be positive")
        if self.bootstrap_steps < 1:
            raise ConfigError("bootstrap_steps must be positive")
        if not 0.0 <= self.temp_switch <= 1.0:
            raise ConfigError("temp_switch must lie in [0, 1]")


@dataclass
class EnvConfig:
    kind: str = "grid"                  # "grid" or "chain"
    grid: GridConfig = field(default_factory=GridConfig)
    chain_length: int = 6

    def __post_init__(self):
        if self.kind not in ("grid", "chain"):
            raise ConfigError(f"unknown env kind '{self.kind}'")


@dataclass
class BenchConfig:
    num_simulations: int = 2
    layers: list = field(default_factory=lambda: [1, 2])
    repetitions: int = 15
    warmup: int = 3
    threads: int = 1                    # data-parallel width pinned during timing
    include_counts_baseline: bool = True

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigError("repetitions must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be positive")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    eval_episodes: int = 100
    env: EnvConfig = field(default_factory=EnvConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)


_NESTED = {
    EnvConfig: {"grid": GridConfig},
    RunConfig: {
        "env": EnvConfig,
        "network": NetworkConfig,
        "planner": PlannerConfig,
        "training": TrainConfig,
        "bench": BenchConfig,
    },
    PlannerConfig: {"mvc": MvcParams},
}


def _build(cls, data: dict, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    nested = _NESTED.get(cls, {})
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"{where}: unknown config field")
        if key in nested:
            kwargs[key] = _build(nested[key], value, where)
        else:
            kwargs[key] = _check_type(known[key], value, where)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}")


def _check_type(f, value, where: str):
    ann = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    if ann in ("int",):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected int, got {value!r}")
    elif ann in ("float",):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected number, got {value!r}")
        value = float(value)
    elif ann in ("bool",):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected bool, got {value!r}")
    elif ann in ("str",):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected string, got {value!r}")
    elif ann in ("int | None", "Optional[int]"):
        if value is not None and (isinstance(value, bool)
                                  or not isinstance(value, int)):
            raise ConfigError(f"{where}: expected int or null, got {value!r}")
    elif ann == "list":
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected list, got {value!r}")
    return value


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config_file(path, overrides=()) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    data = apply_overrides(data, overrides)
    return config_from_dict(data)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings on top of a config dict."""
    data = json.loads(json.dumps(data))  # deep copy
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        target = data
        for key in keys[:-1]:
            target = target.setdefault(key, {})
            if not isinstance(target, dict):
                raise ConfigError(f"override '{dotted}' crosses a non-object")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings need no quotes
        target[keys[-1]] = value
    return data


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_hash(cfg: RunConfig) -> str:
    """Identity of the experiment: everything but seed and out_dir."""
    data = config_to_dict(cfg)
    data.pop("seed", None)
    data.pop("out_dir", None)
    canon = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def build_env(cfg: RunConfig):
    from .envs import ChainEnv, LavaGrid

    if cfg.env.kind == "grid":
        return LavaGrid(cfg.env.grid)
    return ChainEnv(cfg.env.chain_length)


def resolved_network_config(cfg: RunConfig) -> NetworkConfig:
    """Network config with obs_dim / num_actions taken from the env."""
    env = build_env(cfg)
    return dataclasses.replace(
        cfg.network, obs_dim=env.observation_dim, num_actions=env.num_actions,
    )
