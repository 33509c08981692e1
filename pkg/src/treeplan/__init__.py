"""Tree search planning with batched subtree expansion.

A small, numpy-only research package: a transformer dynamics model
whose attention mask mirrors the search tree, a mean-variance tree
evaluator in place of visit counts, matched sequential reference modes
for equivalence checks and timing, two toy environments, and a full
self-play training loop behind one CLI.
"""

from .bench import BenchRow, check_pair_equivalence, run_bench, speedup_report
from .config import (
    BenchConfig, EnvConfig, RunConfig, TrainConfig, build_env,
    config_from_dict, config_hash, config_to_dict, load_config_file,
    resolved_network_config, save_config,
)
from .envs import ChainEnv, ExactChainModel, GridConfig, LavaGrid
from .errors import (
    BenchEquivalenceError, CapacityError, ConfigError, MaskError, ShapeError,
    StructureError, TrainError, TreeplanError, UsageError,
)
from .nets import NetworkBundle, NetworkConfig, init_network
from .planner import MODES, PlanResult, PlannerConfig, act, plan
from .search_tree import MvcParams, SearchTree
from .training import ReplayBuffer, Trajectory, TrainResult, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BenchConfig", "BenchEquivalenceError", "BenchRow", "CapacityError",
    "ChainEnv", "ConfigError", "EnvConfig", "ExactChainModel", "GridConfig",
    "LavaGrid", "MODES", "MaskError", "MvcParams", "NetworkBundle",
    "NetworkConfig", "PlanResult", "PlannerConfig", "ReplayBuffer",
    "RunConfig", "SearchTree", "ShapeError", "StructureError", "TrainConfig",
    "TrainError", "TrainResult", "Trajectory", "TreeplanError", "UsageError",
    "act", "build_env", "check_pair_equivalence", "config_from_dict",
    "config_hash", "config_to_dict", "evaluate", "init_network",
    "load_config_file", "plan", "resolved_network_config", "run_bench",
    "save_config", "speedup_report", "train",
]
