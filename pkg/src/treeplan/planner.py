"""Search over a learned model, expanding whole subtrees per step.

Three modes share one tree and one model interface:

* ``parallel_mvc``: each simulation picks a frontier node by the
  variance-guided selection rule and expands a full subtree of
  ``subtree_layers`` levels below it with a single dynamics call; the
  ancestor mask lets the network compute every new latent at once.
* ``seq_mvc``: the same node schedule, but nodes are expanded one per
  simulation with an individual dynamics call each, and statistics are
  refreshed when a subtree completes. With matched budgets the two
  modes produce the same tree and the same statistics, which is what
  makes their wall-clock comparison meaningful.
* ``seq_counts``: the classic baseline: one node per simulation,
  visit counts, mean-value backups and the count-based selection rule.

The model is anything with ``represent(obs)``, ``forward_tokens(root,
actions, depths, parents)`` and ``predict(latents)``; see
``nets.NetworkBundle`` for the learned one.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError
from .search_tree import (
    MvcParams, SearchTree, backup_depth_parallel, mvc_policy,
    node_value_estimate, normalize_q, puct_select, _unexpanded_q,
)

MODES = ("parallel_mvc", "seq_mvc", "seq_counts")


@dataclass
class PlannerConfig:
    mode: str = "parallel_mvc"
    num_simulations: int = 4
    # Depth of the subtree grown per selection; in seq_mvc the same
    # subtree is grown one node per simulation.
    subtree_layers: int = 2
    temperature: float = 1.0         # applied to the visit-count policy
    mvc: MvcParams = field(default_factory=MvcParams)
    dirichlet_alpha: float = 0.3
    dirichlet_fraction: float = 0.25
    max_depth: int | None = None
    max_nodes: int = 100_000

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(
                f"unknown mode '{self.mode}'; expected one of {MODES}"
            )
        if self.num_simulations < 0:
            raise ConfigError("num_simulations must be non-negative")
        if self.subtree_layers < 1:
            raise ConfigError("subtree_layers must be at least 1")
        if self.temperature < 0:
            raise ConfigError("temperature must be non-negative")
        if not 0.0 <= self.dirichlet_fraction <= 1.0:
            raise ConfigError("dirichlet_fraction must lie in [0, 1]")


@dataclass
class PlanResult:
    root_policy: np.ndarray
    root_value: float
    nodes_created: int
    num_simulations: int
    wall_time: float
    truncated_expansions: int
    tree: SearchTree

    @property
    def nodes_per_simulation(self) -> float:
        if self.num_simulations == 0:
            return 0.0
        return self.nodes_created / self.num_simulations


def expand_parallel(tree: SearchTree, node_id: int, layers: int, model) -> list[int]:
    """Grow a full ``layers``-deep subtree below ``node_id`` in one call.

    The token sequence holds the actions from the tree root to the
    target node followed by one action per subtree node in creation
    order, each tagged with its absolute tree depth; the ancestor mask
    restricts attention to root-to-node paths. Every new node gets its
    latent from the shared forward pass and (reward, value, prior) from
    one batched prediction. Existing nodes keep their latents.
    """
    new_ids = tree.add_subtree_nodes(node_id, layers)
    path_ids = list(reversed(tree.ancestors(node_id)))  # root ... parent
    ordered = path_ids + [node_id] + new_ids if node_id != 0 \
        else [node_id] + new_ids
    token_nodes = ordered[1:]  # token 0 is the root latent itself
    actions = [tree.nodes[nid].action for nid in token_nodes]
    depths = [tree.nodes[nid].depth for nid in token_nodes]
    parents = tree.parent_positions(ordered)
    latents = model.forward_tokens(tree.latents[0], actions, depths, parents)
    first_new = len(ordered) - len(new_ids)
    sub_latents = latents[first_new:]
    values, rewards, priors = model.predict(sub_latents)
    for i, nid in enumerate(new_ids):
        tree.latents[nid] = sub_latents[i]
        node = tree.nodes[nid]
        node.reward = float(rewards[i])
        node.value = float(values[i])
        node.prior = priors[i]
        node.evaluated = True
    return new_ids


def expand_sequential(tree: SearchTree, node_id: int, action: int, model) -> int:
    """Add the single child ``action`` below ``node_id``.

    Runs the dynamics network over the root-to-child action path alone,
    so cost grows with depth; this is the one-node-at-a-time reference
    the batched expansion is measured against.
    """
    cid = tree.add_child(node_id, action)
    path = tree.path_actions(cid)
    depths = list(range(1, len(path) + 1))
    parents = list(range(len(path)))
    latents = model.forward_tokens(tree.latents[0], path, depths, parents)
    latent = latents[-1]
    values, rewards, priors = model.predict(latent[None, :])
    tree.latents[cid] = latent
    node = tree.nodes[cid]
    node.reward = float(rewards[0])
    node.value = float(values[0])
    node.prior = priors[0]
    node.evaluated = True
    return cid


def _descend(tree: SearchTree, params: MvcParams) -> int:
    """Walk selection down to the first node that is not fully expanded."""
    nid = 0
    while tree.nodes[nid].fully_expanded():
        action = puct_select(tree, nid, params)
        nid = tree.nodes[nid].children[action]
    return nid


def _layers_within(cfg: PlannerConfig, depth: int) -> int:
    if cfg.max_depth is None:
        return cfg.subtree_layers
    return min(cfg.subtree_layers, cfg.max_depth - depth)


@dataclass
class _Group:
    """Pending one-node-at-a-time expansion of a chosen subtree."""
    root_id: int
    queue: deque
    target_depth: int


def _counts_bounds(tree: SearchTree, gamma: float):
    lo, hi = np.inf, -np.inf
    for node in tree.nodes:
        if node.parent is None or node.visits == 0:
            continue
        q = node.reward + gamma * node.value_sum / node.visits
        lo = min(lo, q)
        hi = max(hi, q)
    return lo, hi


def _select_counts(tree: SearchTree, node_id: int, params: MvcParams) -> int:
    """Count-based selection: q plus c * prior * sqrt(N) / (1 + n_a)."""
    node = tree.nodes[node_id]
    bounds = _counts_bounds(tree, params.gamma) if params.normalize_q \
        else (np.inf, -np.inf)
    total_visits = sum(
        tree.nodes[c].visits for c in node.child_ids())
    scores = np.empty(tree.num_actions, dtype=np.float64)
    for action in range(tree.num_actions):
        cid = node.children[action]
        prior = float(node.prior[action])
        if cid is not None and tree.nodes[cid].visits > 0:
            child = tree.nodes[cid]
            q = child.reward + params.gamma * child.value_sum / child.visits
            qhat = normalize_q(q, bounds)
            visits = child.visits
        else:
            qhat = _unexpanded_q(bounds)
            visits = 0
        bonus = params.c_puct * prior * np.sqrt(total_visits) / (1 + visits)
        scores[action] = qhat + bonus
    return int(np.argmax(scores))


def _backup_counts(tree: SearchTree, path: list[int], gamma: float) -> None:
    value = tree.nodes[path[-1]].value
    for nid in reversed(path):
        node = tree.nodes[nid]
        node.value_sum += value
        node.visits += 1
        value = node.reward + gamma * value


def plan(observation, model, cfg: PlannerConfig,
         rng: np.random.Generator | None = None) -> PlanResult:
    """Run a full search from ``observation`` and return the root summary.

    Passing ``rng`` enables root exploration noise; with ``rng=None``
    the prior is used as-is and the search is fully deterministic.
    The returned policy covers real actions only: the evaluator's
    stop-weight is dropped and the rest renormalized. With a budget of
    zero simulations the prior itself is returned.
    """
    t0 = time.perf_counter()
    params = cfg.mvc
    num_actions = model.num_actions
    root_latent = model.represent(observation)
    values, _, priors = model.predict(root_latent[None, :])
    prior = priors[0]
    if rng is not None and cfg.dirichlet_fraction > 0.0:
        noise = rng.dirichlet([cfg.dirichlet_alpha] * num_actions)
        prior = (1.0 - cfg.dirichlet_fraction) * prior \
            + cfg.dirichlet_fraction * noise
    tree = SearchTree(num_actions, max_nodes=cfg.max_nodes)
    tree.add_root(root_latent, reward=0.0, value=float(values[0]), prior=prior)
    truncated = 0

    if cfg.mode == "parallel_mvc":
        for _ in range(cfg.num_simulations):
            target = _descend(tree, params)
            layers = _layers_within(cfg, tree.nodes[target].depth)
            if layers < 1:
                truncated += 1
                continue
            if layers < cfg.subtree_layers:
                truncated += 1
            expand_parallel(tree, target, layers, model)
            backup_depth_parallel(tree, target, params)
    elif cfg.mode == "seq_mvc":
        group = None
        for _ in range(cfg.num_simulations):
            if group is None:
                target = _descend(tree, params)
                layers = _layers_within(cfg, tree.nodes[target].depth)
                if layers < 1:
                    truncated += 1
                    continue
                if layers < cfg.subtree_layers:
                    truncated += 1
                group = _Group(target, deque([target]),
                               tree.nodes[target].depth + layers)
            pid = group.queue[0]
            parent = tree.nodes[pid]
            action = parent.children.index(None)
            cid = expand_sequential(tree, pid, action, model)
            if tree.nodes[cid].depth < group.target_depth:
                group.queue.append(cid)
            if parent.fully_expanded():
                group.queue.popleft()
            if not group.queue:
                backup_depth_parallel(tree, group.root_id, params)
                group = None
        if group is not None:
            # budget ran out mid-subtree: fold in what exists
            backup_depth_parallel(tree, group.root_id, params)
    else:  # seq_counts
        for _ in range(cfg.num_simulations):
            nid = 0
            path = [0]
            while True:
                action = _select_counts(tree, nid, params)
                cid = tree.nodes[nid].children[action]
                if cid is None:
                    cid = expand_sequential(tree, nid, action, model)
                    path.append(cid)
                    break
                nid = cid
                path.append(cid)
            _backup_counts(tree, path, params.gamma)

    root = tree.nodes[0]
    if cfg.mode == "seq_counts":
        counts = np.array([
            0.0 if c is None else float(tree.nodes[c].visits)
            for c in root.children])
        if counts.sum() > 0:
            if cfg.temperature < 1e-3:
                policy = np.zeros(num_actions)
                policy[int(np.argmax(counts))] = 1.0
            else:
                powered = counts ** (1.0 / cfg.temperature)
                policy = powered / powered.sum()
            root_value = root.value_sum / root.visits if root.visits else root.value
        else:
            policy = prior.copy()
            root_value = root.value
    else:
        if root.q_valid:
            full = mvc_policy(tree, 0, params)
            real = full[:num_actions]
            if real.sum() > 1e-12:
                policy = real / real.sum()
            else:
                policy = prior.copy()
            root_value = node_value_estimate(tree, 0, params)
        else:
            policy = prior.copy()
            root_value = root.value
    return PlanResult(
        root_policy=policy,
        root_value=float(root_value),
        nodes_created=len(tree) - 1,
        num_simulations=cfg.num_simulations,
        wall_time=time.perf_counter() - t0,
        truncated_expansions=truncated,
        tree=tree,
    )


def act(result: PlanResult, temperature: float,
        rng: np.random.Generator | None = None) -> int:
    """Sample an action from the root policy tempered by 1/temperature.

    Temperatures below 1e-3 mean argmax (ties to the lowest action id)
    and need no rng.
    """
    policy = result.root_policy
    if temperature < 1e-3:
        return int(np.argmax(policy))
    if rng is None:
        raise UsageError("sampling with temperature > 0 requires an rng")
    powered = policy ** (1.0 / temperature)
    total = powered.sum()
    if total <= 0:
        raise UsageError("root policy has no mass to sample from")
    return int(rng.choice(len(policy), p=powered / total))
