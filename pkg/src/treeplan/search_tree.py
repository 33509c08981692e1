"""Search tree storage and the variance-weighted evaluation rules.

Nodes live in a flat append-only list; children reference parents by
index and a depth index groups node ids by depth so whole depth levels
can be recomputed together. Latents are stored in a parallel list
aligned with node ids.

Evaluation replaces visit counts: each node carries an action-value
``q`` and a variance ``variance``, and the tree policy at a node
weights every evaluated child (plus the node's own value estimate,
treated as one extra pseudo-action) by inverse variance times
exp(beta * normalized q). Backups recompute (q, variance) bottom-up
from the current tree only, so the result is independent of the order
in which the tree was grown. Q normalization uses the (min, max) over
the q values currently in the tree, frozen per backup pass; that keeps
a batched depth-sweep and a one-node-at-a-time sweep exactly equal.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ConfigError, StructureError


@dataclass
class MvcParams:
    """Evaluator constants shared by backups and selection.

    beta is the inverse temperature on normalized q in the tree policy:
    beta -> 0 recovers pure inverse-variance weighting, large beta
    concentrates on the best child. reward_variance and value_variance
    are the leaf uncertainty constants; with a deterministic model the
    reward contributes no variance and the value head contributes a
    unit of it.
    """

    beta: float = 1.0
    c_puct: float = 1.25
    gamma: float = 0.997
    reward_variance: float = 0.0
    value_variance: float = 1.0
    normalize_q: bool = True

    def __post_init__(self):
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if self.c_puct <= 0:
            raise ConfigError("c_puct must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.reward_variance < 0:
            raise ConfigError("reward_variance must be non-negative")
        if self.value_variance <= 0:
            raise ConfigError("value_variance must be positive")


@dataclass
class SearchNode:
    parent: int | None
    action: int | None
    depth: int
    reward: float = 0.0
    value: float = 0.0
    prior: np.ndarray | None = None
    evaluated: bool = False          # network stats (reward/value/prior) set
    children: list = field(default_factory=list)  # one slot per action
    q: float = 0.0
    variance: float = 1.0
    q_valid: bool = False            # q/variance written by a backup
    visits: int = 0                  # visit-count mode only
    value_sum: float = 0.0           # visit-count mode only

    def child_ids(self):
        return [c for c in self.children if c is not None]

    def fully_expanded(self) -> bool:
        return all(c is not None for c in self.children)

    def is_leaf(self) -> bool:
        return all(c is None for c in self.children)


class SearchTree:
    """Flat node store with a depth index and aligned latent storage."""

    def __init__(self, num_actions: int, max_nodes: int = 100_000):
        if num_actions < 1:
            raise ConfigError("num_actions must be at least 1")
        self.num_actions = num_actions
        self.max_nodes = max_nodes
        self.nodes: list[SearchNode] = []
        self.latents: list = []
        self.depth_index: dict[int, list[int]] = {}

    def __len__(self):
        return len(self.nodes)

    def _append(self, node: SearchNode, latent) -> int:
        if len(self.nodes) >= self.max_nodes:
            raise CapacityError(
                f"tree capacity {self.max_nodes} exceeded at {len(self.nodes)} nodes"
            )
        nid = len(self.nodes)
        self.nodes.append(node)
        self.latents.append(latent)
        self.depth_index.setdefault(node.depth, []).append(nid)
        return nid

    def add_root(self, latent, reward: float = 0.0, value: float = 0.0,
                 prior: np.ndarray | None = None, evaluated: bool = True) -> int:
        if self.nodes:
            raise StructureError("tree already has a root")
        node = SearchNode(parent=None, action=None, depth=0,
                          reward=float(reward), value=float(value),
                          prior=None if prior is None else np.asarray(prior, dtype=np.float64),
                          evaluated=evaluated,
                          children=[None] * self.num_actions)
        return self._append(node, latent)

    def add_child(self, parent_id: int, action: int, latent=None) -> int:
        parent = self.nodes[parent_id]
        if not 0 <= action < self.num_actions:
            raise StructureError(f"action {action} out of range")
        if parent.children[action] is not None:
            raise StructureError(
                f"node {parent_id} already has a child for action {action}"
            )
        node = SearchNode(parent=parent_id, action=action,
                          depth=parent.depth + 1,
                          children=[None] * self.num_actions)
        nid = self._append(node, latent)
        parent.children[action] = nid
        return nid

    def add_subtree_nodes(self, root_id: int, layers: int) -> list[int]:
        """Add every node of a full ``layers``-deep subtree under root_id.

        Nodes are appended in breadth-first order (all depth-1 children
        for actions 0..A-1, then depth 2, ...), so parents always
        precede children in the returned id list. The target node must
        not have any children yet.
        """
        if layers < 1:
            raise StructureError("subtree must have at least one layer")
        base = self.nodes[root_id]
        if not base.is_leaf():
            raise StructureError(
                f"node {root_id} already has children; cannot add a subtree"
            )
        needed = sum(self.num_actions ** k for k in range(1, layers + 1))
        if len(self.nodes) + needed > self.max_nodes:
            raise CapacityError(
                f"tree capacity {self.max_nodes} exceeded: have "
                f"{len(self.nodes)} nodes, subtree adds {needed}"
            )
        new_ids = []
        frontier = [root_id]
        for _ in range(layers):
            next_frontier = []
            for pid in frontier:
                for action in range(self.num_actions):
                    cid = self.add_child(pid, action)
                    new_ids.append(cid)
                    next_frontier.append(cid)
            frontier = next_frontier
        return new_ids

    def path_actions(self, node_id: int) -> list[int]:
        """Actions leading from the tree root to ``node_id``."""
        actions = []
        nid = node_id
        while self.nodes[nid].parent is not None:
            actions.append(self.nodes[nid].action)
            nid = self.nodes[nid].parent
        actions.reverse()
        return actions

    def ancestors(self, node_id: int) -> list[int]:
        """Parent chain from node_id's parent up to the root."""
        out = []
        nid = self.nodes[node_id].parent
        while nid is not None:
            out.append(nid)
            nid = self.nodes[nid].parent
        return out

    def descendants(self, node_id: int) -> list[int]:
        """All nodes strictly below node_id, breadth-first."""
        out = []
        frontier = [node_id]
        while frontier:
            nxt = []
            for nid in frontier:
                for cid in self.nodes[nid].child_ids():
                    out.append(cid)
                    nxt.append(cid)
            frontier = nxt
        return out

    def parent_positions(self, node_ids) -> list[int]:
        """Per-token parent positions for ``ancestor_mask``.

        ``node_ids[0]`` is the token holding the root latent; for every
        later node its parent must appear earlier in the list.
        """
        pos = {nid: i for i, nid in enumerate(node_ids)}
        parents = []
        for i, nid in enumerate(node_ids[1:], start=1):
            parent = self.nodes[nid].parent
            if parent is None or parent not in pos or pos[parent] >= i:
                raise StructureError(
                    f"node {nid} has no earlier parent in the token list"
                )
            parents.append(pos[parent])
        return parents

    def q_bounds(self):
        """(min, max) over the q values currently written in the tree."""
        lo, hi = np.inf, -np.inf
        for node in self.nodes:
            if node.q_valid:
                if node.q < lo:
                    lo = node.q
                if node.q > hi:
                    hi = node.q
        return lo, hi

    def dump(self) -> str:
        """Debug text rendering, one node per line."""
        params = MvcParams()
        bounds = self.q_bounds()
        buf = io.StringIO()
        for nid, node in enumerate(self.nodes):
            prior = "-" if node.prior is None else \
                "[" + " ".join(f"{p:.4f}" for p in node.prior) + "]"
            ready = node.evaluated and all(
                self.nodes[c].q_valid for c in node.child_ids()
                if self.nodes[c].evaluated)
            if ready:
                pol = mvc_policy(self, nid, params, q_bounds=bounds)
                pol_s = "[" + " ".join(f"{p:.4f}" for p in pol) + "]"
            else:
                pol_s = "-"
            buf.write(
                f"id={nid} parent={node.parent} action={node.action} "
                f"depth={node.depth} r={node.reward:.6f} v={node.value:.6f} "
                f"q={node.q:.6f} var={node.variance:.6f} "
                f"prior={prior} policy={pol_s}\n"
            )
        return buf.getvalue()


def normalize_q(q: float, bounds) -> float:
    """Min-max normalize ``q``; identity when the bounds do not spread."""
    lo, hi = bounds
    if hi > lo:
        return (q - lo) / (hi - lo)
    return q


def _unexpanded_q(bounds) -> float:
    # midpoint of the normalized range, or 0 when normalization is idle
    lo, hi = bounds
    return 0.5 if hi > lo else 0.0


def mvc_policy(tree: SearchTree, node_id: int, params: MvcParams,
               q_bounds=None) -> np.ndarray:
    """Tree policy over the extended action set at ``node_id``.

    Returns an array of length num_actions + 1; the trailing entry is
    the weight of stopping at the node's own value estimate. Children
    without statistics get exactly zero. A node with no evaluated
    children is a leaf and puts all mass on the trailing entry.
    Computed in log space so large beta cannot overflow.
    """
    node = tree.nodes[node_id]
    if not params.normalize_q:
        bounds = (np.inf, -np.inf)
    else:
        bounds = tree.q_bounds() if q_bounds is None else q_bounds
    a = tree.num_actions
    out = np.zeros(a + 1, dtype=np.float64)
    entries = []  # (slot, log weight)
    for action, cid in enumerate(node.children):
        if cid is None:
            continue
        child = tree.nodes[cid]
        if not child.evaluated:
            continue
        if not child.q_valid:
            raise StructureError(
                f"child {cid} of node {node_id} has no backed-up statistics"
            )
        qn = normalize_q(child.q, bounds)
        entries.append((action, params.beta * qn - np.log(child.variance)))
    if not entries:
        out[a] = 1.0
        return out
    vn = normalize_q(node.value, bounds)
    entries.append((a, params.beta * vn - np.log(params.value_variance)))
    logw = np.array([w for _, w in entries])
    w = np.exp(logw - logw.max())
    w /= w.sum()
    for (slot, _), weight in zip(entries, w):
        out[slot] = weight
    return out


def q_backup(tree: SearchTree, node_id: int, params: MvcParams,
             q_bounds=None) -> None:
    """Recompute (q, variance) of one node from its children.

    Children that carry statistics must be up to date. A leaf mixes
    only its own value estimate: q = r + gamma * v and the variance
    floor reward_variance + gamma^2 * value_variance. An inner node
    mixes children according to the tree policy; the variance contracts
    by the sum of squared policy weights.
    """
    node = tree.nodes[node_id]
    if not node.evaluated:
        raise StructureError(f"node {node_id} has no network statistics")
    if q_bounds is None:
        q_bounds = tree.q_bounds()
    pol = mvc_policy(tree, node_id, params, q_bounds=q_bounds)
    g = params.gamma
    q_mix = pol[tree.num_actions] * node.value
    var_mix = pol[tree.num_actions] ** 2 * params.value_variance
    for action, cid in enumerate(node.children):
        weight = pol[action]
        if weight == 0.0 or cid is None:
            continue
        child = tree.nodes[cid]
        q_mix += weight * child.q
        var_mix += weight**2 * child.variance
    node.q = node.reward + g * q_mix
    node.variance = params.reward_variance + g**2 * var_mix
    node.q_valid = True


def backup_depth_parallel(tree: SearchTree, subtree_root_id: int,
                          params: MvcParams) -> None:
    """Refresh statistics below and above ``subtree_root_id``.

    Sweeps the subtree one depth level at a time from the deepest layer
    up (nodes within a level are independent, so a level could be done
    data-parallel), then walks the ancestor chain to the tree root.
    The q normalization bounds are frozen once at entry, which makes
    the result identical to backing the same nodes up one at a time in
    post-order.
    """
    bounds = tree.q_bounds()
    by_depth: dict[int, list[int]] = {}
    for nid in tree.descendants(subtree_root_id):
        if tree.nodes[nid].evaluated:
            by_depth.setdefault(tree.nodes[nid].depth, []).append(nid)
    for depth in sorted(by_depth, reverse=True):
        for nid in by_depth[depth]:
            q_backup(tree, nid, params, q_bounds=bounds)
    q_backup(tree, subtree_root_id, params, q_bounds=bounds)
    for nid in tree.ancestors(subtree_root_id):
        q_backup(tree, nid, params, q_bounds=bounds)


def puct_select(tree: SearchTree, node_id: int, params: MvcParams) -> int:
    """Pick the real action maximizing q plus a variance-guided bonus.

    The exploration bonus divides the prior-scaled parent precision by
    one plus the child precision, so well-resolved children (low
    variance, high precision) stop attracting exploration. Children
    without statistics score the normalized midpoint plus the full
    bonus. Ties break toward the lowest action id.
    """
    node = tree.nodes[node_id]
    if node.prior is None:
        raise StructureError(f"node {node_id} has no prior; cannot select")
    if not node.q_valid:
        raise StructureError(
            f"node {node_id} has no backed-up statistics; cannot select"
        )
    bounds = tree.q_bounds() if params.normalize_q else (np.inf, -np.inf)
    parent_precision = 1.0 / node.variance
    scores = np.empty(tree.num_actions, dtype=np.float64)
    for action in range(tree.num_actions):
        cid = node.children[action]
        prior = float(node.prior[action])
        if cid is not None and tree.nodes[cid].q_valid:
            child = tree.nodes[cid]
            qhat = normalize_q(child.q, bounds)
            bonus = params.c_puct * prior * np.sqrt(parent_precision) \
                / (1.0 + 1.0 / child.variance)
        else:
            qhat = _unexpanded_q(bounds)
            bonus = params.c_puct * prior * np.sqrt(parent_precision)
        scores[action] = qhat + bonus
    return int(np.argmax(scores))


def node_value_estimate(tree: SearchTree, node_id: int,
                        params: MvcParams) -> float:
    """Policy-weighted state value: children q mixed with the own value."""
    pol = mvc_policy(tree, node_id, params)
    node = tree.nodes[node_id]
    total = pol[tree.num_actions] * node.value
    for action, cid in enumerate(node.children):
        if pol[action] == 0.0 or cid is None:
            continue
        total += pol[action] * tree.nodes[cid].q
    return float(total)
