import numpy as np
import pytest

from treeplan import autodiff as ad
from treeplan.nets import NetworkConfig, init_network
from treeplan.search_tree import MvcParams, SearchTree


@pytest.fixture(autouse=True, scope="session")
def _debug_checks():
    # every op asserts finite outputs for the whole suite
    ad.set_debug_checks(True)
    yield
    ad.set_debug_checks(False)


def tiny_net(seed=0, obs_dim=7, num_actions=3, dtype="float64", **kw):
    """Small network for oracle tests; float64 by default."""
    defaults = dict(d_model=8, num_layers=1, num_heads=2, rep_hidden=8,
                    ff_hidden=16, head_hidden=8)
    defaults.update(kw)
    cfg = NetworkConfig(obs_dim=obs_dim, num_actions=num_actions,
                        dtype=dtype, **defaults)
    return cfg, init_network(cfg, np.random.default_rng(seed))


def build_random_tree(rng, num_actions=3, max_depth=4, child_prob=0.7,
                      params: MvcParams = None) -> SearchTree:
    """Random evaluated tree with per-action random branching.

    Every node carries network-style statistics (reward, value, prior)
    but no backed-up q yet; run a backup before using policies.
    """
    tree = SearchTree(num_actions)

    def stats(node):
        node.reward = float(rng.normal())
        node.value = float(rng.normal())
        node.prior = rng.dirichlet([1.0] * num_actions)
        node.evaluated = True

    root = tree.add_root(None)
    stats(tree.nodes[root])
    frontier = [root]
    while frontier:
        nid = frontier.pop()
        node = tree.nodes[nid]
        if node.depth >= max_depth:
            continue
        for action in range(num_actions):
            if rng.random() < child_prob:
                cid = tree.add_child(nid, action)
                stats(tree.nodes[cid])
                frontier.append(cid)
    return tree
