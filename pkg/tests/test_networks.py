"""Mask builders, positional codes and the shared dynamics forward."""

import numpy as np
import pytest

from treeplan import autodiff as ad
from treeplan.autodiff import Tensor
from treeplan.errors import ConfigError, MaskError, ShapeError
from treeplan.nets import (
    NetworkConfig,
    ancestor_mask,
    causal_mask,
    dynamics_forward,
    embed_actions,
    encode_sequence,
    init_network,
    init_params,
    predict,
    represent,
    sinusoidal_encoding,
)

from conftest import tiny_net


# ---------------------------------------------------------------------------
# positional encodings


def test_sinusoidal_closed_form():
    d = 12
    base = 10000.0
    depths = [0, 1, 2, 3, 7, 11]
    pe = sinusoidal_encoding(depths, d, base)
    assert pe.shape == (len(depths), d)
    for r, depth in enumerate(depths):
        for i in range(d // 2):
            angle = depth / base ** (2.0 * i / d)
            assert abs(pe[r, 2 * i] - np.sin(angle)) < 1e-12
            assert abs(pe[r, 2 * i + 1] - np.cos(angle)) < 1e-12


def test_sinusoidal_depth_zero():
    pe = sinusoidal_encoding([0], 8)
    assert np.all(pe[0, 0::2] == 0.0)
    assert np.all(pe[0, 1::2] == 1.0)


def test_sinusoidal_distinguishes_depths():
    pe = sinusoidal_encoding(np.arange(10), 16)
    # all pairwise rows distinct
    for a in range(10):
        for b in range(a + 1, 10):
            assert np.abs(pe[a] - pe[b]).max() > 1e-6


# ---------------------------------------------------------------------------
# masks


def _brute_force_ancestors(parents):
    """Token i's allowed set = itself plus the parent chain to the root."""
    n = len(parents) + 1
    allow = np.zeros((n, n), dtype=bool)
    for i in range(n):
        j = i
        while True:
            allow[i, j] = True
            if j == 0:
                break
            j = parents[j - 1]
    return allow


def test_causal_mask_shape():
    m = causal_mask(4)
    assert m.dtype == np.bool_
    expect = np.array([
        [1, 0, 0, 0],
        [1, 1, 0, 0],
        [1, 1, 1, 0],
        [1, 1, 1, 1],
    ], dtype=bool)
    assert np.array_equal(m, expect)


def test_ancestor_mask_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 12))
        parents = [int(rng.integers(0, i + 1)) for i in range(n)]
        assert np.array_equal(ancestor_mask(parents), _brute_force_ancestors(parents))


def test_ancestor_mask_chain_is_causal():
    for n in range(1, 8):
        parents = list(range(n))
        assert np.array_equal(ancestor_mask(parents), causal_mask(n + 1))


def test_ancestor_mask_rejects_forward_reference():
    with pytest.raises(MaskError):
        ancestor_mask([0, 2])  # token 2 cannot hang under itself
    with pytest.raises(MaskError):
        ancestor_mask([1])  # token 1's parent must precede it
    with pytest.raises(MaskError):
        ancestor_mask([-1])


def test_ancestor_mask_branching():
    # root with two children, each child with one child
    parents = [0, 0, 1, 2]
    allow = ancestor_mask(parents)
    assert allow[3].tolist() == [True, True, False, True, False]
    assert allow[4].tolist() == [True, False, True, False, True]


# ---------------------------------------------------------------------------
# config validation


def test_config_rejects_odd_d_model():
    with pytest.raises(ConfigError):
        NetworkConfig(d_model=7, num_heads=1)


def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        NetworkConfig(d_model=8, num_heads=3)


def test_config_rejects_unknown_dtype():
    with pytest.raises(ConfigError):
        NetworkConfig(dtype="float16")


# ---------------------------------------------------------------------------
# forward pass basics


def test_represent_shape_and_dim_check():
    cfg, bundle = tiny_net()
    obs = np.zeros((4, cfg.obs_dim))
    z = represent(bundle.params, cfg, Tensor(obs))
    assert z.shape == (4, cfg.d_model)
    with pytest.raises(ShapeError):
        represent(bundle.params, cfg, Tensor(np.zeros((4, cfg.obs_dim + 1))))


def test_embed_actions_range_check():
    cfg, bundle = tiny_net()
    with pytest.raises(ShapeError):
        embed_actions(bundle.params, cfg, [cfg.num_actions], [1])
    with pytest.raises(ShapeError):
        embed_actions(bundle.params, cfg, [-1], [1])
    with pytest.raises(ShapeError):
        embed_actions(bundle.params, cfg, [0, 1], [1])  # depth count mismatch


def test_encode_sequence_mask_shape_check():
    cfg, bundle = tiny_net()
    seq = Tensor(np.zeros((3, cfg.d_model)))
    with pytest.raises(MaskError):
        encode_sequence(bundle.params, cfg, seq, causal_mask(4))


def test_zero_heads_give_uniform_prior():
    """Freshly initialized nets predict value 0, reward 0, uniform policy."""
    cfg, bundle = tiny_net(seed=3)
    rng = np.random.default_rng(5)
    lat = rng.normal(size=(6, cfg.d_model))
    v, r, p = bundle.predict(lat)
    assert np.all(v == 0.0)
    assert np.all(r == 0.0)
    assert np.abs(p - 1.0 / cfg.num_actions).max() < 1e-15


def test_predict_softmax_rows_normalized():
    cfg, bundle = tiny_net(seed=9)
    # nudge the policy head off zero so the softmax is non-trivial
    bundle.params["policy.out.w"].data[:] = np.random.default_rng(1).normal(
        size=bundle.params["policy.out.w"].shape)
    lat = np.random.default_rng(2).normal(size=(5, cfg.d_model))
    v, r, p = bundle.predict(lat)
    assert np.abs(p.sum(axis=-1) - 1.0).max() < 1e-12
    assert p.min() > 0.0


def test_dynamics_forward_shapes():
    cfg, bundle = tiny_net()
    root = Tensor(np.random.default_rng(0).normal(size=cfg.d_model))
    out = dynamics_forward(bundle.params, cfg, root, [0, 1, 2],
                           [1, 2, 3], causal_mask(4))
    assert out.shape == (4, cfg.d_model)


def test_dynamics_forward_batched_shapes():
    cfg, bundle = tiny_net()
    rng = np.random.default_rng(0)
    root = Tensor(rng.normal(size=(5, cfg.d_model)))
    ids = rng.integers(0, cfg.num_actions, size=(5, 3))
    out = dynamics_forward(bundle.params, cfg, root, ids,
                           [1, 2, 3], causal_mask(4))
    assert out.shape == (5, 4, cfg.d_model)


# ---------------------------------------------------------------------------
# the one-forward-two-callers property: training's causal unroll and the
# planner's chain subtree must produce identical latents


def test_causal_and_chain_ancestor_paths_agree_bitwise():
    for seed in range(5):
        cfg, bundle = tiny_net(seed=seed, num_layers=2)
        rng = np.random.default_rng(100 + seed)
        root = rng.normal(size=cfg.d_model)
        n = 5
        acts = rng.integers(0, cfg.num_actions, size=n)
        depths = np.arange(1, n + 1)
        a = dynamics_forward(bundle.params, cfg, Tensor(root.copy()),
                             acts, depths, causal_mask(n + 1))
        b = bundle.forward_tokens(root, acts, depths, parents=list(range(n)))
        assert a.data.tobytes() == b.tobytes()


def test_batched_forward_matches_single_rows():
    cfg, bundle = tiny_net(seed=1, num_layers=2)
    rng = np.random.default_rng(7)
    b, n = 4, 3
    roots = rng.normal(size=(b, cfg.d_model))
    ids = rng.integers(0, cfg.num_actions, size=(b, n))
    depths = np.arange(1, n + 1)
    batched = dynamics_forward(bundle.params, cfg, Tensor(roots), ids,
                               depths, causal_mask(n + 1)).data
    for i in range(b):
        single = dynamics_forward(bundle.params, cfg, Tensor(roots[i]),
                                  ids[i], depths, causal_mask(n + 1)).data
        assert np.abs(batched[i] - single).max() < 1e-10


def test_batched_predict_matches_single_rows():
    cfg, bundle = tiny_net(seed=2)
    bundle.params["value.out.w"].data[:] = 0.3
    bundle.params["reward.out.w"].data[:] = -0.2
    bundle.params["policy.out.w"].data[:] = np.random.default_rng(3).normal(
        size=bundle.params["policy.out.w"].shape)
    rng = np.random.default_rng(4)
    lat = rng.normal(size=(6, cfg.d_model))
    v, r, p = bundle.predict(lat)
    for i in range(6):
        vi, ri, pi = bundle.predict(lat[i:i + 1])
        assert abs(v[i] - vi[0]) < 1e-12
        assert abs(r[i] - ri[0]) < 1e-12
        assert np.abs(p[i] - pi[0]).max() < 1e-12


def test_non_ancestor_token_cannot_influence_output():
    """Swapping the action on a masked-out branch leaves a row's latent
    bit-identical: masked attention weights are exactly zero."""
    cfg, bundle = tiny_net(seed=11, num_layers=2)
    rng = np.random.default_rng(0)
    root = rng.normal(size=cfg.d_model)
    # two branches under the root: tokens 1,3 on one path, 2,4 on the other
    parents = [0, 0, 1, 2]
    depths = [1, 1, 2, 2]
    acts = np.array([0, 1, 2, 0])
    base = bundle.forward_tokens(root, acts, depths, parents)
    flipped = acts.copy()
    flipped[1] = 2  # token 2 is not an ancestor of tokens 1 or 3
    out = bundle.forward_tokens(root, flipped, depths, parents)
    for pos in (0, 1, 3):
        assert out[pos].tobytes() == base[pos].tobytes()
    # the flipped token itself and its child must change
    assert np.abs(out[2] - base[2]).max() > 0
    assert np.abs(out[4] - base[4]).max() > 0


def test_root_latent_reaches_every_position():
    cfg, bundle = tiny_net(seed=4)
    rng = np.random.default_rng(1)
    root = rng.normal(size=cfg.d_model)
    parents = [0, 0, 1]
    depths = [1, 1, 2]
    acts = [0, 1, 2]
    base = bundle.forward_tokens(root, acts, depths, parents)
    out = bundle.forward_tokens(root + 0.1, acts, depths, parents)
    for pos in range(4):
        assert np.abs(out[pos] - base[pos]).max() > 0


# ---------------------------------------------------------------------------
# gradient masking through attention


def test_masked_positions_get_zero_gradient():
    """d out[i] / d seq[j] is exactly zero when j is not an ancestor of i.

    The sequence enters as a leaf tensor so the tape reports its
    gradient directly.
    """
    cfg, bundle = tiny_net(seed=6, num_layers=2)
    rng = np.random.default_rng(2)
    parents = [0, 0]
    allow = ancestor_mask(parents)
    seq = Tensor(rng.normal(size=(3, cfg.d_model)))
    with ad.Tape() as t:
        full = encode_sequence(bundle.params, cfg, seq, allow)
        # loss reads only position 1; position 2 is not its ancestor
        row = ad.gather(full, np.array([1]))
        loss = ad.reduce_sum(ad.mul(row, row))
    g = t.gradient(loss, [seq])[0]
    assert np.all(g[2] == 0.0)
    assert np.abs(g[0]).max() > 0
    assert np.abs(g[1]).max() > 0


def test_sibling_embedding_row_gets_zero_gradient():
    """A loss on one branch leaves the sibling action's embedding row
    untouched end to end, gather included."""
    cfg, bundle = tiny_net(seed=6, num_layers=1)
    rng = np.random.default_rng(2)
    parents = [0, 0]
    depths = [1, 1]
    allow = ancestor_mask(parents)
    root = Tensor(rng.normal(size=cfg.d_model))
    with ad.Tape() as t:
        tok = embed_actions(bundle.params, cfg, [0, 1], depths)
        rootr = ad.reshape(root, (1, cfg.d_model))
        full = encode_sequence(bundle.params, cfg,
                               ad.concat([rootr, tok], axis=0), allow)
        row = ad.gather(full, np.array([1]))
        loss = ad.reduce_sum(ad.mul(row, row))
    g = t.gradient(loss, [bundle.params["embed.table"]])[0]
    # position 1 used action 0, the masked-out sibling used action 1
    assert np.abs(g[0]).max() > 0
    assert np.all(g[1] == 0.0)
    assert np.all(g[2] == 0.0)


# ---------------------------------------------------------------------------
# latent rescaling


def test_scale_latents_bounds_rows():
    cfg, bundle = tiny_net(seed=8, scale_latents=True)
    rng = np.random.default_rng(3)
    obs = rng.normal(size=(3, cfg.obs_dim))
    z = represent(bundle.params, cfg, Tensor(obs)).data
    assert z.min() >= 0.0 and z.max() <= 1.0
    assert np.abs(z.min(axis=-1)).max() < 1e-6
    assert np.abs(z.max(axis=-1) - 1.0).max() < 1e-6


# ---------------------------------------------------------------------------
# initialization


def test_init_params_deterministic():
    cfg = NetworkConfig(obs_dim=5, num_actions=3, d_model=8, num_layers=1,
                        num_heads=2, rep_hidden=8, ff_hidden=16, head_hidden=8)
    a = init_params(cfg, np.random.default_rng(42))
    b = init_params(cfg, np.random.default_rng(42))
    assert sorted(a) == sorted(b)
    for k in a:
        assert a[k].data.tobytes() == b[k].data.tobytes()


def test_init_network_dtype():
    cfg = NetworkConfig(obs_dim=5, num_actions=3, d_model=8, num_layers=1,
                        num_heads=2, rep_hidden=8, ff_hidden=16, head_hidden=8,
                        dtype="float32")
    bundle = init_network(cfg, np.random.default_rng(0))
    for k, t in bundle.params.items():
        assert t.data.dtype == np.float32, k
