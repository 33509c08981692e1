"""Replay, targets, the unrolled loss and the training loop."""

import os

import numpy as np
import pytest

from treeplan import autodiff as ad
from treeplan.autodiff import Tensor
from treeplan.config import config_from_dict, config_hash
from treeplan.envs import ChainEnv, ExactChainModel
from treeplan.errors import UsageError
from treeplan.planner import PlannerConfig
from treeplan.search_tree import MvcParams
from treeplan.training import (
    METRICS_HEADER,
    ReplayBuffer,
    Trajectory,
    assemble_batch,
    evaluate,
    format_metrics_row,
    load_bundle,
    make_targets,
    self_play_episode,
    train,
    train_step,
    unrolled_loss,
)

from conftest import tiny_net


def scripted_traj(num_actions=2):
    """Three-step episode with easy-to-trace numbers."""
    traj = Trajectory()
    traj.observations = [np.zeros(4), np.ones(4), np.full(4, 2.0)]
    traj.actions = [0, 1, 0]
    traj.rewards = [1.0, 2.0, 3.0]
    traj.policy_targets = [np.array([0.5, 0.5]), np.array([0.2, 0.8]),
                           np.array([0.9, 0.1])]
    traj.root_values = [10.0, 20.0, 30.0]
    return traj


# ---------------------------------------------------------------------------
# replay buffer


def test_buffer_capacity_validated():
    with pytest.raises(UsageError):
        ReplayBuffer(0)


def test_buffer_rejects_empty_trajectory():
    with pytest.raises(UsageError):
        ReplayBuffer(4).add(Trajectory())


def test_buffer_ring_eviction():
    buf = ReplayBuffer(2)
    t1, t2, t3, t4 = (scripted_traj() for _ in range(4))
    buf.add(t1)
    buf.add(t2)
    assert buf.items == [t1, t2]
    buf.add(t3)  # overwrites the oldest slot
    assert buf.items == [t3, t2]
    buf.add(t4)
    assert buf.items == [t3, t4]


def test_buffer_sample_bounds():
    buf = ReplayBuffer(4)
    with pytest.raises(UsageError):
        buf.sample_indices(np.random.default_rng(0), 1)
    buf.add(scripted_traj())
    samples = buf.sample_indices(np.random.default_rng(0), 50)
    assert len(samples) == 50
    for traj, t in samples:
        assert 0 <= t < len(traj)


# ---------------------------------------------------------------------------
# window targets


def test_targets_hand_computed_interior():
    traj = scripted_traj()
    out = make_targets(traj, t=0, unroll_steps=2, bootstrap_steps=1,
                       gamma=0.5, num_actions=2)
    assert out["actions"].tolist() == [0, 1]
    # value[k] = r_s + gamma * root_value[s+1], truncated at the end
    assert out["value"].tolist() == [
        1.0 + 0.5 * 20.0,
        2.0 + 0.5 * 30.0,
        3.0,
    ]
    # reward[k] is the reward entering position k; slot 0 is padding
    assert out["reward"].tolist() == [0.0, 1.0, 2.0]
    assert np.allclose(out["policy"],
                       [[0.5, 0.5], [0.2, 0.8], [0.9, 0.1]])
    assert out["policy_mask"].tolist() == [1.0, 1.0, 1.0]


def test_targets_absorbing_tail():
    traj = scripted_traj()
    out = make_targets(traj, t=2, unroll_steps=2, bootstrap_steps=1,
                       gamma=0.5, num_actions=2)
    # position 0 is the final state, positions 1..2 are past the end
    assert out["value"].tolist() == [3.0, 0.0, 0.0]
    assert out["reward"].tolist() == [0.0, 3.0, 0.0]
    assert out["policy_mask"].tolist() == [1.0, 0.0, 0.0]
    assert np.allclose(out["policy"][1:], 0.5)  # uniform filler
    assert out["actions"].tolist() == [0, 0]  # padded with action 0


def test_targets_multi_step_bootstrap():
    traj = scripted_traj()
    out = make_targets(traj, t=0, unroll_steps=1, bootstrap_steps=2,
                       gamma=0.5, num_actions=2)
    # two reward terms then the stored root value
    assert out["value"][0] == 1.0 + 0.5 * 2.0 + 0.25 * 30.0
    # from t=1 the bootstrap would land on s=3: dropped at the terminal
    assert out["value"][1] == 2.0 + 0.5 * 3.0


def test_targets_gamma_zero_is_immediate_reward():
    traj = scripted_traj()
    out = make_targets(traj, t=0, unroll_steps=2, bootstrap_steps=3,
                       gamma=0.0, num_actions=2)
    assert out["value"].tolist() == traj.rewards


def test_targets_validate_start():
    with pytest.raises(UsageError):
        make_targets(scripted_traj(), t=3, unroll_steps=1,
                     bootstrap_steps=1, gamma=0.9, num_actions=2)


def test_assemble_batch_shapes():
    traj = scripted_traj()
    samples = [(traj, 0), (traj, 1), (traj, 2)]
    batch = assemble_batch(samples, unroll_steps=4, bootstrap_steps=2,
                           gamma=0.9, num_actions=2)
    assert batch["obs"].shape == (3, 4)
    assert batch["actions"].shape == (3, 4)
    assert batch["value"].shape == (3, 5)
    assert batch["reward"].shape == (3, 5)
    assert batch["policy"].shape == (3, 5, 2)
    assert batch["policy_mask"].shape == (3, 5)


# ---------------------------------------------------------------------------
# unrolled loss


def _loss_batch(rng, b=3, k=2, obs_dim=4, num_actions=2):
    traj_pool = []
    for _ in range(b):
        traj = Trajectory()
        n = int(rng.integers(2, 5))
        traj.observations = [rng.normal(size=obs_dim) for _ in range(n)]
        traj.actions = [int(rng.integers(num_actions)) for _ in range(n)]
        traj.rewards = [float(rng.normal()) for _ in range(n)]
        traj.policy_targets = [rng.dirichlet(np.ones(num_actions))
                               for _ in range(n)]
        traj.root_values = [float(rng.normal()) for _ in range(n)]
        traj_pool.append((traj, int(rng.integers(n))))
    return assemble_batch(traj_pool, unroll_steps=k, bootstrap_steps=2,
                          gamma=0.9, num_actions=num_actions)


def test_loss_total_is_weighted_sum_of_parts():
    cfg, bundle = tiny_net(obs_dim=4, num_actions=2)
    batch = _loss_batch(np.random.default_rng(0))
    wv, wr, wp = 0.25, 1.0, 1.5
    total, parts = unrolled_loss(bundle.params, cfg, batch, wv, wr, wp)
    expect = (parts["value"].item() * wv + parts["reward"].item() * wr) \
        + parts["policy"].item() * wp
    assert total.item() == expect


def test_loss_ignores_reward_slot_zero():
    cfg, bundle = tiny_net(obs_dim=4, num_actions=2)
    batch = _loss_batch(np.random.default_rng(1))
    _, parts = unrolled_loss(bundle.params, cfg, batch, 1.0, 1.0, 1.0)
    tampered = dict(batch)
    tampered["reward"] = batch["reward"].copy()
    tampered["reward"][:, 0] += 1e6
    _, parts2 = unrolled_loss(bundle.params, cfg, tampered, 1.0, 1.0, 1.0)
    assert parts["reward"].item() == parts2["reward"].item()


def test_loss_ignores_masked_policy_rows():
    cfg, bundle = tiny_net(obs_dim=4, num_actions=2)
    rng = np.random.default_rng(2)
    # force some absorbing positions by starting windows near the end
    traj = scripted_traj()
    samples = [(traj, 2), (traj, 1)]
    batch = assemble_batch(samples, unroll_steps=3, bootstrap_steps=1,
                           gamma=0.9, num_actions=2)
    assert (batch["policy_mask"] == 0.0).any()
    _, parts = unrolled_loss(bundle.params, cfg, batch, 1.0, 1.0, 1.0)
    tampered = dict(batch)
    tampered["policy"] = batch["policy"].copy()
    tampered["policy"][batch["policy_mask"] == 0.0] = \
        rng.dirichlet(np.ones(2))
    _, parts2 = unrolled_loss(bundle.params, cfg, tampered, 1.0, 1.0, 1.0)
    assert parts["policy"].item() == parts2["policy"].item()


def test_train_step_updates_parameters():
    cfg, bundle = tiny_net(obs_dim=4, num_actions=2)
    batch = _loss_batch(np.random.default_rng(3))
    tcfg = config_from_dict({}).training
    before = {n: t.data.copy() for n, t in bundle.params.items()}
    opt_state = ad.init_adam_state(bundle.params)
    report = train_step(bundle, opt_state, batch, tcfg)
    assert np.isfinite(report.total)
    assert report.grad_norm > 0
    # the zero-initialized head output layers block deeper gradients on
    # the very first step; after a second one everything moves
    changed = {n for n in before
               if not np.array_equal(before[n], bundle.params[n].data)}
    assert changed == {"value.out.w", "value.out.b", "reward.out.w",
                       "reward.out.b", "policy.out.w", "policy.out.b"}
    train_step(bundle, opt_state, batch, tcfg)
    changed2 = sum(
        1 for n in before
        if not np.array_equal(before[n], bundle.params[n].data))
    assert changed2 == len(before)


def test_train_step_without_clipping():
    cfg, bundle = tiny_net(obs_dim=4, num_actions=2)
    batch = _loss_batch(np.random.default_rng(4))
    tcfg = config_from_dict({"training": {"max_grad_norm": 0.0}}).training
    opt_state = ad.init_adam_state(bundle.params)
    report = train_step(bundle, opt_state, batch, tcfg)
    assert np.isfinite(report.total)


def test_repeated_steps_overfit_one_batch():
    """A few hundred steps on one fixed batch drive value and reward
    errors to zero and the policy loss to its entropy floor; this is
    the end-to-end gradient sanity check."""
    cfg, bundle = tiny_net(obs_dim=4, num_actions=2, seed=5)
    batch = _loss_batch(np.random.default_rng(5), b=4, k=2)
    tcfg = config_from_dict({"training": {"lr": 0.01}}).training
    opt_state = ad.init_adam_state(bundle.params)
    first = train_step(bundle, opt_state, batch, tcfg)
    for _ in range(299):
        last = train_step(bundle, opt_state, batch, tcfg)
    assert last.value_loss < 1e-6
    assert last.reward_loss < 1e-6
    # cross entropy against soft targets bottoms out at their entropy
    p = batch["policy"]
    ent = -np.sum(p * np.log(p), axis=-1) * batch["policy_mask"]
    b, kp1 = batch["policy_mask"].shape
    floor = ent.sum() / (b * kp1)
    assert last.policy_loss < floor + 0.01
    assert last.total < first.total


# ---------------------------------------------------------------------------
# self play


def test_self_play_episode_consistency():
    env = ChainEnv(5)
    model = ExactChainModel(5, 0.9)
    cfg = PlannerConfig(mode="parallel_mvc", num_simulations=3,
                        subtree_layers=2, mvc=MvcParams(gamma=0.9),
                        dirichlet_fraction=0.0)
    traj, plan_s, nodes = self_play_episode(
        env, model, cfg, np.random.default_rng(0),
        act_temperature=0.0, env_seed=1)
    n = len(traj)
    assert n >= 1
    assert len(traj.observations) == n
    assert len(traj.rewards) == n
    assert len(traj.policy_targets) == n
    assert len(traj.root_values) == n
    assert sum(traj.rewards) == 1.0  # exact model walks to the terminus
    assert plan_s > 0
    assert nodes == 6.0


# ---------------------------------------------------------------------------
# the full loop


def chain_run_config(**training_overrides):
    training = dict(episodes=6, min_buffer=2, batch_size=4, unroll_steps=2,
                    bootstrap_steps=2, lr=1e-3, log_every=2,
                    buffer_capacity=16)
    training.update(training_overrides)
    return config_from_dict({
        "seed": 11,
        "env": {"kind": "chain", "chain_length": 4},
        "network": {"d_model": 8, "num_layers": 1, "num_heads": 2,
                    "rep_hidden": 8, "ff_hidden": 16, "head_hidden": 8},
        "planner": {"num_simulations": 2, "subtree_layers": 2,
                    "dirichlet_fraction": 0.25},
        "training": training,
    })


def test_train_runs_and_reports(tmp_path):
    cfg = chain_run_config()
    metrics = tmp_path / "metrics.csv"
    result = train(cfg, out_dir=str(tmp_path), metrics_path=str(metrics))
    assert len(result.episode_rewards) == 6
    assert result.gradient_steps > 0
    assert result.checkpoint_path == str(tmp_path / "checkpoint.bin")
    assert os.path.exists(result.checkpoint_path)
    lines = metrics.read_text().strip().split("\n")
    assert lines[0] == METRICS_HEADER
    assert len(lines) == 1 + 3  # six episodes, one row per two
    # untimed runs write the plan_ms column as zero
    assert all(line.endswith(",0.000") for line in lines[1:])


def test_train_single_episode_still_logs(tmp_path):
    cfg = chain_run_config(episodes=1, log_every=10, min_buffer=1)
    metrics = tmp_path / "metrics.csv"
    train(cfg, metrics_path=str(metrics))
    lines = metrics.read_text().strip().split("\n")
    assert len(lines) == 2
    assert lines[1].split(",")[1] == "1"


def test_train_deterministic_for_fixed_config(tmp_path):
    cfg = chain_run_config()
    m1, m2 = tmp_path / "a.csv", tmp_path / "b.csv"
    r1 = train(cfg, out_dir=str(tmp_path / "a"), metrics_path=str(m1))
    r2 = train(cfg, out_dir=str(tmp_path / "b"), metrics_path=str(m2))
    assert r1.episode_rewards == r2.episode_rewards
    assert r1.metrics_rows == r2.metrics_rows
    assert m1.read_bytes() == m2.read_bytes()
    ck1 = (tmp_path / "a" / "checkpoint.bin").read_bytes()
    ck2 = (tmp_path / "b" / "checkpoint.bin").read_bytes()
    assert ck1 == ck2


def test_train_seed_changes_outcome(tmp_path):
    import dataclasses
    cfg = chain_run_config()
    other = dataclasses.replace(cfg, seed=12)
    r1 = train(cfg)
    r2 = train(other)
    assert r1.episode_rewards != r2.episode_rewards


def test_timing_flag_enables_plan_ms(tmp_path):
    cfg = chain_run_config(log_timing=True)
    metrics = tmp_path / "metrics.csv"
    train(cfg, metrics_path=str(metrics))
    rows = metrics.read_text().strip().split("\n")[1:]
    assert any(float(row.split(",")[-1]) > 0.0 for row in rows)


def test_metrics_row_format():
    row = format_metrics_row(5, 2, 17, 1.5, 0.25, 0.125, 0.0625, 6.0, 0.0)
    assert row == "5,2,17,1.500000,0.250000,0.125000,0.062500,6.000,0.000"


# ---------------------------------------------------------------------------
# evaluation and checkpoint loading


def test_evaluate_deterministic():
    cfg = chain_run_config()
    result = train(cfg)
    m1, s1, r1 = evaluate(cfg, result.bundle, episodes=4, seed=100)
    m2, s2, r2 = evaluate(cfg, result.bundle, episodes=4, seed=100)
    assert m1 == m2 and s1 == s2
    assert np.array_equal(r1, r2)
    assert len(r1) == 4


def test_evaluate_single_episode_stderr_zero():
    cfg = chain_run_config()
    result = train(cfg)
    _, stderr, _ = evaluate(cfg, result.bundle, episodes=1, seed=0)
    assert stderr == 0.0


def test_load_bundle_roundtrip(tmp_path):
    """Checkpoints store float32 records; loading restores exactly the
    float32 rounding of the trained parameters."""
    cfg = chain_run_config()
    result = train(cfg, out_dir=str(tmp_path))
    loaded = load_bundle(cfg, result.checkpoint_path)
    for name, tensor in result.bundle.params.items():
        expect = tensor.data.astype("<f4").astype(np.float64)
        assert loaded.params[name].data.tobytes() == expect.tobytes()


def test_load_bundle_rejects_wrong_config(tmp_path):
    cfg = chain_run_config()
    result = train(cfg, out_dir=str(tmp_path))
    import dataclasses
    other = dataclasses.replace(
        cfg, planner=dataclasses.replace(
            cfg.planner, mvc=MvcParams(gamma=0.5)))
    assert config_hash(other) != config_hash(cfg)
    with pytest.raises(UsageError):
        load_bundle(other, result.checkpoint_path)


def test_load_bundle_ignores_seed_difference(tmp_path):
    cfg = chain_run_config()
    result = train(cfg, out_dir=str(tmp_path))
    import dataclasses
    sibling = dataclasses.replace(cfg, seed=999)
    loaded = load_bundle(sibling, result.checkpoint_path)
    name = sorted(loaded.params)[0]
    expect = result.bundle.params[name].data.astype("<f4").astype(np.float64)
    assert loaded.params[name].data.tobytes() == expect.tobytes()


def test_load_bundle_missing_parameter(tmp_path):
    cfg = chain_run_config()
    result = train(cfg, out_dir=str(tmp_path))
    params = dict(result.bundle.params)
    removed = sorted(params)[0]
    del params[removed]
    path = str(tmp_path / "partial.bin")
    ad.save_checkpoint(path, params, config_hash(cfg))
    with pytest.raises(UsageError):
        load_bundle(cfg, path)


def test_load_bundle_shape_mismatch(tmp_path):
    cfg = chain_run_config()
    result = train(cfg, out_dir=str(tmp_path))
    params = dict(result.bundle.params)
    params["rep.in.w"] = Tensor(np.zeros((2, 2)))
    path = str(tmp_path / "reshaped.bin")
    ad.save_checkpoint(path, params, config_hash(cfg))
    with pytest.raises(UsageError):
        load_bundle(cfg, path)
