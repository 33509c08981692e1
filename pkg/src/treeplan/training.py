"""Self-play data collection and unrolled model training.

Each environment step runs a full search; the tree's root policy and
value become the step's targets. Training samples windows from a
uniform replay buffer and unrolls the dynamics network over the stored
actions with one lower-triangular-masked forward pass per batch, then
regresses value, reward and policy heads at every unroll position.

Value targets bootstrap n steps ahead from stored root values and
truncate at episode end. Positions beyond the end regress value and
reward to zero (the absorbing convention) and are excluded from the
policy loss entirely.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import Tensor
from .config import RunConfig, TrainConfig, build_env, config_hash, \
    resolved_network_config
from .errors import UsageError
from .planner import PlannerConfig, act, plan

METRICS_HEADER = ("step,episodes,env_steps,mean_reward,value_loss,"
                  "reward_loss,policy_loss,nodes_per_sim,plan_ms")


@dataclass
class Trajectory:
    observations: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    policy_targets: list = field(default_factory=list)
    root_values: list = field(default_factory=list)

    def __len__(self):
        return len(self.actions)


@dataclass
class LossReport:
    total: float
    value_loss: float
    reward_loss: float
    policy_loss: float
    grad_norm: float


class ReplayBuffer:
    """Uniform replay over complete trajectories."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise UsageError("buffer capacity must be positive")
        self.capacity = capacity
        self.items: list[Trajectory] = []
        self._next = 0

    def __len__(self):
        return len(self.items)

    def add(self, traj: Trajectory) -> None:
        if len(traj) < 1:
            raise UsageError("cannot store an empty trajectory")
        if len(self.items) < self.capacity:
            self.items.append(traj)
        else:
            self.items[self._next] = traj
            self._next = (self._next + 1) % self.capacity

    def sample_indices(self, rng: np.random.Generator, batch_size: int):
        """(trajectory, start) pairs; starts always lie inside the episode."""
        if not self.items:
            raise UsageError("cannot sample from an empty buffer")
        out = []
        for _ in range(batch_size):
            traj = self.items[int(rng.integers(len(self.items)))]
            t = int(rng.integers(len(traj)))
            out.append((traj, t))
        return out


def make_targets(traj: Trajectory, t: int, unroll_steps: int,
                 bootstrap_steps: int, gamma: float, num_actions: int):
    """Targets for one window starting at step ``t``.

    Returns a dict of arrays: actions (K,), value/reward (K+1,),
    policy (K+1, A) and policy_mask (K+1,). The reward target at
    position k is the reward observed entering state t+k (position 0
    is unused by the loss but kept for alignment). Value targets are
    n-step returns with the bootstrap dropped when it would cross the
    terminal.
    """
    horizon = len(traj)
    if not 0 <= t < horizon:
        raise UsageError(f"window start {t} outside episode of length {horizon}")
    k_max = unroll_steps
    actions = np.zeros(k_max, dtype=np.int64)
    value_t = np.zeros(k_max + 1)
    reward_t = np.zeros(k_max + 1)
    policy_t = np.full((k_max + 1, num_actions), 1.0 / num_actions)
    policy_mask = np.zeros(k_max + 1)
    for k in range(k_max + 1):
        s = t + k
        if k < k_max:
            actions[k] = traj.actions[s] if s < horizon else 0
        if k >= 1:
            reward_t[k] = traj.rewards[s - 1] if s - 1 < horizon else 0.0
        if s < horizon:
            policy_t[k] = traj.policy_targets[s]
            policy_mask[k] = 1.0
            ret = 0.0
            for i in range(bootstrap_steps):
                if s + i < horizon:
                    ret += (gamma ** i) * traj.rewards[s + i]
                else:
                    break
            if s + bootstrap_steps < horizon:
                ret += (gamma ** bootstrap_steps) * traj.root_values[s + bootstrap_steps]
            value_t[k] = ret
    return {
        "actions": actions,
        "value": value_t,
        "reward": reward_t,
        "policy": policy_t,
        "policy_mask": policy_mask,
    }


def assemble_batch(samples, unroll_steps, bootstrap_steps, gamma, num_actions):
    obs = np.stack([traj.observations[t] for traj, t in samples])
    parts = [make_targets(traj, t, unroll_steps, bootstrap_steps, gamma,
                          num_actions) for traj, t in samples]
    return {
        "obs": obs,
        "actions": np.stack([p["actions"] for p in parts]),
        "value": np.stack([p["value"] for p in parts]),
        "reward": np.stack([p["reward"] for p in parts]),
        "policy": np.stack([p["policy"] for p in parts]),
        "policy_mask": np.stack([p["policy_mask"] for p in parts]),
    }


def unrolled_loss(params, net_cfg: nets.NetworkConfig, batch,
                  weight_value: float, weight_reward: float,
                  weight_policy: float):
    """Weighted loss over all unroll positions of a batch.

    Returns (total Tensor, components dict of Tensors). The reported
    component losses are unweighted; total is their weighted sum.
    """
    dt = net_cfg.np_dtype
    b, k = batch["actions"].shape
    obs = Tensor(batch["obs"].astype(dt))
    root = nets.represent(params, net_cfg, obs)
    allow = nets.causal_mask(k + 1)
    latents = nets.dynamics_forward(params, net_cfg, root, batch["actions"],
                                    np.arange(1, k + 1), allow)
    values, rewards, logits = nets.predict(params, net_cfg, latents)

    value_target = Tensor(batch["value"].astype(dt))
    value_loss = ad.mse(values, value_target)

    # position 0 predicts no reward; slice positions 1..K out via mask
    reward_mask = np.ones((b, k + 1), dtype=dt)
    reward_mask[:, 0] = 0.0
    reward_loss = ad.mse(rewards, Tensor(batch["reward"].astype(dt)),
                         weight=Tensor(reward_mask), normalizer=b * k)

    policy_target = Tensor(batch["policy"].astype(dt))
    pol_mask = Tensor(batch["policy_mask"].astype(dt)[..., None])
    policy_loss = ad.cross_entropy(logits, policy_target, weight=pol_mask,
                                   normalizer=b * (k + 1))

    total = ad.add(
        ad.add(ad.scale(value_loss, weight_value),
               ad.scale(reward_loss, weight_reward)),
        ad.scale(policy_loss, weight_policy))
    return total, {
        "value": value_loss, "reward": reward_loss, "policy": policy_loss,
    }


def train_step(bundle: nets.NetworkBundle, opt_state, batch,
               tcfg: TrainConfig) -> LossReport:
    params = bundle.params
    with ad.Tape() as tape:
        total, parts = unrolled_loss(
            params, bundle.cfg, batch,
            tcfg.weight_value, tcfg.weight_reward, tcfg.weight_policy)
    names = sorted(params)
    grads = tape.gradient(total, [params[n] for n in names])
    grad_map = dict(zip(names, grads))
    norm = float(np.sqrt(sum(float((g**2).sum()) for g in grads)))
    if tcfg.max_grad_norm > 0 and norm > tcfg.max_grad_norm:
        scale = tcfg.max_grad_norm / norm
        grad_map = {n: g * scale for n, g in grad_map.items()}
    ad.adam_step(params, grad_map, opt_state, tcfg.lr,
                 tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)
    return LossReport(
        total=total.item(),
        value_loss=parts["value"].item(),
        reward_loss=parts["reward"].item(),
        policy_loss=parts["policy"].item(),
        grad_norm=norm,
    )


def self_play_episode(env, model, planner_cfg: PlannerConfig, rng,
                      act_temperature: float, env_seed: int):
    """Play one episode, planning at every step.

    Returns (trajectory, mean plan seconds, mean nodes per simulation).
    """
    traj = Trajectory()
    obs = env.reset(env_seed)
    done = False
    plan_seconds = []
    nodes_per_sim = []
    while not done:
        result = plan(obs, model, planner_cfg, rng=rng)
        action = act(result, act_temperature, rng=rng)
        traj.observations.append(obs)
        traj.policy_targets.append(result.root_policy)
        traj.root_values.append(result.root_value)
        plan_seconds.append(result.wall_time)
        nodes_per_sim.append(result.nodes_per_simulation)
        obs, reward, done = env.step(action)
        traj.actions.append(action)
        traj.rewards.append(reward)
    return traj, float(np.mean(plan_seconds)), float(np.mean(nodes_per_sim))


@dataclass
class TrainResult:
    episode_rewards: list
    metrics_rows: list
    gradient_steps: int
    bundle: nets.NetworkBundle
    checkpoint_path: str | None


def format_metrics_row(step, episodes, env_steps, mean_reward, value_loss,
                       reward_loss, policy_loss, nodes_per_sim, plan_ms) -> str:
    return (f"{step},{episodes},{env_steps},{mean_reward:.6f},"
            f"{value_loss:.6f},{reward_loss:.6f},{policy_loss:.6f},"
            f"{nodes_per_sim:.3f},{plan_ms:.3f}")


def train(cfg: RunConfig, out_dir=None, metrics_path=None,
          progress=None) -> TrainResult:
    """Full training loop; deterministic for a fixed config.

    All randomness flows from ``cfg.seed`` through named child
    sequences, so two runs with the same config produce identical
    metrics (timing is only recorded when ``log_timing`` is on).
    Interrupting mid-run still writes the final checkpoint.
    """
    tcfg = cfg.training
    net_cfg = resolved_network_config(cfg)
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    net_rng = np.random.default_rng(seeds[0])
    play_rng = np.random.default_rng(seeds[1])
    sample_rng = np.random.default_rng(seeds[2])
    env_seed_rng = np.random.default_rng(seeds[3])
    env = build_env(cfg)
    bundle = nets.init_network(net_cfg, net_rng)
    opt_state = ad.init_adam_state(bundle.params)
    buffer = ReplayBuffer(tcfg.buffer_capacity)
    chash = config_hash(cfg)

    ckpt_path = None
    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    if metrics_path is not None:
        metrics_fh = open(metrics_path, "w")
        metrics_fh.write(METRICS_HEADER + "\n")

    episode_rewards = []
    metrics_rows = []
    grad_steps = 0
    env_steps = 0
    w_rewards, w_value, w_reward_l, w_policy = [], [], [], []
    w_nodes, w_plan = [], []
    switch_at = int(tcfg.temp_switch * tcfg.episodes)

    def flush_row(episode_count):
        nonlocal w_rewards, w_value, w_reward_l, w_policy, w_nodes, w_plan
        mean_r = float(np.mean(w_rewards)) if w_rewards else 0.0
        vl = float(np.mean(w_value)) if w_value else 0.0
        rl = float(np.mean(w_reward_l)) if w_reward_l else 0.0
        pl = float(np.mean(w_policy)) if w_policy else 0.0
        nps = float(np.mean(w_nodes)) if w_nodes else 0.0
        pm = float(np.mean(w_plan)) * 1000.0 if (w_plan and tcfg.log_timing) else 0.0
        row = format_metrics_row(grad_steps, episode_count, env_steps,
                                 mean_r, vl, rl, pl, nps, pm)
        metrics_rows.append(row)
        if metrics_fh is not None:
            metrics_fh.write(row + "\n")
            metrics_fh.flush()
        w_rewards, w_value, w_reward_l, w_policy = [], [], [], []
        w_nodes, w_plan = [], []

    try:
        for episode in range(tcfg.episodes):
            temp = tcfg.temp_initial if episode < switch_at else tcfg.temp_final
            env_seed = int(env_seed_rng.integers(2**63 - 1))
            traj, plan_s, nodes = self_play_episode(
                env, bundle, cfg.planner, play_rng, temp, env_seed)
            buffer.add(traj)
            episode_rewards.append(float(sum(traj.rewards)))
            env_steps += len(traj)
            w_rewards.append(episode_rewards[-1])
            w_nodes.append(nodes)
            w_plan.append(plan_s)

            if len(buffer) >= tcfg.min_buffer:
                n_updates = int(round(len(traj) * tcfg.train_steps_per_env_step))
                for _ in range(max(n_updates, 1)):
                    samples = buffer.sample_indices(sample_rng, tcfg.batch_size)
                    batch = assemble_batch(
                        samples, tcfg.unroll_steps, tcfg.bootstrap_steps,
                        cfg.planner.mvc.gamma, net_cfg.num_actions)
                    report = train_step(bundle, opt_state, batch, tcfg)
                    grad_steps += 1
                    w_value.append(report.value_loss)
                    w_reward_l.append(report.reward_loss)
                    w_policy.append(report.policy_loss)
                    if ckpt_path and tcfg.checkpoint_every > 0 \
                            and grad_steps % tcfg.checkpoint_every == 0:
                        ad.save_checkpoint(ckpt_path, bundle.params, chash)
            if (episode + 1) % tcfg.log_every == 0:
                flush_row(episode + 1)
            if progress is not None:
                progress(episode, episode_rewards[-1])
        if w_rewards:
            # partial logging window at the end still yields a row
            flush_row(tcfg.episodes)
    finally:
        if ckpt_path:
            ad.save_checkpoint(ckpt_path, bundle.params, chash)
        if metrics_fh is not None:
            metrics_fh.close()

    return TrainResult(
        episode_rewards=episode_rewards,
        metrics_rows=metrics_rows,
        gradient_steps=grad_steps,
        bundle=bundle,
        checkpoint_path=ckpt_path,
    )


def evaluate(cfg: RunConfig, bundle: nets.NetworkBundle, episodes: int,
             seed: int):
    """Greedy rollouts with fresh env seeds; returns (mean, stderr, rewards)."""
    env = build_env(cfg)
    planner_cfg = _greedy_planner_cfg(cfg.planner)
    rewards = []
    for ep in range(episodes):
        obs = env.reset(seed + ep)
        done = False
        total = 0.0
        while not done:
            result = plan(obs, bundle, planner_cfg, rng=None)
            action = act(result, 0.0)
            obs, reward, done = env.step(action)
            total += reward
        rewards.append(total)
    rewards = np.asarray(rewards)
    mean = float(rewards.mean())
    stderr = float(rewards.std(ddof=1) / np.sqrt(len(rewards))) \
        if len(rewards) > 1 else 0.0
    return mean, stderr, rewards


def _greedy_planner_cfg(base: PlannerConfig) -> PlannerConfig:
    return dataclasses.replace(base, dirichlet_fraction=0.0, temperature=0.0)


def load_bundle(cfg: RunConfig, checkpoint_path) -> nets.NetworkBundle:
    """Rebuild a network from a checkpoint, verifying the config hash."""
    try:
        raw, stored_hash = ad.load_checkpoint(checkpoint_path)
    except OSError as err:
        raise UsageError(f"cannot read checkpoint: {err}") from err
    expect = config_hash(cfg)
    if stored_hash != expect:
        raise UsageError(
            f"checkpoint hash {stored_hash[:12]} does not match config "
            f"hash {expect[:12]}; wrong config for this checkpoint"
        )
    net_cfg = resolved_network_config(cfg)
    bundle = nets.init_network(net_cfg, np.random.default_rng(0))
    for name, tensor_ in bundle.params.items():
        if name not in raw:
            raise UsageError(f"checkpoint missing parameter '{name}'")
        if tuple(raw[name].shape) != tuple(tensor_.shape):
            raise UsageError(
                f"checkpoint parameter '{name}' has shape {raw[name].shape}, "
                f"expected {tensor_.shape}"
            )
        tensor_.data = raw[name].astype(net_cfg.np_dtype)
    return bundle
