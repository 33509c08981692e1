"""Command-line entry point: train / eval / bench / plot.

One binary, four subcommands, all driven by a JSON config file whose
fields mirror the RunConfig dataclass tree. Precedence: built-in
defaults, then the file, then ``--set section.key=value`` overrides,
then the dedicated flags. The only environment variable honored is
TREEPLAN_OUT_DIR, which replaces the configured output directory when
no ``--out-dir`` flag is given.

Exit codes: 0 success, 1 runtime failure (training/benchmark errors),
2 usage or configuration errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import nets
from .bench import run_bench, speedup_report
from .config import (
    apply_overrides, build_env, config_from_dict, config_hash,
    load_config_file, resolved_network_config, save_config,
)
from .errors import (
    BenchEquivalenceError, ConfigError, TreeplanError, UsageError,
)
from .training import METRICS_HEADER, evaluate, load_bundle, train

OUT_DIR_ENV = "TREEPLAN_OUT_DIR"


def _resolve_config(config_path, sets, episodes=None, seed=None,
                    out_dir=None):
    if config_path is not None:
        cfg = load_config_file(config_path, sets or ())
    else:
        cfg = config_from_dict(apply_overrides({}, sets or ()))
    if episodes is not None:
        cfg = dataclasses.replace(
            cfg, training=dataclasses.replace(cfg.training, episodes=episodes))
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    if out_dir is None:
        out_dir = os.environ.get(OUT_DIR_ENV)
    if out_dir:
        cfg = dataclasses.replace(cfg, out_dir=out_dir)
    return cfg


def cmd_train(args) -> int:
    cfg = _resolve_config(args.config, args.set, episodes=args.episodes,
                          seed=args.seed, out_dir=args.out_dir)
    os.makedirs(cfg.out_dir, exist_ok=True)
    save_config(cfg, os.path.join(cfg.out_dir, "config.json"))
    result = train(cfg, out_dir=cfg.out_dir,
                   metrics_path=os.path.join(cfg.out_dir, "metrics.csv"))
    tail = result.episode_rewards[-10:]
    print(f"trained {len(result.episode_rewards)} episodes, "
          f"{result.gradient_steps} gradient steps")
    print(f"mean reward over last {len(tail)} episodes: "
          f"{float(np.mean(tail)):.4f}")
    print(f"metrics: {os.path.join(cfg.out_dir, 'metrics.csv')}")
    if result.checkpoint_path:
        print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    config_path = args.config
    if config_path is None:
        config_path = os.path.join(os.path.dirname(args.checkpoint) or ".",
                                   "config.json")
    cfg = _resolve_config(config_path, args.set, seed=args.seed,
                          out_dir=args.out_dir)
    bundle = load_bundle(cfg, args.checkpoint)
    episodes = args.episodes if args.episodes is not None else cfg.eval_episodes
    if episodes < 1:
        raise UsageError("eval needs at least one episode")
    mean, stderr, rewards = evaluate(cfg, bundle, episodes, cfg.seed)
    # single episode: the standard error is reported as 0 by convention
    print(f"mean reward {mean:.4f} +/- {stderr:.4f} (stderr, "
          f"{episodes} episodes)")
    out_dir = args.out_dir or os.path.dirname(args.checkpoint) or "."
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "eval.csv")
    with open(csv_path, "w") as fh:
        fh.write("episode,reward\n")
        for i, r in enumerate(rewards):
            fh.write(f"{i},{r:.6f}\n")
    print(f"per-episode rewards: {csv_path}")
    return 0


def cmd_bench(args) -> int:
    cfg = _resolve_config(args.config, args.set, seed=args.seed,
                          out_dir=args.out_dir)
    env = build_env(cfg)
    if args.checkpoint:
        bundle = load_bundle(cfg, args.checkpoint)
    else:
        net_cfg = resolved_network_config(cfg)
        bundle = nets.init_network(net_cfg, np.random.default_rng(cfg.seed))
    rows = run_bench(bundle, env, cfg.bench, cfg.planner, seed=cfg.seed)
    report = speedup_report(rows)
    print(report.table)
    os.makedirs(cfg.out_dir, exist_ok=True)
    csv_path = os.path.join(cfg.out_dir, "bench.csv")
    with open(csv_path, "w") as fh:
        fh.write(report.csv_text)
    print(f"rows: {csv_path}")
    return 0


def read_metrics_csv(path):
    """Parse a metrics CSV into column arrays, or fail naming the line."""
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError:
        raise ConfigError(f"metrics file not found: {path}")
    if not lines or lines[0] != METRICS_HEADER:
        raise ConfigError(f"{path}:1: expected header '{METRICS_HEADER}'")
    if len(lines) < 2:
        raise ConfigError(f"{path}:2: no data rows")
    names = METRICS_HEADER.split(",")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(names):
            raise ConfigError(
                f"{path}:{lineno}: expected {len(names)} fields, "
                f"got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: non-numeric field")
    if not rows:
        raise ConfigError(f"{path}:2: no data rows")
    data = np.asarray(rows)
    return {name: data[:, i] for i, name in enumerate(names)}


def _plot_group_key(csv_path):
    """Hash of the sibling config.json, or a shared bucket without one."""
    sibling = os.path.join(os.path.dirname(csv_path) or ".", "config.json")
    if os.path.exists(sibling):
        return config_hash(load_config_file(sibling))
    return "ungrouped"


def _work_axis(cols):
    """Cumulative planning cost per row: measured ms when the run logged
    timing, otherwise node expansions as a machine-independent proxy."""
    steps = cols["env_steps"]
    delta = np.diff(steps, prepend=0.0)
    if np.any(cols["plan_ms"] > 0):
        return np.cumsum(delta * cols["plan_ms"]) / 1000.0, "planning time (s)"
    return (np.cumsum(delta * cols["nodes_per_sim"]),
            "planning work (expanded nodes per simulation x env steps)")


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups: dict = {}
    work_label = None
    for path in args.csvs:
        cols = read_metrics_csv(path)
        work, label = _work_axis(cols)
        work_label = work_label or label
        key = _plot_group_key(path)
        groups.setdefault(key, []).append(
            (cols["env_steps"], work, cols["mean_reward"]))

    fig, axes = plt.subplots(1, 2, figsize=(11, 4.2))
    for key, runs in sorted(groups.items()):
        name = key[:8]
        for ax, xi in ((axes[0], 0), (axes[1], 1)):
            xs = [run[xi] for run in runs]
            ys = [run[2] for run in runs]
            if len(runs) == 1:
                ax.plot(xs[0], ys[0], label=name)
                continue
            hi = min(float(x[-1]) for x in xs)
            grid = np.linspace(0.0, hi, 64)
            interp = np.stack([np.interp(grid, x, y) for x, y in zip(xs, ys)])
            mean = interp.mean(axis=0)
            stderr = interp.std(axis=0, ddof=1) / np.sqrt(len(runs))
            line, = ax.plot(grid, mean, label=f"{name} ({len(runs)} seeds)")
            ax.fill_between(grid, mean - stderr, mean + stderr,
                            alpha=0.25, color=line.get_color())
    axes[0].set_xlabel("environment steps")
    axes[1].set_xlabel(work_label or "planning work")
    for ax in axes:
        ax.set_ylabel("mean episode reward")
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treeplan",
        description="Tree search planning with batched subtree expansion",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted config override, e.g. planner.mode=seq_mvc")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default=None)

    p_train = sub.add_parser("train", help="self-play training run")
    common(p_train)
    p_train.add_argument("--episodes", type=int, default=None,
                         help="shorthand for --set training.episodes=N")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--episodes", type=int, default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_bench = sub.add_parser("bench", help="parallel vs sequential timing")
    common(p_bench)
    p_bench.add_argument("--checkpoint", default=None,
                         help="bench trained weights instead of fresh ones")
    p_bench.set_defaults(func=cmd_bench)

    p_plot = sub.add_parser("plot", help="learning curves from metrics CSVs")
    p_plot.add_argument("csvs", nargs="+", help="metrics.csv files")
    p_plot.add_argument("--out", default="learning_curves.png")
    p_plot.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BenchEquivalenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.dump:
            print(exc.dump, file=sys.stderr)
        return 1
    except TreeplanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
