"""Wall-clock comparison of batched and one-node-at-a-time planning.

The comparison is only meaningful on node-matched workloads: a
parallel run with S simulations growing L-layer subtrees creates the
same tree as a sequential run with S * G simulations, G being the
subtree node count. Before timing such a pair the harness verifies the
two modes produced equal statistics node for node; a mismatch aborts
the benchmark with a per-node diff, because timing two different
searches proves nothing.

Timing uses the monotonic clock, a warmup phase, the median over
repetitions with the interquartile range as the noise bar, and a
pinned BLAS thread count so runs are comparable across machines.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .config import BenchConfig
from .errors import BenchEquivalenceError, ConfigError, UsageError
from .planner import PlanResult, PlannerConfig, plan

CSV_HEADER = "mode,sims,layers,nodes,median_ms,iqr_ms,per_node_us,relative"


def subtree_size(num_actions: int, layers: int) -> int:
    """Nodes in a full subtree of the given depth: sum of A^k, k=1..L."""
    return sum(num_actions**k for k in range(1, layers + 1))


@dataclass
class BenchRow:
    mode: str
    sims: int
    layers: int
    nodes: int
    median_ms: float
    iqr_ms: float
    per_node_us: float
    relative: float | None
    equivalence_checked: bool
    threads: int


def _tree_stats(result: PlanResult):
    tree = result.tree
    return [
        (node.parent, node.action, node.depth, node.reward, node.value,
         node.q, node.variance)
        for node in tree.nodes
    ]


def check_pair_equivalence(model, observation, parallel_cfg: PlannerConfig,
                           sequential_cfg: PlannerConfig,
                           tol: float = 1e-5) -> None:
    """Assert both modes produce the same tree, node for node.

    Structure (parent, action, depth) must match exactly; reward,
    value, q and variance to within ``tol`` (the two modes batch their
    network calls differently, so float rounding differs slightly).
    Raises BenchEquivalenceError with a per-node diff otherwise.
    """
    rp = plan(observation, model, parallel_cfg, rng=None)
    rs = plan(observation, model, sequential_cfg, rng=None)
    sp, ss = _tree_stats(rp), _tree_stats(rs)
    problems = []
    if len(sp) != len(ss):
        problems.append(
            f"node counts differ: parallel={len(sp)} sequential={len(ss)}")
    for nid, (a, b) in enumerate(zip(sp, ss)):
        if a[:3] != b[:3]:
            problems.append(
                f"node {nid}: structure (parent, action, depth) "
                f"{a[:3]} != {b[:3]}")
            continue
        labels = ("reward", "value", "q", "variance")
        for label, x, y in zip(labels, a[3:], b[3:]):
            if abs(x - y) > tol:
                problems.append(
                    f"node {nid}: {label} parallel={x!r} sequential={y!r} "
                    f"diff={abs(x - y):.3e}")
    if abs(rp.root_value - rs.root_value) > tol:
        problems.append(
            f"root value parallel={rp.root_value!r} "
            f"sequential={rs.root_value!r}")
    dpol = float(np.max(np.abs(rp.root_policy - rs.root_policy)))
    if dpol > tol:
        problems.append(f"root policy max diff {dpol:.3e}")
    if problems:
        head = (
            f"parallel(sims={parallel_cfg.num_simulations}, "
            f"layers={parallel_cfg.subtree_layers}) and "
            f"sequential(sims={sequential_cfg.num_simulations}) disagree"
        )
        raise BenchEquivalenceError(head, dump="\n".join(problems[:50]))


def _time_config(model, observation, planner_cfg: PlannerConfig,
                 cfg: BenchConfig):
    """(median seconds, iqr seconds, nodes created) over the repetitions."""
    for _ in range(cfg.warmup):
        plan(observation, model, planner_cfg, rng=None)
    times = []
    nodes = None
    for _ in range(cfg.repetitions):
        result = plan(observation, model, planner_cfg, rng=None)
        times.append(result.wall_time)
        if nodes is None:
            nodes = result.nodes_created
        elif nodes != result.nodes_created:
            raise UsageError(
                "node count changed between repetitions; planning is "
                "not deterministic under this config")
    med = float(np.median(times))
    q25, q75 = np.percentile(times, [25, 75])
    return med, float(q75 - q25), nodes


def run_bench(model, env, cfg: BenchConfig, base: PlannerConfig,
              seed: int = 0) -> list[BenchRow]:
    """Time node-matched mode pairs on one observation of ``env``.

    For every subtree depth in ``cfg.layers``: a parallel run with
    ``cfg.num_simulations`` expansions, a sequential run with the
    matched one-node budget (equivalence verified first), and
    optionally the count-based baseline at the same node budget.
    """
    if cfg.repetitions < 10:
        raise ConfigError("repetitions must be at least 10 for a stable median")
    observation = env.reset(seed)
    rows = []
    with threadpool_limits(limits=cfg.threads):
        for layers in cfg.layers:
            group = subtree_size(model.num_actions, layers)
            seq_sims = cfg.num_simulations * group
            budget = 2 * (seq_sims + 1)
            par_cfg = dataclasses.replace(
                base, mode="parallel_mvc",
                num_simulations=cfg.num_simulations, subtree_layers=layers,
                dirichlet_fraction=0.0, max_depth=None,
                max_nodes=max(base.max_nodes, budget))
            seq_cfg = dataclasses.replace(
                par_cfg, mode="seq_mvc", num_simulations=seq_sims)
            check_pair_equivalence(model, observation, par_cfg, seq_cfg)
            for pcfg in (seq_cfg, par_cfg):
                med, iqr, nodes = _time_config(model, observation, pcfg, cfg)
                rows.append(BenchRow(
                    mode=pcfg.mode, sims=pcfg.num_simulations, layers=layers,
                    nodes=nodes, median_ms=med * 1e3, iqr_ms=iqr * 1e3,
                    per_node_us=med * 1e6 / max(nodes, 1), relative=None,
                    equivalence_checked=True, threads=cfg.threads))
            if cfg.include_counts_baseline:
                cnt_cfg = dataclasses.replace(
                    seq_cfg, mode="seq_counts")
                med, iqr, nodes = _time_config(model, observation, cnt_cfg, cfg)
                rows.append(BenchRow(
                    mode="seq_counts", sims=seq_sims, layers=layers,
                    nodes=nodes, median_ms=med * 1e3, iqr_ms=iqr * 1e3,
                    per_node_us=med * 1e6 / max(nodes, 1), relative=None,
                    equivalence_checked=False, threads=cfg.threads))
    return rows


@dataclass
class SpeedupReport:
    rows: list
    table: str
    csv_text: str


def format_row_csv(row: BenchRow) -> str:
    rel = "" if row.relative is None else f"{row.relative:.4f}"
    return (f"{row.mode},{row.sims},{row.layers},{row.nodes},"
            f"{row.median_ms:.4f},{row.iqr_ms:.4f},{row.per_node_us:.3f},"
            f"{rel}")


def speedup_report(rows) -> SpeedupReport:
    """Relative runtimes against the matched sequential baseline.

    Each subtree-depth group is normalized by its own seq_mvc row, so
    the baseline row reads 1.0 and the parallel row's relative value is
    the runtime ratio on the identical workload.
    """
    rows = [dataclasses.replace(r) for r in rows]
    baselines = {}
    for row in rows:
        if row.mode == "seq_mvc" and row.layers not in baselines:
            baselines[row.layers] = row.median_ms
    if not baselines:
        raise UsageError(
            "speedup_report needs at least one seq_mvc baseline row")
    fallback = next(iter(baselines.values()))
    for row in rows:
        base = baselines.get(row.layers, fallback)
        row.relative = row.median_ms / base if base > 0 else float("nan")
    header = (f"{'mode':<14} {'sims':>5} {'layers':>6} {'nodes':>6} "
              f"{'median_ms':>10} {'iqr_ms':>8} {'per_node_us':>11} "
              f"{'relative':>8} {'equiv':>5} {'threads':>7}")
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row.mode:<14} {row.sims:>5} {row.layers:>6} {row.nodes:>6} "
            f"{row.median_ms:>10.4f} {row.iqr_ms:>8.4f} "
            f"{row.per_node_us:>11.3f} {row.relative:>8.4f} "
            f"{'yes' if row.equivalence_checked else 'no':>5} "
            f"{row.threads:>7}")
    for layers in sorted(baselines):
        par = [r for r in rows if r.mode == "parallel_mvc" and r.layers == layers]
        seq = [r for r in rows if r.mode == "seq_mvc" and r.layers == layers]
        if par and seq:
            ratio = par[0].per_node_us / seq[0].per_node_us \
                if seq[0].per_node_us > 0 else float("nan")
            lines.append(
                f"layers={layers}: parallel per-node time is "
                f"{ratio:.3f}x sequential ({par[0].nodes} nodes)")
    csv_lines = [CSV_HEADER] + [format_row_csv(r) for r in rows]
    return SpeedupReport(rows=rows, table="\n".join(lines),
                         csv_text="\n".join(csv_lines) + "\n")
