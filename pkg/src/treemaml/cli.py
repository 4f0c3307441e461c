"""Experiment grid runner and `treemaml` command-line entry point.

A JSON spec file describes the task distribution, the meta-training template,
and the (mode x points x seed) grid. Every RNG stream is derived from the spec
seeds alone, and for a given (points, seed) cell all modes see identical
training batches, support batches, and meta-test tasks, so mode comparisons
are paired.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .clustering import ClusterConfig
from .meta import (
    MODES,
    AdaptationTrace,
    DivergenceError,
    MetaConfig,
    adapt_and_evaluate,
    adapt_tree,
    generator_hierarchy_tree,
    meta_train,
)
from .models import LinearRegressionModel
from .numerics import confidence_halfwidth_95
from .tasks import (
    ConfigError,
    TaskGeneratorConfig,
    TaskSampler,
    build_parameter_tree,
    distribution_to_dict,
    sample_task_batch,
)

_SUPPORT_ID_BASE = 10**6
_TARGET_ID_BASE = 10**9
_DIAG_ID_BASE = 2 * 10**9


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment grid: distribution, meta template, and sweep axes."""

    generator: TaskGeneratorConfig
    meta: MetaConfig
    modes: tuple = ("baseline", "maml", "tree_fixed", "tree_learned")
    points_sweep: tuple = (5, 10, 20)
    meta_test_tasks: int = 400
    replicate_seeds: tuple = (0, 1, 2)
    eval_test_points: int = 20

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "points_sweep", tuple(int(p) for p in self.points_sweep))
        object.__setattr__(self, "replicate_seeds", tuple(int(s) for s in self.replicate_seeds))
        unknown = [m for m in self.modes if m not in MODES]
        if unknown:
            raise ConfigError(f"unknown modes {unknown}; allowed: {list(MODES)}")
        if not self.modes or not self.points_sweep or not self.replicate_seeds:
            raise ConfigError("modes, points_sweep and replicate_seeds must be non-empty")
        if any(p < 1 for p in self.points_sweep):
            raise ConfigError("points_sweep entries must be >= 1")
        if self.meta_test_tasks < 2:
            raise ConfigError("meta_test_tasks must be >= 2 (CI needs two samples)")
        if self.eval_test_points < 1:
            raise ConfigError("eval_test_points must be >= 1")


def spec_from_dict(d: dict) -> ExperimentSpec:
    cluster = ClusterConfig(**d.get("clustering", {}))
    meta = MetaConfig(**{**d.get("meta", {}), "cluster": cluster})
    fields = {}
    for key in ("modes", "points_sweep", "meta_test_tasks", "replicate_seeds", "eval_test_points"):
        if key in d:
            fields[key] = d[key]
    return ExperimentSpec(
        generator=TaskGeneratorConfig(**d.get("generator", {})),
        meta=meta,
        **fields,
    )


def load_spec(path) -> ExperimentSpec:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"spec file {path} is not valid JSON: {e}") from e
    if not isinstance(payload, dict):
        raise ConfigError("spec file must contain a JSON object")
    try:
        return spec_from_dict(payload)
    except TypeError as e:
        # Unknown section keys surface as dataclass constructor errors.
        raise ConfigError(f"spec file {path} has an invalid field: {e}") from e


@dataclass(frozen=True)
class RunResult:
    """One grid cell's evaluation outcome."""

    mode: str
    points_per_task: int
    per_task_mse: tuple
    mean_mse: float
    ci95: float
    seed: int
    wall_seconds: float


@dataclass(frozen=True)
class CellFailure:
    mode: str
    points_per_task: int
    seed: int
    error: str


@dataclass
class ExperimentOutcome:
    results: list
    failures: list
    training_logs: list
    trees: dict


def cell_config(spec: ExperimentSpec, mode: str, points: int, seed: int) -> MetaConfig:
    """Specialize the spec's meta template to one grid cell."""
    fixed = generator_hierarchy_tree(spec.meta.inner_steps) if mode == "tree_fixed" else None
    return replace(
        spec.meta,
        mode=mode,
        points_train=points,
        points_val=points,
        seed=seed,
        fixed_tree=fixed,
    )


def _run_cell(model, tree, spec: ExperimentSpec, mode: str, points: int, seed: int,
              dump_tree: bool):
    cfg = cell_config(spec, mode, points, seed)
    root_ss = np.random.SeedSequence([spec.generator.seed, seed, points])
    train_ss, eval_ss, diag_ss = root_ss.spawn(3)

    t0 = time.perf_counter()
    sampler = TaskSampler(tree, np.random.default_rng(train_ss), start_id=0)
    omega, log = meta_train(model, sampler, cfg)

    m = cfg.tasks_per_batch
    needs_support = mode in ("tree_fixed", "tree_learned")
    per_task = []
    for i, child in enumerate(eval_ss.spawn(spec.meta_test_tasks)):
        support_ss, target_ss = child.spawn(2)
        target = sample_task_batch(
            tree, 1, np.random.default_rng(target_ss),
            n_train=points, n_val=0, n_test=spec.eval_test_points,
            start_id=_TARGET_ID_BASE + i,
        )[0]
        support = []
        if needs_support:
            support = sample_task_batch(
                tree, m, np.random.default_rng(support_ss),
                n_train=points, n_val=0, start_id=_SUPPORT_ID_BASE + i * m,
            )
        per_task.append(adapt_and_evaluate(model, omega, support, target, cfg))
    wall = time.perf_counter() - t0

    result = RunResult(
        mode=mode,
        points_per_task=points,
        per_task_mse=tuple(float(v) for v in per_task),
        mean_mse=float(np.mean(per_task)),
        ci95=confidence_halfwidth_95(per_task),
        seed=seed,
        wall_seconds=wall,
    )

    tree_dump = None
    if dump_tree and needs_support:
        diag = TaskSampler(tree, np.random.default_rng(diag_ss), start_id=_DIAG_ID_BASE)
        trace = adapt_tree(model, omega, diag.sample_batch(m, points, points), cfg)
        tree_dump = trace_tree_to_dict(trace)
    return result, log, tree_dump


def run_experiment(spec: ExperimentSpec, dump_tree: bool = False, echo=None) -> ExperimentOutcome:
    """Run the full grid sequentially; divergence aborts only its own cell."""
    model = LinearRegressionModel(spec.generator.dim)
    tree = build_parameter_tree(spec.generator)
    outcome = ExperimentOutcome([], [], [], {})
    for mode in spec.modes:
        for points in spec.points_sweep:
            for seed in spec.replicate_seeds:
                try:
                    result, log, tree_dump = _run_cell(
                        model, tree, spec, mode, points, seed, dump_tree
                    )
                except DivergenceError as e:
                    outcome.failures.append(
                        CellFailure(mode, points, seed, f"diverged: {e} (iteration {e.iteration})")
                    )
                    if echo:
                        echo(f"[{mode} points={points} seed={seed}] FAILED: {e}")
                    continue
                outcome.results.append(result)
                for rec in log:
                    outcome.training_logs.append(
                        {"mode": mode, "points": points, "seed": seed, **rec}
                    )
                if tree_dump is not None:
                    outcome.trees[f"tree_{mode}_{points}_{seed}"] = tree_dump
                if echo:
                    echo(
                        f"[{mode} points={points} seed={seed}] "
                        f"mean_mse={result.mean_mse:.4f} ci95={result.ci95:.4f} "
                        f"wall={result.wall_seconds:.1f}s"
                    )
    return outcome


def trace_tree_to_dict(trace: AdaptationTrace) -> dict:
    """Render an adaptation trace's nested partitions as a cluster-tree dump."""
    all_ids = sorted(trace.final_params)
    ids = itertools.count(1)
    root = {"node_id": 0, "depth": 0, "member_tasks": all_ids, "children": []}
    prev_nodes = [root]
    for depth, level in enumerate(trace.steps, start=1):
        current = []
        for cs in level:
            node = {
                "node_id": next(ids),
                "depth": depth,
                "member_tasks": sorted(cs.members),
                "children": [],
            }
            prev_nodes[cs.parent]["children"].append(node)
            current.append(node)
        prev_nodes = current
    return root


def render_csv(results: Sequence[RunResult], spec: ExperimentSpec) -> str:
    """Deterministic per-cell CSV. Timings are deliberately excluded so two
    identical invocations produce identical bytes; see table footer for walls."""
    order = {m: i for i, m in enumerate(spec.modes)}
    rows = sorted(results, key=lambda r: (order[r.mode], r.points_per_task, r.seed))
    lines = ["mode,points,seed,mean_mse,ci95"]
    for r in rows:
        lines.append(f"{r.mode},{r.points_per_task},{r.seed},{r.mean_mse!r},{r.ci95!r}")
    return "\n".join(lines) + "\n"


def render_table(results: Sequence[RunResult], failures: Sequence[CellFailure],
                 spec: ExperimentSpec) -> str:
    """Aligned mean +/- ci95 per (mode, points), averaged across replicate seeds."""
    by_cell: dict = {}
    for r in results:
        by_cell.setdefault((r.mode, r.points_per_task), []).append(r)

    header = ["mode"] + [f"{p} pts" for p in spec.points_sweep]
    rows = [header]
    for mode in spec.modes:
        row = [mode]
        for points in spec.points_sweep:
            cell = by_cell.get((mode, points))
            if not cell:
                row.append("-")
                continue
            mean = float(np.mean([r.mean_mse for r in cell]))
            ci = float(np.mean([r.ci95 for r in cell]))
            row.append(f"{mean:.4f} +/- {ci:.4f}")
        rows.append(row)

    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in rows]
    lines.append("")
    lines.append(f"cells: {len(results)} ok, {len(failures)} failed; "
                 f"{spec.meta_test_tasks} meta-test tasks per cell, "
                 f"seeds {list(spec.replicate_seeds)}")
    total_wall = sum(r.wall_seconds for r in results)
    lines.append(f"wall: {total_wall:.1f}s total; per cell: "
                 + ", ".join(f"{r.mode}/{r.points_per_task}/{r.seed}={r.wall_seconds:.1f}s"
                             for r in results))
    for f in failures:
        lines.append(f"FAILED {f.mode}/{f.points_per_task}/{f.seed}: {f.error}")
    return "\n".join(lines) + "\n"


def emit_table(outcome: ExperimentOutcome, spec: ExperimentSpec, out_dir) -> tuple:
    """Write results.csv and table.txt under out_dir; returns (table, csv) text."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_text = render_csv(outcome.results, spec)
    table_text = render_table(outcome.results, outcome.failures, spec)
    (out / "results.csv").write_text(csv_text)
    (out / "table.txt").write_text(table_text)
    return table_text, csv_text


def write_outputs(outcome: ExperimentOutcome, spec: ExperimentSpec, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    emit_table(outcome, spec, out)
    with open(out / "log.jsonl", "w") as fh:
        for rec in outcome.training_logs:
            fh.write(json.dumps(rec) + "\n")
    for name, tree_dump in outcome.trees.items():
        (out / f"{name}.json").write_text(json.dumps(tree_dump, indent=2))


def export_distribution(spec: ExperimentSpec, path) -> None:
    """Write the task distribution (config + node centers) for audit."""
    tree = build_parameter_tree(spec.generator)
    Path(path).write_text(json.dumps(distribution_to_dict(tree)))


def export_tree(trace: AdaptationTrace, path) -> None:
    Path(path).write_text(json.dumps(trace_tree_to_dict(trace), indent=2))


def _csv_ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip() != "")


def _apply_overrides(spec: ExperimentSpec, args) -> ExperimentSpec:
    fields = {}
    if args.mode:
        fields["modes"] = tuple(m.strip() for m in args.mode.split(",") if m.strip())
    if args.points:
        fields["points_sweep"] = _csv_ints(args.points)
    if args.seed:
        fields["replicate_seeds"] = _csv_ints(args.seed)
    if args.second_order:
        fields["meta"] = replace(spec.meta, second_order=(args.second_order == "on"))
    return replace(spec, **fields) if fields else spec


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="treemaml",
        description="Meta-learning benchmark runner (maml and tree variants).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment grid from a JSON spec file")
    run_p.add_argument("spec", help="path to the JSON experiment spec")
    run_p.add_argument("--mode", help="comma-separated subset of modes to run")
    run_p.add_argument("--points", help="comma-separated points-per-task sweep override")
    run_p.add_argument("--seed", help="comma-separated replicate seeds override")
    run_p.add_argument("--out-dir", default="treemaml-out", help="output directory")
    run_p.add_argument("--dump-tree", action="store_true",
                       help="write a tree_*.json partition dump per tree-mode cell")
    run_p.add_argument("--second-order", choices=("on", "off"),
                       help="override the meta-gradient order")

    dist_p = sub.add_parser("export-dist", help="write the task distribution to JSON")
    dist_p.add_argument("spec", help="path to the JSON experiment spec")
    dist_p.add_argument("--out", default="centers.json", help="output file")

    sub.add_parser("version", help="print the package version")

    args = parser.parse_args(argv)

    if args.command == "version":
        from treemaml import __version__

        print(__version__)
        return 0

    try:
        spec = load_spec(args.spec)
    except (OSError, ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    if args.command == "export-dist":
        export_distribution(spec, args.out)
        print(f"wrote {args.out}")
        return 0

    try:
        spec = _apply_overrides(spec, args)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    outcome = run_experiment(spec, dump_tree=args.dump_tree, echo=lambda s: print(s, flush=True))
    write_outputs(outcome, spec, args.out_dir)
    print(f"\n{render_table(outcome.results, outcome.failures, spec)}")
    print(f"outputs in {args.out_dir}")
    if outcome.failures:
        for f in outcome.failures:
            print(f"cell failed: {f.mode}/{f.points_per_task}/{f.seed}: {f.error}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
