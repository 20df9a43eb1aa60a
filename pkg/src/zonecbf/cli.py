"""Command-line entry points.

Subcommands: run one scenario under one variant, bench the variant
grid, validate a scenario file (optionally auditing an existing log),
and plot a run log or benchmark table.  Exit codes: 0 success, 1 run
failure (collision / timeout / safety stop), 2 usage or config error.
"""

from __future__ import annotations

import argparse
import os
import sys
from importlib import resources

from .engine import (
    STATUS_GOALS,
    VARIANTS,
    run_benchmark,
    run_scenario,
    validate_run,
)
from .runlog import (
    read_benchmark_table,
    read_run_log,
    run_summary,
    write_benchmark_table,
    write_run_log,
)
from .scenario import ScenarioError, parse_scenario, parse_scenario_text

EXIT_OK = 0
EXIT_RUN_FAILED = 1
EXIT_USAGE = 2


def resolve_scenario(name_or_path: str):
    """A path to a scenario file, or the name of a bundled scenario."""
    if os.path.exists(name_or_path):
        return parse_scenario(name_or_path)
    base = name_or_path if name_or_path.endswith(".yaml") else name_or_path + ".yaml"
    ref = resources.files("zonecbf").joinpath("scenarios", base)
    if ref.is_file():
        return parse_scenario_text(ref.read_text(encoding="utf-8"), name=base[: -len(".yaml")])
    raise ScenarioError("<scenario>", f"no file or bundled scenario named {name_or_path!r}")


def bundled_scenarios() -> list[str]:
    out = []
    for entry in resources.files("zonecbf").joinpath("scenarios").iterdir():
        if entry.name.endswith(".yaml"):
            out.append(entry.name[: -len(".yaml")])
    return sorted(out)


def _out_dir(args) -> str:
    out = args.out or os.environ.get("ZONECBF_OUT") or "out"
    os.makedirs(out, exist_ok=True)
    return out


def _cmd_run(args) -> int:
    cfg = resolve_scenario(args.scenario)
    seed = args.seed if args.seed is not None else cfg.seed
    record = run_scenario(cfg, args.variant, seed=seed)
    out = _out_dir(args)
    stem = os.path.join(out, f"{cfg.name}_{args.variant}_s{seed}")
    write_run_log(record, stem + ".log")
    from .plots import emit_plot

    emit_plot(record, stem + ".svg", scenario=cfg)
    summary = run_summary(record)
    for key in ("scenario", "variant", "seed", "status", "steps", "goal_times", "mean_solve_time_s", "min_clearance"):
        print(f"{key}: {summary[key]}")
    print(f"artifacts: {stem}.log {stem}.log.summary {stem}.svg")
    violations = validate_run(record, cfg)
    for v in violations:
        print(f"invariant violation: {v.invariant} at step {v.step}: {v.detail}")
    if record.status != STATUS_GOALS or violations:
        return EXIT_RUN_FAILED
    return EXIT_OK


def _cmd_bench(args) -> int:
    scenarios = {}
    for item in args.scenario:
        cfg = resolve_scenario(item)
        scenarios[len(cfg.obstacles)] = cfg
    variants = args.variant or list(VARIANTS)
    cells = run_benchmark(
        scenarios,
        variants,
        repetitions=args.repetitions,
        max_steps=args.max_steps,
        base_seed=args.seed or 0,
    )
    out = _out_dir(args)
    table_path = os.path.join(out, "benchmark.tsv")
    write_benchmark_table(cells, table_path)
    from .plots import emit_plot

    emit_plot(cells, os.path.join(out, "benchmark.svg"))
    print(f"{'variant':<14}{'n_obs':>6}{'mean_s':>12}{'std_s':>12}{'mean_active':>12}")
    for c in cells:
        print(
            f"{c.variant:<14}{c.n_obstacles:>6}{c.mean_solve_s:>12.5f}"
            f"{c.std_solve_s:>12.5f}{c.mean_active:>12.2f}"
        )
    print(f"artifacts: {table_path} {os.path.join(out, 'benchmark.svg')}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    cfg = resolve_scenario(args.scenario)
    print(f"scenario ok: {cfg.name} ({len(cfg.obstacles)} obstacles, {len(cfg.goals['points'])} goals)")
    if args.log:
        from .engine import RunRecord

        rows, summary = read_run_log(args.log)
        record = RunRecord(
            scenario_name=summary["scenario"],
            variant=summary["variant"],
            seed=summary["seed"],
            config_hash=summary["config_hash"],
            rows=rows,
            status=summary["status"],
            goal_times=summary["goal_times"],
            max_kkt=summary.get("max_kkt_residual", 0.0),
        )
        violations = validate_run(record, cfg)
        for v in violations:
            print(f"invariant violation: {v.invariant} at step {v.step}: {v.detail}")
        print(f"log rows: {len(rows)}, violations: {len(violations)}")
        if violations:
            return EXIT_RUN_FAILED
    return EXIT_OK


def _cmd_plot(args) -> int:
    from .plots import emit_plot

    out = _out_dir(args)
    if args.bench:
        rows = read_benchmark_table(args.bench)
        from .engine import BenchmarkCell

        cells = [BenchmarkCell(**r) for r in rows]
        target = os.path.join(out, "benchmark.svg")
        emit_plot(cells, target)
    else:
        if not args.log:
            print("plot needs --log or --bench", file=sys.stderr)
            return EXIT_USAGE
        cfg = resolve_scenario(args.scenario) if args.scenario else None
        rows, summary = read_run_log(args.log)
        from .engine import RunRecord

        record = RunRecord(
            scenario_name=summary["scenario"],
            variant=summary["variant"],
            seed=summary["seed"],
            config_hash=summary["config_hash"],
            rows=rows,
            status=summary["status"],
            goal_times=summary["goal_times"],
        )
        target = os.path.join(out, os.path.basename(str(args.log)) + ".svg")
        emit_plot(record, target, scenario=cfg)
    print(f"artifacts: {target}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="zonecbf",
        description="Buffer-zone barrier navigation: scenario runs, benchmarks, validation, plots.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario under one variant")
    run.add_argument("--scenario", required=True, help="path or bundled name")
    run.add_argument("--variant", default="mpc_cbf_zone", choices=VARIANTS)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default=None, help="output directory (or $ZONECBF_OUT)")

    bench = sub.add_parser("bench", help="benchmark variants across scenarios")
    bench.add_argument("--scenario", required=True, nargs="+", help="paths or bundled names")
    bench.add_argument("--variant", nargs="*", choices=VARIANTS)
    bench.add_argument("--repetitions", type=int, default=5)
    bench.add_argument("--max-steps", type=int, default=150)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", default=None)

    val = sub.add_parser("validate", help="validate a scenario file (and optionally a run log)")
    val.add_argument("--scenario", required=True)
    val.add_argument("--log", default=None)

    plot = sub.add_parser("plot", help="plot a run log or benchmark table")
    plot.add_argument("--scenario", default=None)
    plot.add_argument("--log", default=None)
    plot.add_argument("--bench", default=None)
    plot.add_argument("--out", default=None)
    return ap


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "bench":
            return _cmd_bench(args)
        if args.command == "validate":
            return _cmd_validate(args)
        if args.command == "plot":
            return _cmd_plot(args)
    except ScenarioError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


def main() -> None:
    sys.exit(cli_main())
