"""Run artifacts: a tab-separated per-step log plus a YAML summary
sidecar.  Columns and precision are fixed (docs/formats.md) so logged
numbers round-trip bit-exactly at the printed precision.
"""

from __future__ import annotations

import math

import numpy as np
import yaml

from .engine import RunRecord, StepRow

LOG_COLUMNS = (
    "time",
    "x",
    "y",
    "heading",
    "v",
    "omega",
    "mode",
    "min_h",
    "active_count",
    "solve_time_s",
)
_FMT = "%.9g"


def write_run_log(record: RunRecord, path) -> None:
    """Write the per-step TSV at `path` and the summary at
    `path + '.summary'`."""
    path = str(path)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\t".join(LOG_COLUMNS) + "\n")
            for r in record.rows:
                fields = [
                    _FMT % r.time,
                    _FMT % r.x,
                    _FMT % r.y,
                    _FMT % r.heading,
                    _FMT % r.v,
                    _FMT % r.omega,
                    r.mode,
                    _FMT % r.min_h,
                    str(r.active_count),
                    _FMT % r.solve_time_s,
                ]
                fh.write("\t".join(fields) + "\n")
        with open(path + ".summary", "w", encoding="utf-8") as fh:
            yaml.safe_dump(run_summary(record), fh, sort_keys=True)
    except OSError as exc:
        raise OSError(f"cannot write run log at {path}: {exc}") from exc


def run_summary(record: RunRecord) -> dict:
    return {
        "scenario": record.scenario_name,
        "variant": record.variant,
        "seed": record.seed,
        "config_hash": record.config_hash,
        "status": record.status,
        "steps": len(record.rows),
        "goal_times": [float(t) for t in record.goal_times],
        "mean_solve_time_s": float(record.mean_solve_time()),
        "min_clearance": float(record.min_clearance()) if record.rows else None,
        "max_kkt_residual": float(record.max_kkt),
        "min_row_margin": None
        if math.isinf(record.min_row_margin)
        else float(record.min_row_margin),
    }


def read_run_log(path) -> tuple[list[StepRow], dict]:
    """Reconstruct rows and the summary from the written artifacts."""
    path = str(path)
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != LOG_COLUMNS:
            raise ValueError(f"unexpected log header in {path}: {header}")
        for line in fh:
            f = line.rstrip("\n").split("\t")
            rows.append(
                StepRow(
                    time=float(f[0]),
                    x=float(f[1]),
                    y=float(f[2]),
                    heading=float(f[3]),
                    v=float(f[4]),
                    omega=float(f[5]),
                    mode=f[6],
                    min_h=float(f[7]),
                    active_count=int(f[8]),
                    solve_time_s=float(f[9]),
                )
            )
    with open(path + ".summary", "r", encoding="utf-8") as fh:
        summary = yaml.safe_load(fh)
    return rows, summary


def write_benchmark_table(cells, path) -> None:
    """Machine-readable benchmark table (TSV)."""
    cols = ("variant", "n_obstacles", "mean_solve_s", "std_solve_s", "mean_active", "repetitions", "steps")
    with open(str(path), "w", encoding="utf-8") as fh:
        fh.write("\t".join(cols) + "\n")
        for c in cells:
            fh.write(
                "\t".join(
                    [
                        c.variant,
                        str(c.n_obstacles),
                        _FMT % c.mean_solve_s,
                        _FMT % c.std_solve_s,
                        _FMT % c.mean_active,
                        str(c.repetitions),
                        str(c.steps),
                    ]
                )
                + "\n"
            )


def read_benchmark_table(path) -> list[dict]:
    out = []
    with open(str(path), "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        for line in fh:
            vals = line.rstrip("\n").split("\t")
            row = dict(zip(header, vals))
            for k in ("mean_solve_s", "std_solve_s", "mean_active"):
                row[k] = float(row[k])
            for k in ("n_obstacles", "repetitions", "steps"):
                row[k] = int(row[k])
            out.append(row)
    return out
