"""Static vector-graphics emission: trajectory plots with obstacle
footprints and buffer rings, and benchmark bar charts.

Every meaningful artist carries an SVG group id (gid) so emitted files
can be audited by element counts.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .engine import RunRecord
from .scenario import ScenarioConfig
from .world import ObstacleSpec, _boundary_points


def _ring_points(spec: ObstacleSpec, center, offset: float, n: int = 90) -> np.ndarray:
    """Boundary inflated outward by `offset` along surface normals,
    approximated by radial sampling."""
    pts = _boundary_points(spec, np.asarray(center), n)
    c = np.asarray(center)
    d = pts - c
    norm = np.hypot(d[:, 0], d[:, 1])
    norm[norm < 1e-12] = 1.0
    return pts + d / norm[:, None] * offset


def emit_plot(data, path, scenario: ScenarioConfig | None = None) -> None:
    """Write a vector-graphics file: a trajectory plot for a RunRecord
    (with obstacle footprints and buffer rings when a scenario is
    given), or grouped bars for a benchmark table."""
    if isinstance(data, RunRecord):
        _plot_run(data, path, scenario)
    else:
        _plot_benchmark(data, path)


def _plot_run(record: RunRecord, path, scenario: ScenarioConfig | None) -> None:
    fig, ax = plt.subplots(figsize=(7, 7))
    xs = [r.x for r in record.rows]
    ys = [r.y for r in record.rows]
    (line,) = ax.plot(xs, ys, "-", color="tab:blue", lw=1.5, label=record.variant)
    line.set_gid("robot-path")
    if scenario is not None:
        margin = (
            scenario.barrier["R_safe"]
            + scenario.robot["radius"]
            + scenario.controller["ell_d"]
        )
        c_k = scenario.barrier["c_k"]
        d_k = scenario.barrier["d_k"]
        for i, ob in enumerate(scenario.obstacles):
            spec = _spec_of(ob)
            center = np.asarray(ob["center"], dtype=float)
            body = _boundary_points(spec, center, 90)
            poly = plt.Polygon(body, closed=True, facecolor="0.55", edgecolor="k", zorder=3)
            poly.set_gid(f"obstacle-{i}")
            ax.add_patch(poly)
            for tag, off, style in (
                ("ring-ck", margin + c_k, "--"),
                ("ring-dk", margin + c_k + d_k, ":"),
            ):
                ring = _ring_points(spec, center, off)
                (rl,) = ax.plot(
                    np.append(ring[:, 0], ring[0, 0]),
                    np.append(ring[:, 1], ring[0, 1]),
                    style,
                    color="tab:orange" if tag == "ring-ck" else "tab:purple",
                    lw=0.8,
                )
                rl.set_gid(f"{tag}-{i}")
        for j, g in enumerate(scenario.goals["points"]):
            m = ax.plot(g[0], g[1], "*", color="tab:green", markersize=14)[0]
            m.set_gid(f"goal-{j}")
        sx, sy, _ = scenario.robot["start"]
        ax.plot(sx, sy, "o", color="tab:blue", markersize=8)[0].set_gid("start")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    ax.set_title(f"{record.scenario_name} / {record.variant} / seed {record.seed} ({record.status})")
    ax.legend(loc="best", fontsize=8)
    fig.savefig(str(path), format=_format_of(path))
    plt.close(fig)


def _spec_of(ob: dict) -> ObstacleSpec:
    kw = {k: ob[k] for k in ("radius", "a", "b", "angle", "width", "height") if k in ob}
    return ObstacleSpec(shape=ob["shape"], center=tuple(ob["center"]), **kw)


def _plot_benchmark(cells, path) -> None:
    variants = sorted({c.variant for c in cells})
    counts = sorted({c.n_obstacles for c in cells})
    fig, ax = plt.subplots(figsize=(7, 4.5))
    width = 0.8 / max(1, len(variants))
    for vi, variant in enumerate(variants):
        for ci, count in enumerate(counts):
            match = [c for c in cells if c.variant == variant and c.n_obstacles == count]
            if not match:
                continue
            c = match[0]
            bar = ax.bar(
                ci + vi * width,
                c.mean_solve_s,
                width=width * 0.95,
                yerr=c.std_solve_s,
                color=f"C{vi}",
                label=variant if ci == 0 else None,
            )
            bar[0].set_gid(f"bar-{variant}-{count}")
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(counts))])
    ax.set_xticklabels([str(c) for c in counts])
    ax.set_xlabel("obstacle count")
    ax.set_ylabel("mean per-step solve time [s]")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(str(path), format=_format_of(path))
    plt.close(fig)


def _format_of(path) -> str:
    s = str(path)
    return s.rsplit(".", 1)[-1] if "." in s else "svg"
