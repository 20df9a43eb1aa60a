#!/usr/bin/env python3
"""Regenerate the bundled scenario files.

Layouts are seeded reconstructions at desk scale; this script is the
single source of truth for them.  Run from the repository root:

    python scripts/make_scenarios.py
"""

import math
import os
import sys

import yaml

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from zonecbf.engine import generate_scenario
from zonecbf.scenario import parse_scenario_text, serialize_scenario

OUT = os.path.join(os.path.dirname(__file__), "..", "src", "zonecbf", "scenarios")

ROBOT = {"start": [0.0, 0.0, 0.785398163], "v_max": 0.5, "omega_max": 1.5, "radius": 0.15}
SIM = {"dt": 0.05, "timeout_per_goal": 300.0, "ray_count": 360, "max_range": 5.0}


def write(name: str, doc: dict) -> None:
    cfg = parse_scenario_text(yaml.safe_dump(doc), name=name)
    path = os.path.join(OUT, f"{name}.yaml")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {name}: curated scenario (desk-scale reconstruction; see docs/formats.md)\n")
        fh.write(serialize_scenario(cfg))
    print("wrote", path)


def reshape(ob: dict, kind: str, angle: float) -> dict:
    """Swap a generated circle for an ellipse or rectangle of no larger
    bounding radius, preserving placement gaps."""
    r = ob["radius"]
    out = {"shape": kind, "center": ob["center"], "angle": round(angle, 4)}
    if kind == "ellipse":
        out["a"] = round(r, 4)
        out["b"] = round(0.6 * r, 4)
    else:
        out["width"] = round(1.4 * r, 4)
        out["height"] = round(1.0 * r, 4)
    return out


PERCEPTION = {"noise_std": 0.003}


def generated(n: int, seed: int, goals, arena, reshape_idx=()) -> dict:
    cfg = generate_scenario(
        n,
        seed,
        goals=goals,
        arena=arena,
        start=tuple(ROBOT["start"]),
        min_gap=1.5,
    )
    obstacles = [dict(ob) for ob in cfg.obstacles]
    for slot, (idx, kind, ang) in enumerate(reshape_idx):
        if idx < len(obstacles):
            obstacles[idx] = reshape(obstacles[idx], kind, ang)
    return {
        "arena": {"x_min": arena[0], "x_max": arena[1], "y_min": arena[2], "y_max": arena[3]},
        "robot": dict(ROBOT),
        "goals": {"points": [list(g) for g in goals], "tolerance": 0.15},
        "obstacles": obstacles,
        "perception": dict(PERCEPTION),
        "sim": dict(SIM),
        "seed": 0,
    }


def main() -> None:
    os.makedirs(OUT, exist_ok=True)

    write(
        "empty",
        {
            "robot": dict(ROBOT),
            "goals": {"points": [[2.0, 0.0]], "tolerance": 0.15},
            "sim": dict(SIM),
        },
    )

    write(
        "static_1",
        {
            "arena": {"x_min": -1.0, "x_max": 8.0, "y_min": -1.0, "y_max": 8.0},
            "robot": dict(ROBOT),
            "goals": {"points": [[5.5, 5.5]], "tolerance": 0.15},
            "obstacles": [{"shape": "circle", "center": [2.8, 3.1], "radius": 0.5}],
            "perception": {"noise_std": 0.003},
            "sim": dict(SIM),
        },
    )

    write(
        "static_5",
        generated(
            5,
            seed=11,
            goals=[(5.5, 5.5)],
            arena=(-1.0, 8.0, -1.0, 8.0),
            reshape_idx=[(1, "ellipse", 0.5), (3, "rectangle", -0.4)],
        ),
    )

    write(
        "static_10",
        generated(
            10,
            seed=5,
            goals=[(5.5, 5.5), (5.5, 0.0), (0.0, 5.5)],
            arena=(-1.0, 8.0, -1.0, 8.0),
            reshape_idx=[(2, "ellipse", 1.0), (6, "rectangle", 0.3)],
        ),
    )

    write(
        "static_20",
        generated(
            20,
            seed=3,
            goals=[(7.5, 7.5), (7.5, 0.0), (0.0, 7.5), (0.0, 0.0)],
            arena=(-1.0, 11.0, -1.0, 11.0),
            reshape_idx=[(4, "ellipse", -0.8), (12, "rectangle", 0.9)],
        ),
    )

    # ten obstacles, four of them moving: the classification scenario
    dyn = generated(6, seed=21, goals=[(5.5, 5.5)], arena=(-1.0, 8.0, -1.0, 8.0))
    dyn["obstacles"].extend(
        [
            {
                "shape": "circle",
                "center": [5.6, 1.9],
                "radius": 0.3,
                "motion": "constant_velocity",
                "velocity": [-0.45, 0.1],
            },
            {
                "shape": "circle",
                "center": [0.4, 6.6],
                "radius": 0.3,
                "motion": "constant_velocity",
                "velocity": [0.4, -0.2],
            },
            {
                "shape": "circle",
                "center": [7.3, 3.4],
                "radius": 0.25,
                "motion": "constant_velocity",
                "velocity": [-0.5, 0.0],
            },
            {
                "shape": "circle",
                "center": [1.2, 2.6],
                "radius": 0.3,
                "motion": "waypoint_loop",
                "waypoints": [[1.2, 2.6], [2.6, 2.6], [2.6, 4.0], [1.2, 4.0]],
                "speed": 0.45,
            },
        ]
    )
    dyn["perception"] = {"d_min": 0.02, "noise_std": 0.003}
    write("dynamic_10", dyn)

    # oscillation fixture: flanking pair blocks the straight path; the
    # escape detour is long, so the backup plans with a longer horizon
    write(
        "corridor",
        {
            "arena": {"x_min": -1.0, "x_max": 8.0, "y_min": -4.0, "y_max": 4.0},
            "robot": {"start": [0.0, 0.0, 0.0], "v_max": 0.5, "omega_max": 1.5, "radius": 0.15},
            "goals": {"points": [[7.0, 0.0]], "tolerance": 0.15},
            "obstacles": [
                {"shape": "circle", "center": [3.0, 0.93], "radius": 0.5},
                {"shape": "circle", "center": [3.05, -0.97], "radius": 0.5},
            ],
            "controller": {"backup_horizon": 30, "backup_dt": 0.2},
            "perception": {"noise_std": 0.003},
            "sim": dict(SIM),
        },
    )

    # engineered failure for the all-rows baseline: committed corridor
    # entry with a head-on mover appearing late.  Fillers sit outside
    # the corridor on a jittered grid.
    import numpy as np

    rng = np.random.default_rng(9)
    fillers = []
    slots = [(x, y) for x in (0.2, 1.6, 3.0, 4.4, 5.8, 7.2) for y in (-3.4, -2.3, 2.3, 3.4)]
    for x, y in slots:
        if len(fillers) == 17:
            break
        jx, jy = rng.uniform(-0.2, 0.2, 2)
        fillers.append(
            {
                "shape": "circle",
                "center": [float(round(x + jx, 3)), float(round(y + jy, 3))],
                "radius": round(float(rng.uniform(0.25, 0.4)), 3),
            }
        )
    trap = {
        "arena": {"x_min": -1.0, "x_max": 10.0, "y_min": -4.5, "y_max": 4.5},
        "robot": {"start": [0.0, 0.0, 0.0], "v_max": 0.5, "omega_max": 1.5, "radius": 0.15},
        "goals": {"points": [[8.5, 0.0]], "tolerance": 0.15},
        "obstacles": fillers
        + [
            {"shape": "rectangle", "center": [4.25, 1.15], "width": 4.5, "height": 0.5, "angle": 0.0},
            {"shape": "rectangle", "center": [4.25, -1.15], "width": 4.5, "height": 0.5, "angle": 0.0},
            {
                "shape": "circle",
                "center": [11.0, 0.0],
                "radius": 0.3,
                "motion": "constant_velocity",
                "velocity": [-0.85, 0.0],
            },
        ],
        "sim": dict(SIM),
    }
    write("mpc_all_trap_20", trap)


if __name__ == "__main__":
    main()
