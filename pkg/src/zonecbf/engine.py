"""Closed-loop scenario runner and benchmark harness.

One run wires world -> lidar -> perception -> barrier evals -> variant
controller -> integration at a fixed control period, collecting the
per-step record that the acceptance suite and CLI consume.

Variants: mpc_base (receding-horizon with ground-truth obstacle rows),
mpc_all (all perceived barrier rows every step), mpc_zone (buffer-zone
blending with the multi-step backup as the safety input), mpc_cbf_zone
(full blending: safety QP plus oscillation-triggered backup).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .barrier import BarrierParams, evaluate_track
from .controller import (
    MODE_GOAL,
    Controller,
    lookahead_point,
)
from .optimizer import NmpcProblem, ObstacleHorizon, solve_nmpc
from .perception import EllipseTrack, Mbe, PerceptionParams, multi_step_predict, perceive
from .scenario import ScenarioConfig, config_hash
from .world import (
    ControlInput,
    ObstacleSpec,
    RobotState,
    World,
    collision_check,
    lidar_scan,
    step_dynamics,
    update_obstacles,
    wrap_half_angle,
)

VARIANTS = ("mpc_base", "mpc_all", "mpc_zone", "mpc_cbf_zone")

STATUS_GOALS = "all_goals_reached"
STATUS_COLLISION = "collision"
STATUS_TIMEOUT = "timeout"
STATUS_SAFETY_STOP = "safety_stop"


@dataclass
class StepRow:
    time: float
    x: float
    y: float
    heading: float
    v: float
    omega: float
    mode: str
    min_h: float  # ground-truth clearance at this state
    active_count: int
    solve_time_s: float
    perception_time_s: float = 0.0


@dataclass
class TrackSnapshot:
    label: int
    kind: str
    center: tuple[float, float]
    velocity: tuple[float, float]
    h_shifted: float
    in_buffer: bool


@dataclass
class RunRecord:
    scenario_name: str
    variant: str
    seed: int
    config_hash: str
    rows: list[StepRow] = field(default_factory=list)
    status: str = STATUS_TIMEOUT
    goal_times: list[float] = field(default_factory=list)
    max_kkt: float = 0.0
    min_row_margin: float = math.inf
    max_replay_error: float = 0.0
    track_trace: list[list[TrackSnapshot]] | None = None

    def mean_solve_time(self) -> float:
        return float(np.mean([r.solve_time_s for r in self.rows])) if self.rows else 0.0

    def min_clearance(self) -> float:
        return min((r.min_h for r in self.rows), default=math.inf)


def ground_truth_mbe(spec: ObstacleSpec, center: np.ndarray) -> Mbe:
    """Ellipse equivalent of a ground-truth shape: identity for circles
    and ellipses, the circumscribed ellipse of the corner set for a
    rectangle."""
    if spec.shape == "circle":
        return Mbe(center=center.copy(), a=spec.radius, b=spec.radius, angle=0.0)
    if spec.shape == "ellipse":
        a, b, ang = spec.a, spec.b, spec.angle
    else:
        a, b, ang = spec.width / math.sqrt(2.0), spec.height / math.sqrt(2.0), spec.angle
    if b > a:
        a, b, ang = b, a, ang + math.pi / 2
    return Mbe(center=center.copy(), a=a, b=b, angle=wrap_half_angle(ang))


def _variant_check(variant: str) -> None:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


class _NmpcVariant:
    """mpc_base / mpc_all: plain receding-horizon control, every barrier
    row active every step."""

    def __init__(self, cfg: ScenarioConfig, ground_truth: bool):
        self.cfg = cfg
        self.ground_truth = ground_truth
        self.ctrl = cfg.controller_config()
        # rows act on the robot center over the horizon
        self.params = cfg.barrier_params(effective_radius=cfg.robot["radius"])
        self.warm: np.ndarray | None = None

    def horizons(self, world: World, tracks: list[EllipseTrack]) -> list[ObstacleHorizon]:
        N, dt = self.ctrl.mpc_horizon, self.ctrl.mpc_dt
        out = []
        if self.ground_truth:
            for spec in world.obstacles:
                if spec.motion == "static":
                    mbes = [ground_truth_mbe(spec, spec.center_at(world.time))]
                else:
                    mbes = [
                        ground_truth_mbe(spec, spec.center_at(world.time + k * dt))
                        for k in range(N + 1)
                    ]
                out.append(
                    ObstacleHorizon(
                        mbes=mbes, params=self.params, offset=0.0,
                        allow_depth=self.params.c_k,
                    )
                )
            return out
        for tr in tracks:
            if tr.kind == "dynamic":
                mbes = [tr.mbe()] + multi_step_predict(tr, N, dt)
            else:
                mbes = [tr.mbe()]
            out.append(
                ObstacleHorizon(
                    mbes=mbes, params=self.params, offset=0.0, allow_depth=self.params.c_k
                )
            )
        return out

    def step(self, state, world, tracks, evals, goal):
        obs = self.horizons(world, tracks)
        prob = NmpcProblem(
            horizon=self.ctrl.mpc_horizon,
            dt=self.ctrl.mpc_dt,
            initial_state=state,
            goal=np.asarray(goal, dtype=float),
            v_max=self.ctrl.v_max,
            omega_max=self.ctrl.omega_max,
            obstacles=obs,
            w_pos=self.ctrl.w_pos,
            w_heading=self.ctrl.w_heading,
            w_v=self.ctrl.w_v,
            w_omega=self.ctrl.w_omega,
            terminal_scale=self.ctrl.terminal_scale,
        )
        res = solve_nmpc(prob, initial_inputs=self.warm)
        if res.status in ("initial_infeasible", "failed"):
            self.warm = None
            u = ControlInput(0.0, 0.0)  # brake and retry next period
        else:
            self.warm = np.vstack([res.inputs[1:], res.inputs[-1:]])
            u = res.first_input()
        active = len(obs)
        return u, MODE_GOAL, active, res


def run_scenario(
    cfg: ScenarioConfig,
    variant: str,
    seed: int | None = None,
    max_steps: int | None = None,
    collect_tracks: bool = False,
    disable_safety: bool = False,
    disable_backup: bool = False,
) -> RunRecord:
    """Deterministic closed-loop run of one scenario under one variant.

    disable_safety strips every barrier row (fault-injection for the
    validator); disable_backup pins the zone controller to the one-step
    safety QP (oscillation study)."""
    _variant_check(variant)
    if seed is None:
        seed = cfg.seed
    rng = np.random.default_rng(seed)

    world = cfg.world()
    sx, sy, sh = cfg.robot["start"]
    state = RobotState(sx, sy, sh, 0.0)
    dt = cfg.sim["dt"]
    timeout = cfg.sim["timeout_per_goal"]
    ray_count = cfg.sim["ray_count"]
    max_range = cfg.sim["max_range"]
    noise = cfg.perception["noise_std"]
    radius = cfg.robot["radius"]
    goals = [np.asarray(p, dtype=float) for p in cfg.goals["points"]]
    tol = cfg.goals["tolerance"]

    ctrl_cfg = cfg.controller_config()
    eval_params = cfg.barrier_params(effective_radius=radius + ctrl_cfg.ell_d)
    pparams = cfg.perception_params()

    uses_perception = variant != "mpc_base"
    zone = variant in ("mpc_zone", "mpc_cbf_zone")
    if zone:
        controller = Controller(ctrl_cfg, eval_params)
        controller.always_backup = variant == "mpc_zone"
        controller.backup_enabled = not disable_backup
    else:
        controller = _NmpcVariant(cfg, ground_truth=variant == "mpc_base")

    record = RunRecord(
        scenario_name=cfg.name,
        variant=variant,
        seed=seed,
        config_hash=config_hash(cfg),
        track_trace=[] if collect_tracks else None,
    )
    tracks: list[EllipseTrack] = []
    goal_idx = 0
    goal_started = 0.0
    if max_steps is None:
        max_steps = int(len(goals) * timeout / dt) + 1

    for _ in range(max_steps):
        # goal bookkeeping
        while goal_idx < len(goals) and float(
            np.hypot(state.x - goals[goal_idx][0], state.y - goals[goal_idx][1])
        ) <= tol:
            record.goal_times.append(state.time)
            goal_idx += 1
            goal_started = state.time
        if goal_idx >= len(goals):
            record.status = STATUS_GOALS
            break
        if state.time - goal_started > timeout:
            record.status = STATUS_TIMEOUT
            break
        goal = goals[goal_idx]

        # perception
        t0 = time.perf_counter()
        if uses_perception:
            scan = lidar_scan(world, state, ray_count, max_range, noise, rng)
            tracks = perceive(scan, tracks, pparams, dt)
        perception_time = time.perf_counter() - t0

        # barrier evaluations at the lookahead output point
        z = lookahead_point(state, ctrl_cfg.ell_d)
        evals = [evaluate_track(tr, z, eval_params) for tr in tracks]
        if disable_safety:
            evals = []

        if collect_tracks:
            by_label = {ev.track_label: ev for ev in evals}
            record.track_trace.append(
                [
                    TrackSnapshot(
                        label=tr.label,
                        kind=tr.kind,
                        center=(float(tr.kalman_state[0]), float(tr.kalman_state[1])),
                        velocity=(float(tr.kalman_state[2]), float(tr.kalman_state[3])),
                        h_shifted=by_label[tr.label].h_shifted if tr.label in by_label else math.inf,
                        in_buffer=by_label[tr.label].in_buffer if tr.label in by_label else False,
                    )
                    for tr in tracks
                ]
            )

        # control
        t0 = time.perf_counter()
        failed = False
        if zone:
            decision = controller.composite_control(state, evals, tracks, goal)
            u, mode, active = decision.u, decision.mode, len(decision.active_labels)
            record.max_kkt = max(record.max_kkt, decision.kkt_max)
            if decision.nmpc is not None and decision.nmpc_executed:
                record.min_row_margin = min(record.min_row_margin, decision.nmpc.row_margin)
            failed = decision.failed
        else:
            u, mode, active, res = controller.step(
                state, world, tracks if not disable_safety else [], evals, goal
            )
            record.max_kkt = max(record.max_kkt, res.kkt_max)
            if res.status not in ("initial_infeasible", "failed"):
                record.min_row_margin = min(record.min_row_margin, res.row_margin)
        solve_time = time.perf_counter() - t0

        collided, clearance = collision_check(world, state, radius)
        record.rows.append(
            StepRow(
                time=state.time,
                x=state.x,
                y=state.y,
                heading=state.heading,
                v=u.linear_velocity,
                omega=u.angular_velocity,
                mode=mode,
                min_h=clearance,
                active_count=active,
                solve_time_s=solve_time,
                perception_time_s=perception_time,
            )
        )
        if collided:
            record.status = STATUS_COLLISION
            break
        if failed:
            record.status = STATUS_SAFETY_STOP
            break

        state = step_dynamics(state, u, dt)
        world = update_obstacles(world, dt)

    return record


@dataclass
class BenchmarkCell:
    variant: str
    n_obstacles: int
    mean_solve_s: float
    std_solve_s: float
    mean_active: float
    repetitions: int
    steps: int


def run_benchmark(
    scenarios: dict[int, ScenarioConfig],
    variants: list[str],
    repetitions: int = 5,
    max_steps: int = 150,
    base_seed: int = 0,
) -> list[BenchmarkCell]:
    """Per-step optimization time, mean and std, per variant per obstacle
    count; scenario keys are the obstacle counts."""
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    cells = []
    for count in sorted(scenarios):
        cfg = scenarios[count]
        for variant in variants:
            _variant_check(variant)
            times, actives, steps = [], [], 0
            for rep in range(repetitions):
                rec = run_scenario(cfg, variant, seed=base_seed + rep, max_steps=max_steps)
                times.extend(r.solve_time_s for r in rec.rows)
                actives.extend(r.active_count for r in rec.rows)
                steps += len(rec.rows)
            cells.append(
                BenchmarkCell(
                    variant=variant,
                    n_obstacles=count,
                    mean_solve_s=float(np.mean(times)),
                    std_solve_s=float(np.std(times)),
                    mean_active=float(np.mean(actives)),
                    repetitions=repetitions,
                    steps=steps,
                )
            )
    return cells


@dataclass
class Violation:
    invariant: str
    step: int
    detail: str


def validate_run(record: RunRecord, cfg: ScenarioConfig) -> list[Violation]:
    """Post-hoc invariant audit of a finished run."""
    out: list[Violation] = []
    v_max = cfg.robot["v_max"] + 1e-9
    w_max = cfg.robot["omega_max"] + 1e-9
    dt = cfg.sim["dt"]
    prev_t = None
    any_negative = False
    for i, row in enumerate(record.rows):
        if prev_t is not None and not math.isclose(row.time - prev_t, dt, rel_tol=0, abs_tol=1e-9):
            out.append(Violation("time_ordering", i, f"dt {row.time - prev_t:.6g} != {dt}"))
        prev_t = row.time
        if abs(row.v) > v_max or abs(row.omega) > w_max:
            out.append(
                Violation("input_bounds", i, f"u=({row.v:.4f},{row.omega:.4f}) exceeds bounds")
            )
        if row.min_h < 0:
            any_negative = True
        if row.mode == MODE_GOAL and record.variant in ("mpc_zone", "mpc_cbf_zone"):
            if row.active_count != 0:
                out.append(
                    Violation("goal_mode_active", i, f"{row.active_count} active rows in goal mode")
                )
    if any_negative != (record.status == STATUS_COLLISION):
        out.append(
            Violation(
                "collision_status",
                len(record.rows) - 1,
                f"ground-truth clearance negative={any_negative} but status={record.status}",
            )
        )
    times = record.goal_times
    if any(t2 < t1 for t1, t2 in zip(times, times[1:])):
        out.append(Violation("goal_order", len(record.rows) - 1, f"goal times not ordered: {times}"))
    if record.max_kkt > 1e-6:
        out.append(Violation("kkt_residual", -1, f"max KKT residual {record.max_kkt:.2e}"))
    return out


def generate_scenario(
    n_obstacles: int,
    seed: int,
    goals: list[tuple[float, float]] | None = None,
    arena: tuple[float, float, float, float] = (-1.0, 11.0, -1.0, 11.0),
    start: tuple[float, float, float] = (0.0, 0.0, 0.785398),
    radius_range: tuple[float, float] = (0.25, 0.45),
    min_gap: float = 1.0,
    overrides: dict | None = None,
) -> ScenarioConfig:
    """Seeded uniform obstacle placement with a guaranteed feasible
    corridor: pairwise boundary gaps of at least min_gap, standoff from
    the start and every goal, and grid-BFS path existence between the
    goal sequence after inflating obstacles by the full safety margin."""
    from .scenario import parse_scenario_text, serialize_scenario

    rng = np.random.default_rng(seed)
    if goals is None:
        goals = [(6.0, 6.0)]
    x_lo, x_hi, y_lo, y_hi = arena
    keep_clear = [np.asarray(start[:2])] + [np.asarray(g) for g in goals]

    for _attempt in range(200):
        placed: list[tuple[np.ndarray, float]] = []
        tries = 0
        while len(placed) < n_obstacles and tries < 4000:
            tries += 1
            c = rng.uniform([x_lo + 1.0, y_lo + 1.0], [x_hi - 1.0, y_hi - 1.0])
            r = float(rng.uniform(*radius_range))
            if any(np.hypot(*(c - p)) < r + rp + min_gap for p, rp in placed):
                continue
            if any(np.hypot(*(c - k)) < r + 1.0 for k in keep_clear):
                continue
            placed.append((c, r))
        if len(placed) < n_obstacles:
            continue
        if _path_exists(placed, start[:2], goals, arena):
            break
    else:
        raise RuntimeError(f"could not generate a feasible {n_obstacles}-obstacle scenario")

    cfg_doc = {
        "name": f"generated_{n_obstacles}obs_seed{seed}",
        "arena": {"x_min": x_lo, "x_max": x_hi, "y_min": y_lo, "y_max": y_hi},
        "robot": {"start": list(start)},
        "goals": {"points": [list(g) for g in goals]},
        "obstacles": [
            {"shape": "circle", "center": [float(c[0]), float(c[1])], "radius": r}
            for c, r in placed
        ],
        "seed": int(seed),
    }
    if overrides:
        for section, vals in overrides.items():
            cfg_doc.setdefault(section, {}).update(vals)
    import yaml as _yaml

    return parse_scenario_text(_yaml.safe_dump(cfg_doc), name=cfg_doc["name"])


def _path_exists(placed, start, goals, arena, inflate: float = 0.7, cell: float = 0.1) -> bool:
    """Grid BFS connectivity through the inflated obstacle field."""
    from collections import deque

    x_lo, x_hi, y_lo, y_hi = arena
    nx = int((x_hi - x_lo) / cell) + 1
    ny = int((y_hi - y_lo) / cell) + 1
    xs = x_lo + cell * np.arange(nx)
    ys = y_lo + cell * np.arange(ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    free = np.ones((nx, ny), dtype=bool)
    for c, r in placed:
        free &= (gx - c[0]) ** 2 + (gy - c[1]) ** 2 > (r + inflate) ** 2

    def to_cell(p):
        return (
            int(round((p[0] - x_lo) / cell)),
            int(round((p[1] - y_lo) / cell)),
        )

    waypoints = [tuple(start)] + [tuple(g) for g in goals]
    for a, b in zip(waypoints, waypoints[1:]):
        sa, sb = to_cell(a), to_cell(b)
        if not (free[sa] and free[sb]):
            return False
        seen = np.zeros_like(free)
        dq = deque([sa])
        seen[sa] = True
        found = False
        while dq:
            cx, cy = dq.popleft()
            if (cx, cy) == sb:
                found = True
                break
            for dx2, dy2 in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nx2, ny2 = cx + dx2, cy + dy2
                if 0 <= nx2 < nx and 0 <= ny2 < ny and free[nx2, ny2] and not seen[nx2, ny2]:
                    seen[nx2, ny2] = True
                    dq.append((nx2, ny2))
        if not found:
            return False
    return True
