"""Blended goal-seeking / exploration controller.

Outside every buffer zone the nominal controller acts alone.  Inside a
buffer the safety QP minimally edits the nominal input, blended by the
activation weight.  Repeated boundary crossings near one spot trigger
the multi-step backup MPC until the robot leaves all buffers.

The unicycle's position output has mixed relative degree, so all
barrier and Lyapunov rows act on a lookahead point ell_d ahead of the
axle; the robot radius charged to the barrier covers the offset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .barrier import BarrierEval, BarrierParams
from .optimizer import (
    NmpcProblem,
    NmpcResult,
    ObstacleHorizon,
    QpProblem,
    solve_nmpc,
    solve_qp,
)
from .perception import EllipseTrack, multi_step_predict
from .world import ControlInput, RobotState

MODE_GOAL = "goal_seeking"
MODE_EXPLORE = "exploration"
MODE_BACKUP = "backup"


@dataclass
class ControllerConfig:
    nominal_mode: str = "mpc"  # "mpc" | "clf"
    c1: float = 1.0
    c2: float = 1.0
    c3: float = 1.0
    slack_weight: float = 100.0
    omega_weight: float = 4.0  # finite heading-loop gain; unweighted omega rails
    ell_d: float = 0.1
    d_bf: float = 0.1
    boundary_log_capacity: int = 64
    goals: list[tuple[float, float]] = field(default_factory=list)
    goal_tolerance: float = 0.15
    v_max: float = 0.8
    omega_max: float = 1.5
    mpc_horizon: int = 10
    mpc_dt: float = 0.1
    backup_horizon: int = 20
    backup_dt: float = 0.15
    w_pos: float = 1.0
    w_heading: float = 0.1
    w_v: float = 0.1
    w_omega: float = 0.05
    terminal_scale: float = 10.0

    def __post_init__(self):
        if self.nominal_mode not in ("clf", "mpc"):
            raise ValueError(f"unknown nominal mode {self.nominal_mode!r}")
        if not (0 < self.c1 <= self.c2 and self.c3 > 0):
            raise ValueError("need 0 < c1 <= c2 and c3 > 0")
        if self.ell_d <= 0 or self.d_bf <= 0:
            raise ValueError("ell_d and d_bf must be positive")


@dataclass
class BoundaryLog:
    """Time-ordered ring buffer of buffer-boundary crossing positions."""

    capacity: int = 64
    entries: list[tuple[np.ndarray, float]] = field(default_factory=list)

    def add(self, position, t: float) -> None:
        self.entries.append((np.asarray(position, dtype=float).copy(), t))
        if len(self.entries) > self.capacity:
            self.entries = self.entries[-self.capacity :]

    def clear(self) -> None:
        self.entries.clear()


def detect_oscillation(log: BoundaryLog, current_pos, d_bf: float) -> bool:
    """True when some previously logged crossing lies within d_bf of the
    current crossing position; the caller logs the current position
    afterwards."""
    pos = np.asarray(current_pos, dtype=float)
    return any(float(np.hypot(*(pos - prev))) < d_bf for prev, _ in log.entries)


def lookahead_point(state: RobotState, ell_d: float) -> np.ndarray:
    return np.array(
        [state.x + ell_d * math.cos(state.heading), state.y + ell_d * math.sin(state.heading)]
    )


def output_matrix(state: RobotState, ell_d: float) -> np.ndarray:
    """d(lookahead point)/dt = T(theta) @ (v, omega); T is invertible
    for ell_d > 0, which is the point of the offset."""
    c, s = math.cos(state.heading), math.sin(state.heading)
    return np.array([[c, -ell_d * s], [s, ell_d * c]])


def _input_box(config: ControllerConfig, width: int = 2):
    rows = np.zeros((4, width))
    rows[0, 0], rows[1, 0], rows[2, 1], rows[3, 1] = 1.0, -1.0, 1.0, -1.0
    bounds = np.array([config.v_max, config.v_max, config.omega_max, config.omega_max])
    return rows, bounds


def clf_nominal(state: RobotState, goal, config: ControllerConfig) -> tuple[ControlInput, dict]:
    """Goal-seeking input from the Lyapunov QP on the lookahead point:
    min ||u||^2 + p*delta^2 subject to Vdot + c3*V <= delta and the
    input box.  The slack keeps the QP feasible everywhere."""
    goal = np.asarray(goal, dtype=float)
    if not np.all(np.isfinite(goal)):
        raise ValueError("goal must be finite")
    z = lookahead_point(state, config.ell_d)
    e = z - goal
    V = float(e @ e)
    LgV = 2.0 * e @ output_matrix(state, config.ell_d)
    H = 2.0 * np.diag([1.0, config.omega_weight, config.slack_weight])
    box_rows, box_bounds = _input_box(config, width=3)
    G = np.vstack([[LgV[0], LgV[1], -1.0], box_rows])
    g = np.concatenate([[-config.c3 * V], box_bounds])
    sol = solve_qp(QpProblem(H=H, q=np.zeros(3), G=G, g=g))
    info = {"status": sol.status, "kkt": max(sol.kkt.values()) if sol.kkt else 0.0, "V": V}
    if sol.status != "optimal":
        # unreachable with the slack row; stop as the safe fallback
        return ControlInput(0.0, 0.0), info
    return ControlInput(float(sol.u[0]), float(sol.u[1])), info


def _nmpc_problem(
    state: RobotState,
    goal,
    config: ControllerConfig,
    obstacles: list[ObstacleHorizon],
    horizon: int,
    dt: float,
) -> NmpcProblem:
    return NmpcProblem(
        horizon=horizon,
        dt=dt,
        initial_state=state,
        goal=np.asarray(goal, dtype=float),
        v_max=config.v_max,
        omega_max=config.omega_max,
        obstacles=obstacles,
        w_pos=config.w_pos,
        w_heading=config.w_heading,
        w_v=config.w_v,
        w_omega=config.w_omega,
        terminal_scale=config.terminal_scale,
    )


def mpc_nominal(
    state: RobotState, goal, config: ControllerConfig, warm: np.ndarray | None = None
) -> tuple[ControlInput, NmpcResult]:
    """Nominal MPC: the receding-horizon problem without barrier rows."""
    res = solve_nmpc(
        _nmpc_problem(state, goal, config, [], config.mpc_horizon, config.mpc_dt),
        initial_inputs=warm,
    )
    return res.first_input(), res


def safety_qp(
    state: RobotState,
    u_nom: ControlInput,
    active_evals: list[BarrierEval],
    config: ControllerConfig,
    params: BarrierParams,
) -> tuple[ControlInput, dict]:
    """Minimally modified safe input: min ||u - u_nom||^2 subject to one
    shifted-barrier row per active obstacle plus the input box."""
    if not active_evals:
        raise ValueError("safety_qp needs at least one active barrier eval")
    T = output_matrix(state, config.ell_d)
    rows, rhs = [], []
    for ev in active_evals:
        Lg = ev.grad_robot @ T
        # an approaching obstacle tightens its row; a receding estimate
        # is never trusted to relax one
        rows.append([-Lg[0], -Lg[1]])
        rhs.append(min(ev.epsilon, 0.0) + params.gamma * ev.h_shifted)
    box_rows, box_bounds = _input_box(config)
    G = np.vstack([np.asarray(rows), box_rows])
    g = np.concatenate([np.asarray(rhs), box_bounds])
    sol = solve_qp(QpProblem(H=2.0 * np.eye(2), q=-2.0 * u_nom.as_array(), G=G, g=g))
    info = {"status": sol.status, "kkt": max(sol.kkt.values()) if sol.kkt else 0.0}
    if sol.status != "optimal":
        return ControlInput(0.0, 0.0), info
    return ControlInput(float(sol.u[0]), float(sol.u[1])), info


def backup_obstacle_horizons(
    tracks: list[EllipseTrack],
    params: BarrierParams,
    horizon: int,
    dt: float,
    plan_margin: float = 0.02,
) -> list[ObstacleHorizon]:
    """Predicted per-step ellipses for the backup MPC rows.  Rows are on
    the shifted barrier plus a small planning margin, so solver noise
    cannot turn into a real buffer-band violation; the allowed initial
    depth covers the whole band plus the lookahead offset."""
    out = []
    for tr in tracks:
        if tr.kind == "dynamic":
            mbes = [tr.mbe()] + multi_step_predict(tr, horizon, dt)
        else:
            mbes = [tr.mbe()]
        out.append(
            ObstacleHorizon(
                mbes=mbes,
                params=params,
                offset=params.c_k + plan_margin,
                allow_depth=params.c_k + 0.15,
            )
        )
    return out


def _detour_seed(state: RobotState, tracks: list[EllipseTrack], goal, config) -> np.ndarray:
    """Arcing initial guess that bends around the blocking obstacle: turn
    away from the side of the robot-goal line the obstacle sits on."""
    pos = np.array([state.x, state.y])
    to_goal = np.asarray(goal, dtype=float) - pos
    side = 1.0
    if tracks and float(np.hypot(*to_goal)) > 1e-9:
        nearest = min(tracks, key=lambda t: float(np.hypot(*(t.kalman_state[:2] - pos))))
        rel = nearest.kalman_state[:2] - pos
        cross = to_goal[0] * rel[1] - to_goal[1] * rel[0]
        side = -1.0 if cross > 0 else 1.0
    return np.column_stack(
        [
            np.full(config.backup_horizon, 0.4 * config.v_max),
            np.full(config.backup_horizon, side * 0.25 * config.omega_max),
        ]
    )


def backup_mpc(
    state: RobotState,
    tracks: list[EllipseTrack],
    config: ControllerConfig,
    params: BarrierParams,
    goal,
    warm: np.ndarray | None = None,
) -> tuple[ControlInput, NmpcResult]:
    """Multi-step safety controller: receding-horizon problem with one
    barrier row per (tracked obstacle, step), predicted ellipses from
    the tracker.  The goal term keeps the detour making progress."""
    if not tracks:
        raise ValueError("backup_mpc needs at least one track")
    horizons = backup_obstacle_horizons(tracks, params, config.backup_horizon, config.backup_dt)
    prob = _nmpc_problem(state, goal, config, horizons, config.backup_horizon, config.backup_dt)
    seed = _detour_seed(state, tracks, goal, config)
    res = solve_nmpc(prob, initial_inputs=warm if warm is not None else seed)
    if res.status == "failed" and warm is not None:
        # a stale warm start can strand the solve; retry from the seed
        res = solve_nmpc(prob, initial_inputs=seed)
    pos = np.array([state.x, state.y])
    if (
        res.status not in ("initial_infeasible",)
        and float(np.hypot(*(res.states[-1, :2] - pos))) < 0.15
    ):
        # the plan parks in place: a detour on the other side may escape
        flipped = seed * np.array([1.0, -1.0])
        alt = solve_nmpc(prob, initial_inputs=flipped)
        if alt.status not in ("initial_infeasible", "failed"):
            d_alt = float(np.hypot(*(alt.states[-1, :2] - prob.goal)))
            d_res = float(np.hypot(*(res.states[-1, :2] - prob.goal)))
            if res.status == "failed" or d_alt < d_res - 1e-9:
                res = alt
    if res.status in ("initial_infeasible", "failed"):
        return ControlInput(0.0, 0.0), res
    return res.first_input(), res


@dataclass
class CompositeDecision:
    u: ControlInput
    mode: str
    rho_bar: float
    u_nominal: ControlInput
    u_safe: ControlInput | None
    active_labels: list[int]
    failed: bool = False
    kkt_max: float = 0.0
    nmpc: NmpcResult | None = None
    nmpc_executed: bool = False


class Controller:
    """Carries the boundary log, backup latch, warm starts, and the
    currently executing backup plan across control steps.  One instance
    per scenario run."""

    def __init__(self, config: ControllerConfig, params: BarrierParams):
        self.config = config
        self.params = params
        self.log = BoundaryLog(capacity=config.boundary_log_capacity)
        self.backup_latched = False
        self.prev_shifted: dict[int, float] = {}
        self.warm_nominal: np.ndarray | None = None
        self.warm_backup: np.ndarray | None = None
        self.always_backup = False  # zone variant that skips the safety QP
        self.backup_enabled = True
        self.plan: NmpcResult | None = None
        self.plan_time: float = 0.0
        self.plan_steps_used: int = 0
        self.pos_history: list[tuple[float, np.ndarray]] = []
        self.stall_window: float = 4.0
        self.stall_distance: float = 0.1
        self.escape_side: float = 0.0  # +-1 while detouring via a side goal
        self.parked_replans: int = 0

    def _nominal(self, state: RobotState, goal) -> tuple[ControlInput, float, NmpcResult | None]:
        if self.config.nominal_mode == "mpc":
            u, res = mpc_nominal(state, goal, self.config, self.warm_nominal)
            self.warm_nominal = np.vstack([res.inputs[1:], res.inputs[-1:]])
            return u, res.kkt_max, res
        u, info = clf_nominal(state, goal, self.config)
        return u, info["kkt"], None

    def _backup_input(
        self, state: RobotState, tracks: list[EllipseTrack], active_labels: list[int], goal
    ) -> tuple[ControlInput, NmpcResult | None, bool]:
        """Input from the multi-step backup plan, replanning only every
        few plan periods: per-frame ellipse reshaping would otherwise
        invalidate a tightly constrained plan every control step."""
        cfg = self.config
        if self.plan is not None:
            idx = int((state.time - self.plan_time) / cfg.backup_dt + 1e-9)
            if 0 <= idx < min(3, cfg.backup_horizon):
                return ControlInput(*map(float, self.plan.inputs[idx])), None, True
            self.plan = None
        by_label = {t.label: t for t in tracks}
        active_tracks = [by_label[lbl] for lbl in active_labels if lbl in by_label]
        if not active_tracks:
            active_tracks = tracks
        pos = np.array([state.x, state.y])
        u, res = backup_mpc(state, active_tracks, cfg, self.params, goal, self.warm_backup)
        parked = (
            res.status not in ("initial_infeasible", "failed")
            and float(np.hypot(*(res.states[-1, :2] - pos))) < 0.2
        )
        if parked or res.status == "failed":
            # goal progress is locally impossible: explore sideways until
            # the trap region is behind us (the latch reset clears this)
            self.parked_replans += 1
            if self.escape_side == 0.0:
                seed = _detour_seed(state, active_tracks, goal, cfg)
                self.escape_side = 1.0 if seed[0, 1] >= 0 else -1.0
            elif self.parked_replans >= 3:
                self.escape_side = -self.escape_side
                self.parked_replans = 0
            to_goal = np.asarray(goal, dtype=float) - pos
            norm = float(np.hypot(*to_goal))
            ahead = to_goal / norm if norm > 1e-9 else np.array(
                [math.cos(state.heading), math.sin(state.heading)]
            )
            lateral = self.escape_side * np.array([-ahead[1], ahead[0]])
            subgoal = pos + 2.5 * lateral + 0.5 * ahead
            u2, res2 = backup_mpc(state, active_tracks, cfg, self.params, subgoal, None)
            if res2.status not in ("initial_infeasible", "failed") and float(
                np.hypot(*(res2.states[-1, :2] - pos))
            ) > 0.2:
                u, res = u2, res2
                self.parked_replans = 0
        else:
            self.parked_replans = 0
        if res.status in ("initial_infeasible", "failed"):
            self.warm_backup = None
            return ControlInput(0.0, 0.0), res, False
        self.warm_backup = np.vstack([res.inputs[1:], res.inputs[-1:]])
        self.plan = res
        self.plan_time = state.time
        return u, res, True

    def _record_position(self, state: RobotState) -> None:
        pos = np.array([state.x, state.y])
        self.pos_history.append((state.time, pos))
        cutoff = state.time - self.stall_window
        while self.pos_history and self.pos_history[0][0] < cutoff - 1e-9:
            self.pos_history.pop(0)

    def _stalled(self, state: RobotState) -> bool:
        """No net motion over the stall window while inside some buffer."""
        if not self.pos_history:
            return False
        t0, _ = self.pos_history[0]
        if t0 > state.time - self.stall_window + 1e-3:
            return False  # window not yet filled
        pos = np.array([state.x, state.y])
        return max(float(np.hypot(*(pos - q))) for _, q in self.pos_history) < self.stall_distance

    def _update_boundary_log(self, state: RobotState, evals: list[BarrierEval]) -> bool:
        """Log downward crossings of the shifted barrier through zero and
        report whether any crossing repeats within d_bf."""
        pos = np.array([state.x, state.y])
        osc = False
        for ev in evals:
            prev = self.prev_shifted.get(ev.track_label)
            if prev is not None and prev >= 0.0 > ev.h_shifted:
                if detect_oscillation(self.log, pos, self.config.d_bf):
                    osc = True
                self.log.add(pos, state.time)
            self.prev_shifted[ev.track_label] = ev.h_shifted
        return osc

    def composite_control(
        self,
        state: RobotState,
        evals: list[BarrierEval],
        tracks: list[EllipseTrack],
        goal,
    ) -> CompositeDecision:
        """One step of the blended control law."""
        cfg = self.config
        self._record_position(state)
        u_nom, kkt, nmpc_res = self._nominal(state, goal)
        # activation extends below the buffer band: a discretization leak
        # past -c_k must keep the recovery rows live, not drop them
        active = [ev for ev in evals if ev.h_shifted <= self.params.d_k]
        oscillated = self._update_boundary_log(state, evals)

        if not active:
            if self.backup_latched:
                self.log.clear()  # reset after a completed backup episode
            self.backup_latched = False
            self.warm_backup = None
            self.plan = None
            self.escape_side = 0.0
            self.parked_replans = 0
            return CompositeDecision(
                u=u_nom,
                mode=MODE_GOAL,
                rho_bar=1.0,
                u_nominal=u_nom,
                u_safe=None,
                active_labels=[],
                kkt_max=kkt,
                nmpc=nmpc_res,
                nmpc_executed=self.config.nominal_mode == "mpc",
            )

        if oscillated and self.backup_enabled:
            self.backup_latched = True
        if self.backup_enabled and not self.backup_latched and self._stalled(state):
            # creeping inside the band without boundary crossings starves
            # the crossing detector; no net motion is the same trap
            self.backup_latched = True
        use_backup = self.always_backup or (self.backup_latched and self.backup_enabled)

        rho_bar = min(ev.rho for ev in active)
        active_labels = [ev.track_label for ev in active]
        failed = False
        mode = MODE_BACKUP if use_backup else MODE_EXPLORE

        nmpc_executed = self.config.nominal_mode == "mpc"
        if use_backup:
            u_safe, res, ok = self._backup_input(state, tracks, active_labels, goal)
            if res is not None:
                kkt = max(kkt, res.kkt_max)
                if ok:
                    nmpc_res = res
                    nmpc_executed = True
            if ok:
                # the backup plan executes unblended: mixing it with an
                # opposing nominal creates a parked equilibrium mid-buffer
                rho_bar = 0.0
            if not ok:
                # no certified plan this period: the one-step safety QP
                # is the graceful fallback, braking if even that fails
                u_safe, info = safety_qp(state, u_nom, active, cfg, self.params)
                kkt = max(kkt, info["kkt"])
                failed = info["status"] != "optimal"
        else:
            u_safe, info = safety_qp(state, u_nom, active, cfg, self.params)
            kkt = max(kkt, info["kkt"])
            if info["status"] == "infeasible" and self.backup_enabled:
                # escalate: the one-step row set admits no input
                self.backup_latched = True
                mode = MODE_BACKUP
                u_safe, res, ok = self._backup_input(state, tracks, active_labels, goal)
                if res is not None:
                    kkt = max(kkt, res.kkt_max)
                    if ok:
                        nmpc_res = res
                        nmpc_executed = True
                failed = not ok
            elif info["status"] != "optimal":
                failed = True

        blended = (1.0 - rho_bar) * u_safe.as_array() + rho_bar * u_nom.as_array()
        u_star = ControlInput(float(blended[0]), float(blended[1])).clipped(
            cfg.v_max, cfg.omega_max
        )
        return CompositeDecision(
            u=u_star if not failed else ControlInput(0.0, 0.0),
            mode=mode,
            rho_bar=rho_bar,
            u_nominal=u_nom,
            u_safe=u_safe,
            active_labels=active_labels,
            failed=failed,
            kkt_max=kkt,
            nmpc=nmpc_res,
            nmpc_executed=nmpc_executed,
        )
