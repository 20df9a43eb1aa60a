import math

import numpy as np
import pytest

from zonecbf.barrier import BarrierParams, evaluate_track
from zonecbf.controller import (
    BoundaryLog,
    Controller,
    ControllerConfig,
    backup_mpc,
    clf_nominal,
    detect_oscillation,
    lookahead_point,
    mpc_nominal,
    output_matrix,
    safety_qp,
)
from zonecbf.perception import Mbe, PerceptionParams, _new_track
from zonecbf.world import ControlInput, RobotState


def config(**kw):
    base = dict(goals=[(6.0, 6.0)], v_max=0.5, omega_max=1.5)
    base.update(kw)
    return ControllerConfig(**base)


def static_track(label, cx, cy, a=0.4, b=0.3, angle=0.0):
    return _new_track(label, Mbe(np.array([cx, cy]), a, b, angle), PerceptionParams())


class TestClfNominal:
    def test_lookahead_at_goal_idle(self):
        cfg = config()
        state = RobotState(0, 0, 0)
        goal = lookahead_point(state, cfg.ell_d)
        u, info = clf_nominal(state, goal, cfg)
        assert info["V"] == pytest.approx(0.0)
        assert math.hypot(u.v, u.omega) <= 1e-6

    def test_goal_straight_ahead(self):
        cfg = config()
        u, _ = clf_nominal(RobotState(0, 0, 0), (1.0, 0.0), cfg)
        assert u.v > 0
        assert abs(u.omega) <= 1e-6

    def test_goal_at_ninety_degrees_turns_left(self):
        cfg = config()
        u, _ = clf_nominal(RobotState(0, 0, 0), (0.0, 1.0), cfg)
        assert u.omega > 0

    def test_respects_bounds(self):
        cfg = config()
        for gx, gy in ((5, 0), (-4, 2), (0, -7), (3, 3)):
            u, info = clf_nominal(RobotState(0, 0, 0.3), (gx, gy), cfg)
            assert info["status"] == "optimal"
            assert abs(u.v) <= cfg.v_max + 1e-9
            assert abs(u.omega) <= cfg.omega_max + 1e-9

    def test_rejects_bad_goal(self):
        with pytest.raises(ValueError):
            clf_nominal(RobotState(0, 0, 0), (math.nan, 0.0), config())


class TestMpcNominal:
    def test_at_goal_idle(self):
        u, _ = mpc_nominal(RobotState(3, 0, 0), (3.0, 0.0), config())
        assert math.hypot(u.v, u.omega) <= 1e-3

    def test_straight_line_progress(self):
        u, res = mpc_nominal(RobotState(0, 0, 0), (3.0, 0.0), config())
        assert u.v > 0
        d = np.hypot(res.states[:, 0] - 3.0, res.states[:, 1])
        assert all(b <= a + 1e-9 for a, b in zip(d, d[1:]))

    def test_heading_sign_matches_clf(self):
        # for goals ahead both controllers steer the same way; behind the
        # robot the MPC may legitimately reverse instead of turning
        rng = np.random.default_rng(7)
        cfg = config()
        agree = 0
        total = 0
        while total < 100:
            state = RobotState(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-2, 2))
            goal = rng.uniform(-4, 4, 2)
            bearing = math.atan2(goal[1] - state.y, goal[0] - state.x)
            err = math.remainder(bearing - state.heading, 2 * math.pi)
            if not 0.2 < abs(err) < math.pi / 2:
                continue
            if np.hypot(goal[0] - state.x, goal[1] - state.y) < 1.0:
                continue
            u_clf, _ = clf_nominal(state, goal, cfg)
            u_mpc, _ = mpc_nominal(state, goal, cfg)
            total += 1
            if u_clf.omega * u_mpc.omega > 0:
                agree += 1
        assert agree / total > 0.9


class TestSafetyQp:
    def setup_method(self):
        self.cfg = config()
        self.params = BarrierParams(R_safe=0.3, r=0.25, c_k=0.1, d_k=0.2)

    def eval_at(self, state, track):
        z = lookahead_point(state, self.cfg.ell_d)
        return evaluate_track(track, z, self.params)

    def test_interior_optimum_returns_nominal(self):
        state = RobotState(0, 0, 0)
        track = static_track(0, 0.0, 3.0)  # far above: rows inactive
        ev = self.eval_at(state, track)
        u_nom = ControlInput(0.2, 0.1)
        u, info = safety_qp(state, u_nom, [ev], self.cfg, self.params)
        assert info["status"] == "optimal"
        assert (u.v, u.omega) == pytest.approx((0.2, 0.1), abs=1e-9)

    def test_single_row_projection(self):
        state = RobotState(0, 0, 0)
        track = static_track(0, 1.05, 0.0, a=0.3, b=0.3)
        ev = self.eval_at(state, track)
        assert ev.in_buffer
        u_nom = ControlInput(0.5, 0.0)
        u, info = safety_qp(state, u_nom, [ev], self.cfg, self.params)
        assert info["status"] == "optimal"
        T = output_matrix(state, self.cfg.ell_d)
        Lg = ev.grad_robot @ T
        row = Lg @ u.as_array() + self.params.gamma * ev.h_shifted
        assert row >= -1e-9
        # euclidean projection onto the single active halfspace
        viol = Lg @ u_nom.as_array() + self.params.gamma * ev.h_shifted
        if viol < 0:
            expected = u_nom.as_array() - (viol / (Lg @ Lg)) * Lg
            assert u.as_array() == pytest.approx(expected, abs=1e-8)

    def test_two_flanking_rows_replay(self):
        state = RobotState(0, 0, 0)
        tracks = [static_track(0, 1.1, 0.45, a=0.3, b=0.3),
                  static_track(1, 1.1, -0.45, a=0.3, b=0.3)]
        evals = [self.eval_at(state, t) for t in tracks]
        active = [e for e in evals if e.h_shifted <= self.params.d_k]
        assert len(active) == 2
        u, info = safety_qp(state, ControlInput(0.5, 0.0), active, self.cfg, self.params)
        assert info["status"] == "optimal"
        T = output_matrix(state, self.cfg.ell_d)
        for ev in active:
            Lg = ev.grad_robot @ T
            assert Lg @ u.as_array() + min(ev.epsilon, 0.0) + self.params.gamma * ev.h_shifted >= -1e-6

    def test_requires_active_evals(self):
        with pytest.raises(ValueError):
            safety_qp(RobotState(0, 0, 0), ControlInput(0, 0), [], self.cfg, self.params)


class TestOscillation:
    def test_empty_log(self):
        assert not detect_oscillation(BoundaryLog(), (0.0, 0.0), 0.1)

    def test_near_prior_crossing(self):
        log = BoundaryLog()
        log.add((0.0, 0.0), 0.0)
        assert detect_oscillation(log, (0.01, 0.0), 0.1)

    def test_far_prior_crossing(self):
        log = BoundaryLog()
        log.add((0.5, 0.0), 0.0)
        assert not detect_oscillation(log, (0.0, 0.0), 0.1)

    def test_capacity_bound(self):
        log = BoundaryLog(capacity=3)
        for i in range(10):
            log.add((float(i), 0.0), float(i))
        assert len(log.entries) == 3
        assert log.entries[0][1] == 7.0


class TestBackupMpc:
    def test_no_obstacle_near_path_matches_nominal(self):
        cfg = config(backup_horizon=10, backup_dt=0.1, mpc_horizon=10, mpc_dt=0.1)
        params = BarrierParams(R_safe=0.3, r=0.25)
        state = RobotState(0, 0, 0)
        track = static_track(0, 0.0, 4.0)
        u_b, res = backup_mpc(state, [track], cfg, params, (3.0, 0.0))
        u_n, _ = mpc_nominal(state, (3.0, 0.0), cfg)
        assert res.status in ("optimal", "max_iter")
        assert u_b.v == pytest.approx(u_n.v, abs=0.05)

    def test_obstacle_dead_ahead_bends(self):
        cfg = config()
        params = BarrierParams(R_safe=0.3, r=0.25)
        state = RobotState(0, 0, 0)
        track = static_track(0, 1.2, 0.0, a=0.35, b=0.35)
        u_b, res = backup_mpc(state, [track], cfg, params, (4.0, 0.0))
        assert res.status in ("optimal", "max_iter")
        assert abs(u_b.omega) > 0

    def test_requires_tracks(self):
        with pytest.raises(ValueError):
            backup_mpc(RobotState(0, 0, 0), [], config(), BarrierParams(), (1.0, 0.0))


class TestComposite:
    def setup_method(self):
        self.params = BarrierParams(R_safe=0.3, r=0.25, c_k=0.1, d_k=0.2)
        self.cfg = config(nominal_mode="clf")

    def controller(self):
        return Controller(self.cfg, self.params)

    def decide(self, ctrl, state, tracks, goal=(6.0, 0.0)):
        z = lookahead_point(state, self.cfg.ell_d)
        evals = [evaluate_track(t, z, self.params) for t in tracks]
        return ctrl.composite_control(state, evals, tracks, goal)

    def test_all_clear_pure_nominal(self):
        ctrl = self.controller()
        state = RobotState(0, 0, 0)
        tracks = [static_track(0, 0.0, 5.0)]
        dec = self.decide(ctrl, state, tracks)
        u_nom, _ = clf_nominal(state, (6.0, 0.0), self.cfg)
        assert dec.mode == "goal_seeking"
        assert dec.rho_bar == 1.0
        assert (dec.u.v, dec.u.omega) == (u_nom.v, u_nom.omega)

    def test_deep_buffer_pure_safety(self):
        ctrl = self.controller()
        state = RobotState(0, 0, 0)
        # h_hat < 0: inside the inner band
        tracks = [static_track(0, 0.97, 0.0, a=0.3, b=0.3)]
        dec = self.decide(ctrl, state, tracks)
        assert dec.mode == "exploration"
        assert dec.rho_bar == 0.0
        assert (dec.u.v, dec.u.omega) == (dec.u_safe.v, dec.u_safe.omega)

    def test_midband_blend_componentwise(self):
        ctrl = self.controller()
        state = RobotState(0, 0, 0)
        # place the obstacle so h_hat is strictly inside (0, d_k)
        track = static_track(0, 1.15, 0.0, a=0.3, b=0.3)
        z = lookahead_point(state, self.cfg.ell_d)
        ev = evaluate_track(track, z, self.params)
        assert 0.0 < ev.rho < 1.0
        dec = self.decide(ctrl, state, [track])
        assert dec.mode == "exploration"
        expect = (1 - dec.rho_bar) * dec.u_safe.as_array() + dec.rho_bar * dec.u_nominal.as_array()
        assert dec.u.as_array() == pytest.approx(expect, abs=1e-12)

    def test_oscillation_triggers_backup(self):
        ctrl = self.controller()
        goal = (6.0, 0.0)
        # alternate the obstacle center so the shifted barrier crosses
        # zero repeatedly at the same position
        near = static_track(0, 0.93, 0.0, a=0.3, b=0.3)
        far = static_track(0, 1.08, 0.0, a=0.3, b=0.3)
        state = RobotState(0, 0, 0, 0.0)
        seq = [far, near, far, near, near]
        mode = None
        for i, tr in enumerate(seq):
            state = RobotState(0, 0, 0, 0.05 * i)
            dec = self.decide(ctrl, state, [tr], goal)
            mode = dec.mode
        assert mode == "backup"
        assert ctrl.backup_latched

    def test_backup_resets_after_leaving_buffers(self):
        ctrl = self.controller()
        ctrl.backup_latched = True
        ctrl.log.add((0.0, 0.0), 0.0)
        state = RobotState(0, 0, 0)
        dec = self.decide(ctrl, state, [static_track(0, 0.0, 5.0)])
        assert dec.mode == "goal_seeking"
        assert not ctrl.backup_latched
        assert ctrl.log.entries == []

    def test_bounds_always_respected(self):
        ctrl = self.controller()
        rng = np.random.default_rng(2)
        state = RobotState(0, 0, 0)
        for _ in range(40):
            cx = rng.uniform(0.9, 1.6)
            cy = rng.uniform(-0.3, 0.3)
            dec = self.decide(ctrl, RobotState(0, 0, rng.uniform(-1, 1)),
                              [static_track(0, cx, cy, a=0.3, b=0.3)])
            assert abs(dec.u.v) <= self.cfg.v_max + 1e-9
            assert abs(dec.u.omega) <= self.cfg.omega_max + 1e-9
