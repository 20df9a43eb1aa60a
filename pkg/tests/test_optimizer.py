import math

import numpy as np
import pytest
from scipy.optimize import minimize

from zonecbf.barrier import BarrierParams
from zonecbf.optimizer import (
    NmpcProblem,
    ObstacleHorizon,
    QpProblem,
    kkt_residuals,
    rk4_step_with_jacobians,
    solve_nmpc,
    solve_qp,
)
from zonecbf.perception import Mbe
from zonecbf.world import ControlInput, RobotState, step_dynamics


class TestSolveQp:
    def test_halfspace_projection(self):
        p = QpProblem(H=2 * np.eye(2), q=-2 * np.array([1.0, 0.0]),
                      G=np.array([[1.0, 0.0]]), g=np.array([0.5]))
        r = solve_qp(p)
        assert r.status == "optimal"
        assert r.u == pytest.approx([0.5, 0.0])

    def test_unconstrained_minimum(self):
        H = np.diag([2.0, 4.0])
        q = np.array([1.0, 1.0])
        r = solve_qp(QpProblem(H=H, q=q, G=np.zeros((0, 2)), g=np.zeros(0)))
        assert r.u == pytest.approx(-np.linalg.solve(H, q))

    def test_infeasible_detected(self):
        p = QpProblem(H=2 * np.eye(1), q=np.zeros(1),
                      G=np.array([[1.0], [-1.0]]), g=np.array([-1.0, -1.0]))
        assert solve_qp(p).status == "infeasible"

    def test_random_vs_grid_search(self):
        rng = np.random.default_rng(0)
        for _ in range(60):
            A = rng.normal(0, 1, (2, 2))
            H = A @ A.T + 0.5 * np.eye(2)
            q = rng.normal(0, 1, 2)
            G = rng.normal(0, 1, (3, 2))
            g = G @ rng.normal(0, 1, 2) + rng.uniform(0.1, 1, 3)
            r = solve_qp(QpProblem(H=H, q=q, G=G, g=g))
            assert r.status == "optimal"
            xs = np.linspace(-3, 3, 601)
            X, Y = np.meshgrid(xs, xs)
            P = np.stack([X.ravel(), Y.ravel()], 1)
            feas = np.all(P @ G.T <= g + 1e-12, axis=1)
            vals = 0.5 * np.einsum("ij,jk,ik->i", P, H, P) + P @ q
            vals[~feas] = np.inf
            mine = 0.5 * r.u @ H @ r.u + q @ r.u
            assert mine <= vals.min() + 1e-2

    def test_kkt_certificates(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            m = int(rng.integers(1, 4))
            k = int(rng.integers(0, 26))
            A = rng.normal(0, 1, (m, m))
            H = A @ A.T + 0.3 * np.eye(m)
            q = rng.normal(0, 1, m)
            G = rng.normal(0, 1, (k, m))
            g = G @ rng.normal(0, 1, m) + rng.uniform(0.05, 1, k)
            r = solve_qp(QpProblem(H=H, q=q, G=G, g=g))
            assert r.status == "optimal"
            assert max(r.kkt.values()) <= 1e-6

    def test_dual_interpretation(self):
        p = QpProblem(H=2 * np.eye(2), q=-2 * np.array([1.0, 0.0]),
                      G=np.array([[1.0, 0.0]]), g=np.array([0.5]))
        r = solve_qp(p)
        res = kkt_residuals(p, r.u, r.duals)
        assert res["stationarity"] <= 1e-9
        assert r.duals[0] > 0

    def test_perturbation_continuity(self):
        rng = np.random.default_rng(3)
        H = np.diag([2.0, 3.0])
        G = np.array([[1.0, 1.0], [-1.0, 0.4], [0.2, -1.0]])
        g = np.array([1.0, 1.0, 1.0])
        q0 = np.array([0.4, -0.7])
        base = solve_qp(QpProblem(H=H, q=q0, G=G, g=g)).u
        for _ in range(50):
            d = rng.normal(0, 1e-4, 2)
            u = solve_qp(QpProblem(H=H, q=q0 + d, G=G, g=g)).u
            assert np.linalg.norm(u - base) <= 50 * np.linalg.norm(d)

    def test_validation(self):
        with pytest.raises(ValueError):
            QpProblem(H=np.array([[0.0]]), q=np.zeros(1), G=np.zeros((0, 1)), g=np.zeros(0))
        with pytest.raises(ValueError):
            QpProblem(H=np.eye(1), q=np.array([np.nan]), G=np.zeros((0, 1)), g=np.zeros(0))


class TestRk4Jacobians:
    def test_matches_step_dynamics(self):
        x = np.array([0.3, -0.2, 0.7])
        u = np.array([0.8, 0.5])
        xn, _, _ = rk4_step_with_jacobians(x, u, 0.1)
        s = step_dynamics(RobotState(*x), ControlInput(*u), 0.1)
        assert xn == pytest.approx([s.x, s.y, s.heading])

    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            x = rng.normal(0, 1, 3)
            u = rng.uniform(-1, 1, 2)
            _, A, B = rk4_step_with_jacobians(x, u, 0.1)
            for i in range(3):
                e = np.zeros(3)
                e[i] = 1e-6
                col = (rk4_step_with_jacobians(x + e, u, 0.1)[0]
                       - rk4_step_with_jacobians(x - e, u, 0.1)[0]) / 2e-6
                assert np.allclose(A[:, i], col, atol=1e-8)
            for i in range(2):
                e = np.zeros(2)
                e[i] = 1e-6
                col = (rk4_step_with_jacobians(x, u + e, 0.1)[0]
                       - rk4_step_with_jacobians(x, u - e, 0.1)[0]) / 2e-6
                assert np.allclose(B[:, i], col, atol=1e-8)


def replay_error(res, dt):
    state = RobotState(*res.states[0])
    worst = 0.0
    for k, u in enumerate(res.inputs):
        state = step_dynamics(state, ControlInput(float(u[0]), float(u[1])), dt)
        worst = max(
            worst,
            abs(state.x - res.states[k + 1, 0]),
            abs(state.y - res.states[k + 1, 1]),
        )
    return worst


class TestSolveNmpc:
    def problem(self, **kw):
        defaults = dict(
            horizon=10,
            dt=0.1,
            initial_state=RobotState(0, 0, 0),
            goal=np.array([3.0, 0.0]),
            v_max=0.5,
            omega_max=1.5,
        )
        defaults.update(kw)
        return NmpcProblem(**defaults)

    def test_straight_ahead_symmetric(self):
        res = solve_nmpc(self.problem())
        assert res.status in ("optimal", "max_iter")
        assert res.inputs[0, 0] > 0
        assert abs(res.inputs[0, 1]) <= 1e-3
        d0 = np.hypot(*(res.states[0, :2] - (3, 0)))
        dN = np.hypot(*(res.states[-1, :2] - (3, 0)))
        assert dN < d0

    def test_at_goal_idle(self):
        res = solve_nmpc(self.problem(initial_state=RobotState(3, 0, 0)))
        assert np.max(np.abs(res.inputs[0])) <= 1e-3

    def test_replay_consistency(self):
        ob = ObstacleHorizon(mbes=[Mbe(np.array([1.5, 0.1]), 0.4, 0.4, 0.0)],
                             params=BarrierParams(R_safe=0.2, r=0.15))
        res = solve_nmpc(self.problem(obstacles=[ob]))
        assert replay_error(res, 0.1) <= 1e-6

    def test_single_obstacle_rows_and_clearance(self):
        params = BarrierParams(R_safe=0.2, r=0.15)
        ob = ObstacleHorizon(mbes=[Mbe(np.array([1.5, 0.0]), 0.4, 0.4, 0.0)], params=params)
        res = solve_nmpc(self.problem(obstacles=[ob]))
        assert res.status in ("optimal", "max_iter")
        assert res.row_margin >= -1e-6
        clear = np.hypot(res.states[:, 0] - 1.5, res.states[:, 1]) - 0.4
        assert np.all(clear > 0)

    def test_horizon_one_matches_direct_solver(self):
        # independent oracle: SLSQP on the equivalent one-step problem
        params = BarrierParams(R_safe=0.2, r=0.15, gamma=1.0)
        m = Mbe(np.array([0.8, 0.25]), 0.3, 0.3, 0.0)
        prob = self.problem(horizon=1, obstacles=[ObstacleHorizon(mbes=[m], params=params)])
        res = solve_nmpc(prob, step_tol=1e-9)
        from zonecbf.barrier import barrier_value
        from zonecbf.optimizer import _goal_bearings, _nmpc_cost, _rollout

        x0 = np.array([0.0, 0.0, 0.0])
        bearings_ref = None

        def objective(u):
            X = _rollout(x0, u.reshape(1, 2), 0.1)
            return _nmpc_cost(prob, X, u.reshape(1, 2), bearings_ref)

        def row(u):
            X = _rollout(x0, u.reshape(1, 2), 0.1)
            h0 = barrier_value(m, X[0, :2], params)
            h1 = barrier_value(m, X[1, :2], params)
            return h1 - (1 - params.gamma * prob.dt) * h0

        bearings_ref = _goal_bearings(prob, _rollout(x0, res.inputs, 0.1))
        best = None
        for guess in ([0.3, 0.0], [0.5, 1.0], [0.5, -1.0], [0.0, 0.0]):
            sol = minimize(
                objective,
                np.asarray(guess),
                method="SLSQP",
                bounds=[(-0.5, 0.5), (-1.5, 1.5)],
                constraints=[{"type": "ineq", "fun": row}],
                options={"ftol": 1e-14, "maxiter": 300},
            )
            if sol.success and (best is None or sol.fun < best.fun):
                best = sol
        assert best is not None
        mine = objective(res.inputs.ravel())
        assert mine <= best.fun + 1e-6

    def test_initial_infeasible_flagged(self):
        params = BarrierParams(R_safe=0.2, r=0.15)
        ob = ObstacleHorizon(mbes=[Mbe(np.array([0.1, 0.0]), 0.5, 0.5, 0.0)],
                             params=params, allow_depth=0.0)
        res = solve_nmpc(self.problem(obstacles=[ob]))
        assert res.status == "initial_infeasible"

    def test_moving_obstacle_rows(self):
        params = BarrierParams(R_safe=0.2, r=0.15)
        mbes = [Mbe(np.array([2.5 - 0.1 * k, 0.0]), 0.3, 0.3, 0.0) for k in range(11)]
        res = solve_nmpc(self.problem(obstacles=[ObstacleHorizon(mbes=mbes, params=params)]))
        assert res.status in ("optimal", "max_iter")
        assert res.row_margin >= -1e-6


class TestSolveQpBudget:
    def test_small_problems_within_soft_budget(self):
        # soft budget: tiny dense problems solve within a millisecond
        import time

        rng = np.random.default_rng(12)
        times = []
        for _ in range(200):
            m = int(rng.integers(2, 4))
            k = int(rng.integers(5, 26))
            A = rng.normal(0, 1, (m, m))
            H = A @ A.T + 0.5 * np.eye(m)
            G = rng.normal(0, 1, (k, m))
            g = G @ rng.normal(0, 1, m) + rng.uniform(0.05, 1, k)
            q = rng.normal(0, 1, m)
            t0 = time.perf_counter()
            r = solve_qp(QpProblem(H=H, q=q, G=G, g=g))
            times.append(time.perf_counter() - t0)
            assert r.status == "optimal"
        assert float(np.median(times)) < 1e-3
