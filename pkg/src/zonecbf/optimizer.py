"""Small dense convex QP solver (dual active set) and a finite-horizon
nonlinear MPC built on it (SQP over a condensed multiple-shooting
transcription of the unicycle).

Both solvers expose verifiable certificates: the QP reports KKT
residuals, the NMPC reports the nonlinear barrier-row margins and is
returned as an exact rollout of its own input sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .barrier import BarrierParams, barrier_gradient, barrier_value
from .perception import Mbe
from .world import ControlInput, RobotState, step_dynamics, wrap_angle

_FEAS_TOL = 1e-10


@dataclass
class QpProblem:
    """min 1/2 u'Hu + q'u  s.t.  G u <= g.  H symmetric positive-definite."""

    H: np.ndarray
    q: np.ndarray
    G: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.q = np.asarray(self.q, dtype=float)
        self.G = np.asarray(self.G, dtype=float).reshape(-1, self.H.shape[0])
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        if not np.all(np.isfinite(self.H)) or not np.all(np.isfinite(self.q)):
            raise ValueError("non-finite objective data")
        if not np.all(np.isfinite(self.G)) or not np.all(np.isfinite(self.g)):
            raise ValueError("non-finite constraint data")
        if np.max(np.abs(self.H - self.H.T)) > 1e-9:
            raise ValueError("H must be symmetric")
        if np.min(np.linalg.eigvalsh(self.H)) < 1e-9:
            raise ValueError("H must be positive-definite")


@dataclass
class QpResult:
    u: np.ndarray
    duals: np.ndarray
    status: str  # optimal | infeasible | max_iter
    iterations: int
    kkt: dict = field(default_factory=dict)


def kkt_residuals(p: QpProblem, u: np.ndarray, duals: np.ndarray) -> dict:
    """Stationarity, primal/dual feasibility, and complementarity
    residuals for a candidate solution of Gu <= g."""
    slack = p.G @ u - p.g
    return {
        "stationarity": float(np.max(np.abs(p.H @ u + p.q + p.G.T @ duals), initial=0.0)),
        "primal": float(np.max(slack, initial=0.0)),
        "dual": float(np.max(-duals, initial=0.0)),
        "complementarity": float(np.max(np.abs(duals * slack), initial=0.0)),
    }


def solve_qp(p: QpProblem, max_iter: int | None = None) -> QpResult:
    """Dual active-set method (Goldfarb-Idnani): start at the
    unconstrained minimum and add violated constraints one at a time.
    Needs no feasible start and detects infeasibility."""
    m = p.H.shape[0]
    k = p.G.shape[0]
    if max_iter is None:
        max_iter = 100 + 10 * k
    Hf = cho_factor(p.H)
    x = -cho_solve(Hf, p.q)
    # internal form: A x >= b
    A = -p.G
    b = -p.g
    active: list[int] = []
    lam: list[float] = []
    iters = 0

    while iters < max_iter:
        iters += 1
        s = A @ x - b
        pending = np.flatnonzero(s < -_FEAS_TOL)
        if len(pending) == 0:
            x, lam = _polish(p.H, p.q, A, b, x, active, lam)
            duals = np.zeros(k)
            for idx, j in zip(active, lam):
                duals[idx] = j
            res = QpResult(u=x, duals=duals, status="optimal", iterations=iters)
            res.kkt = kkt_residuals(p, x, duals)
            return res
        pidx = int(pending[np.argmin(s[pending])])
        n_p = A[pidx]
        lam_p = 0.0
        while iters < max_iter:
            iters += 1
            Hin = cho_solve(Hf, n_p)
            if active:
                N = A[active].T  # (m, na)
                HiN = cho_solve(Hf, N)
                M = N.T @ HiN
                try:
                    r = np.linalg.solve(M, N.T @ Hin)
                except np.linalg.LinAlgError:
                    return QpResult(x, np.zeros(k), "max_iter", iters)
                z = Hin - HiN @ r
            else:
                r = np.zeros(0)
                z = Hin
            # dual blocking step
            t1, block = math.inf, -1
            for idx in range(len(active)):
                if r[idx] > 1e-12:
                    step = lam[idx] / r[idx]
                    if step < t1:
                        t1, block = step, idx
            # full primal step
            nz = float(n_p @ z)
            if nz > 1e-12:
                t2 = -(float(n_p @ x) - b[pidx]) / nz
            else:
                t2 = math.inf
            t = min(t1, t2)
            if not math.isfinite(t):
                return QpResult(x, np.zeros(k), "infeasible", iters)
            if t2 < math.inf:
                x = x + t * z
            for idx in range(len(active)):
                lam[idx] -= t * r[idx]
            lam_p += t
            if t == t2:
                active.append(pidx)
                lam.append(lam_p)
                break
            active.pop(block)
            lam.pop(block)
    return QpResult(x, np.zeros(k), "max_iter", iters)


def _polish(H, q, A, b, x, active: list[int], lam: list[float]):
    """Re-solve the KKT equality system on the final active set so the
    reported residuals sit at machine precision; falls back to the
    iterate if the polished point violates an inactive row or sign."""
    if not active:
        return x, lam
    N = A[active]
    na = len(active)
    m = H.shape[0]
    KKT = np.zeros((m + na, m + na))
    KKT[:m, :m] = H
    KKT[:m, m:] = -N.T
    KKT[m:, :m] = N
    rhs = np.concatenate([-q, b[active]])
    try:
        sol = np.linalg.solve(KKT, rhs)
    except np.linalg.LinAlgError:
        return x, lam
    x_new, lam_new = sol[:m], sol[m:]
    s_new = A @ x_new - b
    if np.min(lam_new) < -1e-9 or np.min(s_new) < -1e-9:
        return x, lam
    return x_new, list(lam_new)


def rk4_step_with_jacobians(x: np.ndarray, u: np.ndarray, dt: float):
    """One RK4 step of the unicycle plus exact discrete Jacobians
    d(x+)/dx and d(x+)/du, propagated through the stages."""
    v, w = float(u[0]), float(u[1])

    def f(xs):
        return np.array([v * math.cos(xs[2]), v * math.sin(xs[2]), w])

    def jx(xs):
        return np.array(
            [[0.0, 0.0, -v * math.sin(xs[2])], [0.0, 0.0, v * math.cos(xs[2])], [0.0, 0.0, 0.0]]
        )

    def ju(xs):
        return np.array([[math.cos(xs[2]), 0.0], [math.sin(xs[2]), 0.0], [0.0, 1.0]])

    I = np.eye(3)
    k1 = f(x)
    K1x, K1u = jx(x), ju(x)
    x2 = x + 0.5 * dt * k1
    J2 = jx(x2)
    k2 = f(x2)
    K2x = J2 @ (I + 0.5 * dt * K1x)
    K2u = J2 @ (0.5 * dt * K1u) + ju(x2)
    x3 = x + 0.5 * dt * k2
    J3 = jx(x3)
    k3 = f(x3)
    K3x = J3 @ (I + 0.5 * dt * K2x)
    K3u = J3 @ (0.5 * dt * K2u) + ju(x3)
    x4 = x + dt * k3
    J4 = jx(x4)
    k4 = f(x4)
    K4x = J4 @ (I + dt * K3x)
    K4u = J4 @ (dt * K3u) + ju(x4)
    x_next = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    A = I + (dt / 6.0) * (K1x + 2 * K2x + 2 * K3x + K4x)
    B = (dt / 6.0) * (K1u + 2 * K2u + 2 * K3u + K4u)
    return x_next, A, B


@dataclass
class ObstacleHorizon:
    """Barrier data for one obstacle over the MPC horizon.

    mbes holds the ellipse predicted at each step 0..N (a length-1 list
    means a static obstacle).  offset subtracts from h in the rows (use
    c_k for shifted buffer-form rows, 0 for the nominal form).
    allow_depth is the admissible initial deficit: rows whose step-0
    value falls below -allow_depth flag the problem initial-infeasible.
    """

    mbes: list[Mbe]
    params: BarrierParams
    offset: float = 0.0
    allow_depth: float = 0.0

    def mbe_at(self, k: int) -> Mbe:
        return self.mbes[min(k, len(self.mbes) - 1)]


@dataclass
class NmpcProblem:
    horizon: int
    dt: float
    initial_state: RobotState
    goal: np.ndarray
    v_max: float
    omega_max: float
    obstacles: list[ObstacleHorizon] = field(default_factory=list)
    w_pos: float = 1.0
    w_heading: float = 0.1
    w_v: float = 0.1
    w_omega: float = 0.05
    terminal_scale: float = 10.0

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=float)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if min(self.w_pos, self.w_v, self.w_omega, self.terminal_scale) <= 0:
            raise ValueError("weights must be positive")


@dataclass
class NmpcResult:
    inputs: np.ndarray  # (N, 2)
    states: np.ndarray  # (N+1, 3), exact rollout of inputs
    status: str  # optimal | max_iter | initial_infeasible | failed
    sqp_iterations: int
    row_margin: float  # min over nonlinear barrier rows (inf if none)
    kkt_max: float  # worst QP residual across SQP iterations
    cost: float

    def first_input(self) -> ControlInput:
        return ControlInput(float(self.inputs[0, 0]), float(self.inputs[0, 1]))


def _rollout(x0: np.ndarray, U: np.ndarray, dt: float) -> np.ndarray:
    X = np.zeros((len(U) + 1, 3))
    X[0] = x0
    state = RobotState(x0[0], x0[1], x0[2])
    for k, u in enumerate(U):
        state = step_dynamics(state, ControlInput(float(u[0]), float(u[1])), dt)
        X[k + 1] = (state.x, state.y, state.heading)
    return X


def _row_values(p: NmpcProblem, X: np.ndarray) -> np.ndarray:
    """Nonlinear barrier-row margins h_{k+1} - (1-gamma*dt)h_k over the
    trajectory, one row per (obstacle, step)."""
    vals = []
    for ob in p.obstacles:
        beta = 1.0 - ob.params.gamma * p.dt
        hs = [
            barrier_value(ob.mbe_at(k), X[k, :2], ob.params) - ob.offset
            for k in range(p.horizon + 1)
        ]
        for k in range(p.horizon):
            vals.append(hs[k + 1] - beta * hs[k])
    return np.asarray(vals)


def _nmpc_cost(
    p: NmpcProblem, X: np.ndarray, U: np.ndarray, bearings: np.ndarray | None = None
) -> float:
    """Goal-tracking cost; heading is steered toward per-step bearings
    (frozen per solve so the SQP model stays stationary), fading out
    near the goal."""
    cost = 0.0
    for k in range(1, p.horizon + 1):
        scale = p.terminal_scale if k == p.horizon else 1.0
        e = X[k, :2] - p.goal
        cost += scale * p.w_pos * float(e @ e)
        if bearings is not None:
            dist = float(np.hypot(*e))
            w_theta = scale * p.w_heading * min(1.0, (dist / 0.3) ** 2)
            if w_theta > 0:
                cost += w_theta * wrap_angle(X[k, 2] - bearings[k]) ** 2
    for u in U:
        cost += p.w_v * u[0] ** 2 + p.w_omega * u[1] ** 2
    return cost


def _goal_bearings(p: NmpcProblem, X: np.ndarray) -> np.ndarray:
    out = np.zeros(p.horizon + 1)
    for k in range(p.horizon + 1):
        e = p.goal - X[k, :2]
        out[k] = math.atan2(e[1], e[0]) if float(np.hypot(*e)) > 1e-9 else X[k, 2]
    return out


def solve_nmpc(
    p: NmpcProblem,
    initial_inputs: np.ndarray | None = None,
    max_sqp_iter: int = 50,
    step_tol: float = 1e-4,
    row_tol: float = 1e-6,
    on_iteration=None,
) -> NmpcResult:
    """SQP on the condensed multiple-shooting transcription: linearize
    dynamics and barrier rows around the iterate, solve the dense QP in
    the input deviations, repeat until the step norm and shooting
    defects vanish.  The returned states are the exact rollout of the
    returned inputs."""
    N, dt = p.horizon, p.dt
    x0 = np.array([p.initial_state.x, p.initial_state.y, p.initial_state.heading])
    nu = 2 * N

    for ob in p.obstacles:
        h0 = barrier_value(ob.mbe_at(0), x0[:2], ob.params) - ob.offset
        if h0 < -ob.allow_depth - 1e-9:
            return NmpcResult(
                inputs=np.zeros((N, 2)),
                states=_rollout(x0, np.zeros((N, 2)), dt),
                status="initial_infeasible",
                sqp_iterations=0,
                row_margin=float(h0),
                kkt_max=0.0,
                cost=math.inf,
            )

    if initial_inputs is not None and initial_inputs.shape == (N, 2):
        U = np.clip(initial_inputs.copy(), [-p.v_max, -p.omega_max], [p.v_max, p.omega_max])
    else:
        U = np.zeros((N, 2))
    X = _rollout(x0, U, dt)
    trust_nominal = np.array([0.5 * p.v_max, 0.5 * p.omega_max])
    trust = trust_nominal.copy()
    kkt_max = 0.0
    converged = False
    it = 0
    mu = 1e4  # row-violation weight in the line-search merit
    bearings = _goal_bearings(p, X)

    def merit_of(Xc, Uc):
        viol = 0.0
        if p.obstacles:
            rows = _row_values(p, Xc)
            viol = float(np.sum(np.maximum(0.0, -rows)))
        return _nmpc_cost(p, Xc, Uc, bearings) + mu * viol

    merit = merit_of(X, U)
    stalls = 0

    for it in range(1, max_sqp_iter + 1):
        # sensitivities along the exact rollout (defects are zero)
        S = np.zeros((N + 1, 3, nu))
        for k in range(N):
            _, A, B = rk4_step_with_jacobians(X[k], U[k], dt)
            S[k + 1] = A @ S[k]
            S[k + 1][:, 2 * k : 2 * k + 2] += B

        # quadratic cost in the input deviations
        H = np.zeros((nu, nu))
        qlin = np.zeros(nu)
        for k in range(1, N + 1):
            scale = p.terminal_scale if k == N else 1.0
            e_pos = X[k, :2] - p.goal
            dist = float(np.hypot(*e_pos))
            w_theta = scale * p.w_heading * min(1.0, (dist / 0.3) ** 2)
            e_theta = wrap_angle(X[k, 2] - bearings[k]) if w_theta > 0 else 0.0
            Wk = np.diag([scale * p.w_pos, scale * p.w_pos, w_theta])
            err = np.array([e_pos[0], e_pos[1], e_theta])
            H += 2.0 * S[k].T @ Wk @ S[k]
            qlin += 2.0 * S[k].T @ (Wk @ err)
        Wu = np.diag([p.w_v, p.w_omega])
        for k in range(N):
            sl = slice(2 * k, 2 * k + 2)
            H[sl, sl] += 2.0 * Wu
            qlin[sl] += 2.0 * Wu @ U[k]
        H += 1e-9 * np.eye(nu)

        # rows: input bounds with trust region, linearized barrier rows
        G_rows, g_rows = [], []
        umax = np.array([p.v_max, p.omega_max])
        for k in range(N):
            for j in range(2):
                e = np.zeros(nu)
                e[2 * k + j] = 1.0
                lo = max(-umax[j] - U[k, j], -trust[j])
                hi = min(umax[j] - U[k, j], trust[j])
                G_rows.append(e)
                g_rows.append(hi)
                G_rows.append(-e)
                g_rows.append(-lo)
        n_box = len(G_rows)
        for ob in p.obstacles:
            beta = 1.0 - ob.params.gamma * dt
            grads = []
            hbars = []
            for k in range(N + 1):
                hbars.append(barrier_value(ob.mbe_at(k), X[k, :2], ob.params) - ob.offset)
                grads.append(barrier_gradient(ob.mbe_at(k), X[k, :2], ob.params)[0])
            for k in range(N):
                row = beta * grads[k] @ S[k, :2] - grads[k + 1] @ S[k + 1, :2]
                G_rows.append(row)
                g_rows.append(hbars[k + 1] - beta * hbars[k])
        G = np.vstack(G_rows)
        g = np.asarray(g_rows)

        # one shared slack keeps the subproblem feasible by construction;
        # the linear term makes the penalty exact, so slack vanishes at
        # any truly feasible solution
        n_rows = len(g)
        H2 = np.zeros((nu + 1, nu + 1))
        H2[:nu, :nu] = H
        H2[nu, nu] = 2.0 * mu
        q2 = np.concatenate([qlin, [mu]])
        G2 = np.zeros((n_rows + 1, nu + 1))
        G2[:n_rows, :nu] = G
        G2[n_box:n_rows, nu] = -1.0
        G2[n_rows, nu] = -1.0  # slack >= 0
        g2 = np.concatenate([g, [0.0]])
        sol = solve_qp(QpProblem(H=H2, q=q2, G=G2, g=g2))
        if sol.status != "optimal":
            break
        kkt_max = max(kkt_max, max(sol.kkt.values()))
        dU = sol.u[:nu]
        slack_used = sol.u[nu] > 1e-9
        if not slack_used:
            trust = np.minimum(1.5 * trust, trust_nominal)

        # merit line search on exact rollouts (keeps SQP from cycling);
        # a step that improves nothing is rejected, not least-bad-accepted
        dU2 = dU.reshape(N, 2)
        accepted = None
        for alpha in (1.0, 0.5, 0.25, 0.125, 0.0625):
            U_try = np.clip(U + alpha * dU2, [-p.v_max, -p.omega_max], [p.v_max, p.omega_max])
            X_try = _rollout(x0, U_try, dt)
            m_try = merit_of(X_try, U_try)
            if m_try < merit - 1e-12:
                accepted = (m_try, alpha, U_try, X_try)
                break
        improvement = 0.0
        if accepted is None:
            stalls += 1
            trust = np.maximum(0.5 * trust, 0.02 * trust_nominal)
            step_norm = 0.0
            alpha = 0.0
        else:
            improvement = merit - accepted[0]
            merit, alpha, U, X = accepted
            step_norm = alpha * float(np.max(np.abs(dU)))
        if on_iteration is not None:
            on_iteration(
                {
                    "iter": it,
                    "step": step_norm,
                    "alpha": alpha,
                    "slack": slack_used,
                    "merit": merit,
                    "trust": trust.copy(),
                }
            )
        if accepted is not None and step_norm < step_tol and not slack_used:
            converged = True
            break
        if (
            accepted is not None
            and improvement < 1e-5 * (1.0 + abs(merit))
            and (not p.obstacles or float(_row_values(p, X).min()) >= -row_tol)
        ):
            # flat-valley tail: refinements this small cannot matter, and
            # the nonlinear rows already hold on the rollout
            converged = True
            break
        if stalls >= 6:
            break

    rows = _row_values(p, X)
    margin = float(rows.min()) if len(rows) else math.inf
    if converged and margin >= -row_tol:
        status = "optimal"
    elif margin >= -row_tol:
        status = "max_iter"
    else:
        status = "failed"
    return NmpcResult(
        inputs=U,
        states=X,
        status=status,
        sqp_iterations=it,
        row_margin=margin,
        kkt_max=kkt_max,
        cost=_nmpc_cost(p, X, U, bearings),
    )
