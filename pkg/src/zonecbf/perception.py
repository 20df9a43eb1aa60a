"""Online local perception: cluster the scan, fit minimum bounding
ellipses, associate with the previous frame, split static from dynamic,
and Kalman-track the dynamic obstacles.

The carried state is the track list; everything else is pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .world import LidarScan, wrap_half_angle

# affinity entries beyond d_max are replaced by this forbidden sentinel
FORBIDDEN = 1e9

# kalman state layout: [x, y, vx, vy, ax, ay, a, b, theta]
_POS = (0, 1)
_VEL = (2, 3)
_MEAS_IDX = (0, 1, 6, 7, 8)


@dataclass(frozen=True)
class Cluster:
    points: np.ndarray  # (n, 2)
    id: int


@dataclass(frozen=True)
class Mbe:
    """Minimum bounding ellipse, canonicalized to a >= b > 0 and
    angle in (-pi/2, pi/2]."""

    center: np.ndarray  # (2,)
    a: float
    b: float
    angle: float

    def contains_residual(self, points: np.ndarray) -> float:
        """Max over points of the implicit ellipse value (<= 0 means
        contained)."""
        d = np.atleast_2d(points) - self.center
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = d[:, 0] * c + d[:, 1] * s
        w = -d[:, 0] * s + d[:, 1] * c
        return float(np.max((u / self.a) ** 2 + (w / self.b) ** 2 - 1.0))

    def area(self) -> float:
        return math.pi * self.a * self.b


@dataclass
class PerceptionParams:
    """Clustering, association, and filter tuning knobs."""

    d_p: float = 0.3
    n_min: int = 3
    d_max: float = 1.0
    d_min: float = 0.03
    b_min: float = 0.05
    miss_limit: int = 5
    revert_frames: int = 3
    displacement_window: int = 5
    q_pos: float = 1e-3
    q_vel: float = 1e-2
    q_acc: float = 1e-1
    q_shape: float = 1e-3
    r_center: float = 0.02
    r_axes: float = 0.05
    r_angle: float = 0.05

    def __post_init__(self):
        if self.d_p <= 0 or self.n_min < 1:
            raise ValueError("d_p must be positive and n_min >= 1")
        if not (0 < self.d_min < self.d_max):
            raise ValueError("need 0 < d_min < d_max")


@dataclass
class EllipseTrack:
    """A tracked obstacle: 9-dim Kalman state over center kinematics and
    ellipse shape, plus the static/dynamic label bookkeeping."""

    label: int
    kalman_state: np.ndarray  # (9,)
    covariance: np.ndarray  # (9, 9)
    kind: str = "static"  # "static" | "dynamic"
    age: int = 1
    misses: int = 0
    quiet_frames: int = 0  # consecutive sub-d_min frames while dynamic
    dynamic_age: int = 0  # consecutive frames classified dynamic
    # recent raw center displacements; the median drives classification,
    # which single ray-quantization jumps must not flip
    disp_history: tuple = ()

    def mbe(self) -> Mbe:
        s = self.kalman_state
        a, b = float(s[6]), float(s[7])
        ang = float(s[8])
        if b > a:
            a, b = b, a
            ang += math.pi / 2
        return Mbe(center=s[:2].copy(), a=a, b=b, angle=wrap_half_angle(ang))

    def velocity(self) -> np.ndarray:
        return self.kalman_state[2:4].copy()

    def trusted_velocity(self) -> np.ndarray:
        """Center-velocity estimate, zeroed until the dynamic label has
        persisted long enough to rule out a spurious flip."""
        if self.kind == "dynamic" and self.dynamic_age >= 5:
            return self.kalman_state[2:4].copy()
        return np.zeros(2)


def dbscan_cluster(scan: LidarScan | np.ndarray, d_p: float, n_min: int) -> list[Cluster]:
    """Standard DBSCAN partition of the scan points.  Noise points are
    discarded; cluster ids follow the order of first core point."""
    if d_p <= 0 or n_min < 1:
        raise ValueError("d_p must be positive and n_min >= 1")
    pts = scan.points if isinstance(scan, LidarScan) else np.asarray(scan, dtype=float)
    n = len(pts)
    if n == 0:
        return []
    diff = pts[:, None, :] - pts[None, :, :]
    within = np.einsum("ijk,ijk->ij", diff, diff) <= d_p * d_p
    degree = within.sum(axis=1)  # neighborhood includes the point itself
    core = degree >= n_min
    labels = np.full(n, -1)
    next_id = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = next_id
        frontier = [i]
        while frontier:
            j = frontier.pop()
            if not core[j]:
                continue
            for k in np.flatnonzero(within[j]):
                if labels[k] == -1:
                    labels[k] = next_id
                    frontier.append(int(k))
        next_id += 1
    return [Cluster(points=pts[labels == cid], id=cid) for cid in range(next_id)]


def _inv3(x: np.ndarray) -> np.ndarray:
    """Adjugate inverse of a symmetric 3x3 (faster than np.linalg.inv
    in the Khachiyan inner loop)."""
    a, b, c = x[0]
    _, d, e = x[1]
    f = x[2, 2]
    A = d * f - e * e
    B = c * e - b * f
    C = b * e - c * d
    det = a * A + b * B + c * C
    D = a * f - c * c
    E = b * c - a * e
    F = a * d - b * b
    return np.array([[A, B, C], [B, D, E], [C, E, F]]) / det


def _khachiyan(pts: np.ndarray, eps: float = 1e-3, max_iter: int = 2000):
    """Minimum-area enclosing ellipse of >= 3 affinely independent points:
    Khachiyan barycentric ascent with away steps (Wolfe-Atwood), stopped
    once every lifted form value is within (1+eps) of optimal.  Returns
    (center, A) with the ellipse {p : (p-c)^T A (p-c) <= 1}."""
    n = len(pts)
    q = np.column_stack([pts, np.ones(n)])  # (n, 3)
    u = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        x = q.T @ (q * u[:, None])  # (3, 3)
        qi = q @ _inv3(x)
        m = np.einsum("ij,ij->i", qi, q)
        j_up = int(np.argmax(m))
        e_up = m[j_up] / 3.0 - 1.0
        if e_up <= eps:  # containment gap drives the area quality
            break
        support = u > 1e-12
        j_dn = int(np.flatnonzero(support)[np.argmin(m[support])])
        e_dn = 1.0 - m[j_dn] / 3.0
        j = j_up if e_up >= e_dn else j_dn
        mj = m[j]
        if mj > 1.0 + 1e-12:
            beta = (mj - 3.0) / (3.0 * (mj - 1.0))
        else:
            beta = -1.0  # force the full drop below
        if j == j_dn:
            beta = max(beta, -u[j] / (1.0 - u[j]))
        u *= 1.0 - beta
        u[j] += beta
    center = pts.T @ u
    cov = pts.T @ (pts * u[:, None]) - np.outer(center, center)
    A = np.linalg.inv(cov) / 2.0
    return center, A


def min_bounding_ellipse(cluster: Cluster | np.ndarray, b_min: float = 0.05) -> Mbe:
    """Minimum-area ellipse containing all cluster points, inflated so the
    semi-minor axis is at least b_min.  Degenerate clusters (single point
    or collinear) fall back to the thin-ellipse rule."""
    pts = cluster.points if isinstance(cluster, Cluster) else np.asarray(cluster, dtype=float)
    pts = np.atleast_2d(pts)
    if len(pts) == 0:
        raise ValueError("empty cluster")
    centered = pts - pts.mean(axis=0)
    spread = np.linalg.svd(centered, compute_uv=False) if len(pts) > 1 else np.zeros(2)
    if len(pts) == 1 or (len(spread) > 1 and spread[1] < 1e-9) or spread[0] < 1e-12:
        return _degenerate_mbe(pts, b_min)
    fit_pts = pts
    if len(pts) > 48:
        # decimate dense clusters before fitting; the scale-to-contain
        # step below still guarantees coverage of every original point
        idx = set(np.linspace(0, len(pts) - 1, 40).astype(int).tolist())
        idx.update(np.argmin(pts, axis=0).tolist())
        idx.update(np.argmax(pts, axis=0).tolist())
        fit_pts = pts[sorted(idx)]
    center, A = _khachiyan(fit_pts)
    evals, evecs = np.linalg.eigh(A)  # ascending: evals[0] -> major axis
    if evals[0] <= 0:
        return _degenerate_mbe(pts, b_min)
    # guarantee containment exactly: scale by the worst residual
    d = pts - center
    resid = np.einsum("ij,jk,ik->i", d, A, d)
    scale = max(1.0, float(resid.max()))
    a = math.sqrt(scale / evals[0])
    b = math.sqrt(scale / evals[1])
    angle = math.atan2(evecs[1, 0], evecs[0, 0])
    b = max(b, b_min)
    a = max(a, b)
    return Mbe(center=center, a=a, b=b, angle=wrap_half_angle(angle))


def _degenerate_mbe(pts: np.ndarray, b_min: float) -> Mbe:
    if len(pts) == 1:
        return Mbe(center=pts[0].copy(), a=b_min, b=b_min, angle=0.0)
    centered = pts - pts.mean(axis=0)
    _, _, vt = np.linalg.svd(centered)
    axis = vt[0]
    proj = centered @ axis
    lo, hi = float(proj.min()), float(proj.max())
    center = pts.mean(axis=0) + 0.5 * (lo + hi) * axis
    half = 0.5 * (hi - lo)
    # the off-axis residual is below the degeneracy threshold; the
    # b_min floor absorbs it
    a = max(half * (1.0 + 1e-9) + 1e-12, b_min)
    angle = math.atan2(axis[1], axis[0])
    return Mbe(center=center, a=a, b=max(b_min, 1e-6), angle=wrap_half_angle(angle))


def build_affinity(prev: list[EllipseTrack], curr: list[Mbe], d_max: float = 1.0) -> np.ndarray:
    """Center-distance affinity matrix with entries beyond d_max replaced
    by the forbidden sentinel."""
    if not prev or not curr:
        return np.zeros((len(prev), len(curr)))
    pc = np.stack([t.kalman_state[:2] for t in prev])
    cc = np.stack([m.center for m in curr])
    d = np.hypot(pc[:, 0, None] - cc[None, :, 0], pc[:, 1, None] - cc[None, :, 1])
    return np.where(d <= d_max, d, FORBIDDEN)


def associate(affinity: np.ndarray, d_max: float = 1.0):
    """Minimum-total-cost assignment (Kuhn-Munkres); matches through
    forbidden or beyond-threshold cells are discarded afterwards.

    Returns (matches, unmatched_curr): matched (prev_i, curr_j) pairs and
    the current-frame indices left needing new labels.
    """
    n_prev, n_curr = affinity.shape
    if n_prev == 0 or n_curr == 0:
        return [], list(range(n_curr))
    rows, cols = linear_sum_assignment(affinity)
    matches = [
        (int(i), int(j))
        for i, j in zip(rows, cols)
        if affinity[i, j] <= d_max and affinity[i, j] < FORBIDDEN
    ]
    matched_curr = {j for _, j in matches}
    unmatched = [j for j in range(n_curr) if j not in matched_curr]
    return matches, unmatched


def _transition(dt: float) -> np.ndarray:
    F = np.eye(9)
    F[0, 2] = F[1, 3] = dt
    F[2, 4] = F[3, 5] = dt
    F[0, 4] = F[1, 5] = 0.5 * dt * dt
    return F


def _process_noise(dt: float, p: PerceptionParams) -> np.ndarray:
    return dt * np.diag(
        [p.q_pos, p.q_pos, p.q_vel, p.q_vel, p.q_acc, p.q_acc, p.q_shape, p.q_shape, p.q_shape]
    )


def _measurement_noise(p: PerceptionParams) -> np.ndarray:
    return np.diag(
        [p.r_center**2, p.r_center**2, p.r_axes**2, p.r_axes**2, p.r_angle**2]
    )


def _measurement_matrix() -> np.ndarray:
    H = np.zeros((5, 9))
    for row, idx in enumerate(_MEAS_IDX):
        H[row, idx] = 1.0
    return H


def _check_pd(P: np.ndarray) -> None:
    if np.min(np.linalg.eigvalsh(0.5 * (P + P.T))) <= 0:
        raise ValueError("covariance is not positive-definite")


def kalman_predict(track: EllipseTrack, dt: float, params: PerceptionParams) -> EllipseTrack:
    """Constant-acceleration prediction on the center, random walk on the
    shape entries."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    _check_pd(track.covariance)
    F = _transition(dt)
    x = F @ track.kalman_state
    P = F @ track.covariance @ F.T + _process_noise(dt, params)
    return replace(track, kalman_state=x, covariance=0.5 * (P + P.T))


def kalman_update(track: EllipseTrack, measurement: Mbe, params: PerceptionParams) -> EllipseTrack:
    """Linear measurement update on [x, y, a, b, theta]; the angle
    innovation is wrapped to (-pi/2, pi/2]."""
    z = np.array(
        [
            measurement.center[0],
            measurement.center[1],
            measurement.a,
            measurement.b,
            measurement.angle,
        ]
    )
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite measurement")
    H = _measurement_matrix()
    R = _measurement_noise(params)
    x, P = track.kalman_state, track.covariance
    nu = z - H @ x
    nu[4] = wrap_half_angle(nu[4])
    S = H @ P @ H.T + R
    try:
        K = np.linalg.solve(S, H @ P).T
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular innovation covariance; check Q/R configuration") from exc
    x_new = x + K @ nu
    IKH = np.eye(9) - K @ H
    P_new = IKH @ P @ IKH.T + K @ R @ K.T  # Joseph form keeps P symmetric PSD
    x_new[8] = wrap_half_angle(x_new[8])
    return replace(track, kalman_state=x_new, covariance=0.5 * (P_new + P_new.T))


def multi_step_predict(track: EllipseTrack, steps: int, dt: float) -> list[Mbe]:
    """Open-loop prediction sequence for the backup MPC horizon; static
    tracks yield a constant sequence."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if track.kind == "static" or track.dynamic_age < 5:
        return [track.mbe()] * steps
    F = _transition(dt)
    out = []
    x = track.kalman_state.copy()
    for _ in range(steps):
        x = F @ x
        a, b, ang = float(x[6]), float(x[7]), float(x[8])
        if b > a:
            a, b, ang = b, a, ang + math.pi / 2
        out.append(Mbe(center=x[:2].copy(), a=a, b=b, angle=wrap_half_angle(ang)))
    return out


def _new_track(label: int, mbe: Mbe, params: PerceptionParams) -> EllipseTrack:
    state = np.array(
        [mbe.center[0], mbe.center[1], 0.0, 0.0, 0.0, 0.0, mbe.a, mbe.b, mbe.angle]
    )
    P = np.diag([0.05, 0.05, 0.25, 0.25, 0.25, 0.25, 0.05, 0.05, 0.1])
    return EllipseTrack(label=label, kalman_state=state, covariance=P)


def classify(
    matches: list[tuple[int, int]],
    prev: list[EllipseTrack],
    curr: list[Mbe],
    d_min: float,
    params: PerceptionParams,
    dt: float,
    unmatched_curr: list[int] | None = None,
) -> list[EllipseTrack]:
    """Apply the displacement rule to matched pairs, give new labels to
    unmatched current ellipses (static), and age out missed tracks.

    A track turns dynamic the moment its center moves d_min or more
    between frames; it reverts to static only after `revert_frames`
    consecutive quiet frames (flap suppression).
    """
    if unmatched_curr is None:
        unmatched_curr = [j for j in range(len(curr)) if j not in {j for _, j in matches}]
    next_label = max((t.label for t in prev), default=-1) + 1
    out: list[EllipseTrack] = []
    matched_prev = {i for i, _ in matches}

    for i, j in matches:
        track, mbe = prev[i], curr[j]
        displacement = float(np.hypot(*(track.kalman_state[:2] - mbe.center)))
        hist = (track.disp_history + (displacement,))[-params.displacement_window :]
        moved = float(np.median(hist)) >= d_min
        if track.kind == "static":
            if moved:
                # velocity starts at zero and is learned by the filter;
                # seeding it from one noisy displacement poisons the
                # barrier's motion term on spurious switches
                t = _new_track(track.label, mbe, params)
                out.append(
                    replace(
                        t,
                        kind="dynamic",
                        age=track.age + 1,
                        quiet_frames=0,
                        dynamic_age=1,
                        disp_history=hist,
                    )
                )
            else:
                t = _new_track(track.label, mbe, params)
                out.append(replace(t, age=track.age + 1, disp_history=hist))
        else:
            quiet = 0 if moved else track.quiet_frames + 1
            t = kalman_predict(track, dt, params)
            t = kalman_update(t, mbe, params)
            if quiet >= params.revert_frames:
                frozen = _new_track(track.label, mbe, params)
                out.append(replace(frozen, kind="static", age=track.age + 1, disp_history=hist))
            else:
                out.append(
                    replace(
                        t,
                        kind="dynamic",
                        age=track.age + 1,
                        misses=0,
                        quiet_frames=quiet,
                        dynamic_age=track.dynamic_age + 1,
                        disp_history=hist,
                    )
                )

    for j in unmatched_curr:
        out.append(_new_track(next_label, curr[j], params))
        next_label += 1

    for i, track in enumerate(prev):
        if i in matched_prev:
            continue
        misses = track.misses + 1
        if misses > params.miss_limit:
            continue
        if track.kind == "dynamic":
            t = kalman_predict(track, dt, params)
            out.append(replace(t, misses=misses, age=track.age + 1))
        else:
            out.append(replace(track, misses=misses, age=track.age + 1))

    return out


def perceive(
    scan: LidarScan,
    previous_tracks: list[EllipseTrack],
    params: PerceptionParams,
    dt: float,
) -> list[EllipseTrack]:
    """One full perception frame: cluster, fit ellipses, associate against
    the previous tracks, classify, and filter.  With no history every
    ellipse starts as a static track."""
    clusters = dbscan_cluster(scan, params.d_p, params.n_min)
    mbes = [min_bounding_ellipse(c, params.b_min) for c in clusters]
    if not previous_tracks:
        return [_new_track(label, mbe, params) for label, mbe in enumerate(mbes)]
    affinity = build_affinity(previous_tracks, mbes, params.d_max)
    matches, unmatched = associate(affinity, params.d_max)
    return classify(matches, previous_tracks, mbes, params.d_min, params, dt, unmatched)
