"""Ground-truth world model: robot kinematics, obstacle motion, simulated
2D lidar by ray casting, and the collision oracle.

Everything here is exact with respect to the configured geometry; the
perception stack never sees these shapes directly, only lidar returns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    return math.pi - (math.pi - theta) % TWO_PI


def wrap_half_angle(theta: float) -> float:
    """Wrap an ellipse orientation to (-pi/2, pi/2] (symmetry mod pi)."""
    return math.pi / 2 - (math.pi / 2 - theta) % math.pi


@dataclass(frozen=True)
class RobotState:
    """Planar pose of the unicycle robot. heading is kept in (-pi, pi]."""

    x: float
    y: float
    heading: float
    time: float = 0.0

    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class ControlInput:
    """Bounded (v, omega) command."""

    linear_velocity: float
    angular_velocity: float

    @property
    def v(self) -> float:
        return self.linear_velocity

    @property
    def omega(self) -> float:
        return self.angular_velocity

    def as_array(self) -> np.ndarray:
        return np.array([self.linear_velocity, self.angular_velocity])

    def clipped(self, v_max: float, omega_max: float) -> "ControlInput":
        return ControlInput(
            float(np.clip(self.linear_velocity, -v_max, v_max)),
            float(np.clip(self.angular_velocity, -omega_max, omega_max)),
        )


@dataclass(frozen=True)
class ObstacleSpec:
    """One ground-truth obstacle: a shape plus a motion model.

    shape: "circle" (radius), "ellipse" (a, b, angle), "rectangle"
    (width, height, angle).  motion: "static", "constant_velocity"
    (vx, vy), or "waypoint_loop" (points, speed).  The shape only
    translates; its orientation is fixed.
    """

    shape: str
    center: tuple[float, float]
    radius: float = 0.0
    a: float = 0.0
    b: float = 0.0
    angle: float = 0.0
    width: float = 0.0
    height: float = 0.0
    motion: str = "static"
    velocity: tuple[float, float] = (0.0, 0.0)
    waypoints: tuple[tuple[float, float], ...] = ()
    speed: float = 0.0

    def __post_init__(self):
        if self.shape not in ("circle", "ellipse", "rectangle"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.motion not in ("static", "constant_velocity", "waypoint_loop"):
            raise ValueError(f"unknown motion {self.motion!r}")
        dims = {
            "circle": (self.radius,),
            "ellipse": (self.a, self.b),
            "rectangle": (self.width, self.height),
        }[self.shape]
        if any(d <= 0 for d in dims):
            raise ValueError(f"{self.shape} dimensions must be strictly positive")
        if self.motion == "waypoint_loop":
            if len(self.waypoints) < 2:
                raise ValueError("waypoint_loop needs at least 2 waypoints")
            if self.speed <= 0:
                raise ValueError("waypoint_loop speed must be positive")

    def center_at(self, t: float) -> np.ndarray:
        """Obstacle center at absolute time t (closed form, no drift)."""
        c0 = np.asarray(self.center, dtype=float)
        if self.motion == "static":
            return c0
        if self.motion == "constant_velocity":
            return c0 + t * np.asarray(self.velocity, dtype=float)
        # waypoint_loop: arc-length position along the closed polyline
        pts = np.asarray(self.waypoints, dtype=float)
        legs = np.roll(pts, -1, axis=0) - pts
        lengths = np.hypot(legs[:, 0], legs[:, 1])
        perimeter = float(lengths.sum())
        s = (self.speed * t) % perimeter
        for p, leg, length in zip(pts, legs, lengths):
            if s <= length:
                return p + leg * (s / length) if length > 0 else p.copy()
            s -= length
        return pts[0].copy()

    def bounding_radius(self) -> float:
        if self.shape == "circle":
            return self.radius
        if self.shape == "ellipse":
            return max(self.a, self.b)
        return 0.5 * math.hypot(self.width, self.height)


def _rotate(vx: np.ndarray, vy: np.ndarray, angle: float):
    c, s = math.cos(angle), math.sin(angle)
    return c * vx + s * vy, -s * vx + c * vy


def implicit_value(spec: ObstacleSpec, center: np.ndarray, point) -> float:
    """Smooth implicit function: zero on the boundary, negative inside."""
    px, py = float(point[0]) - center[0], float(point[1]) - center[1]
    if spec.shape == "circle":
        return math.hypot(px, py) - spec.radius
    qx, qy = _rotate(px, py, spec.angle)
    if spec.shape == "ellipse":
        return (qx / spec.a) ** 2 + (qy / spec.b) ** 2 - 1.0
    hw, hh = 0.5 * spec.width, 0.5 * spec.height
    return max(abs(qx) - hw, abs(qy) - hh)


def _point_to_ellipse_distance(px: float, py: float, a: float, b: float) -> float:
    """Signed distance from an axis-aligned-frame point to the ellipse
    boundary (negative inside).  Bisection on the standard distance
    equation; accepts either axis ordering."""
    if a < b:
        px, py, a, b = py, px, b, a
    y0, y1 = abs(px), abs(py)
    inside = (y0 / a) ** 2 + (y1 / b) ** 2 < 1.0
    if y1 < 1e-15:
        # on the major axis the nearest boundary point may be off-axis
        if a * y0 < a * a - b * b:
            x0 = a * a * y0 / (a * a - b * b)
            x1 = b * math.sqrt(max(0.0, 1.0 - (x0 / a) ** 2))
            return -math.hypot(y0 - x0, x1)
        return y0 - a
    if y0 < 1e-15:
        return y1 - b
    # solve F(t) = (a*y0/(t+a^2))^2 + (b*y1/(t+b^2))^2 - 1 = 0, t > -b^2
    t_lo = -b * b + b * y1
    t_hi = -b * b + math.hypot(a * y0, b * y1)
    for _ in range(120):
        t = 0.5 * (t_lo + t_hi)
        f = (a * y0 / (t + a * a)) ** 2 + (b * y1 / (t + b * b)) ** 2 - 1.0
        if f > 0:
            t_lo = t
        else:
            t_hi = t
    t = 0.5 * (t_lo + t_hi)
    cx = a * a * y0 / (t + a * a)
    cy = b * b * y1 / (t + b * b)
    d = math.hypot(y0 - cx, y1 - cy)
    return -d if inside else d


def boundary_distance(spec: ObstacleSpec, center: np.ndarray, point) -> float:
    """Signed Euclidean distance from a point to the obstacle boundary
    (positive outside, negative inside)."""
    px, py = float(point[0]) - center[0], float(point[1]) - center[1]
    if spec.shape == "circle":
        return math.hypot(px, py) - spec.radius
    qx, qy = _rotate(px, py, spec.angle)
    if spec.shape == "ellipse":
        return _point_to_ellipse_distance(qx, qy, spec.a, spec.b)
    hw, hh = 0.5 * spec.width, 0.5 * spec.height
    dx, dy = abs(qx) - hw, abs(qy) - hh
    outside = math.hypot(max(dx, 0.0), max(dy, 0.0))
    return outside + min(max(dx, dy), 0.0)


def ray_distances(
    spec: ObstacleSpec, center: np.ndarray, origin: np.ndarray, dirs: np.ndarray
) -> np.ndarray:
    """Nearest positive intersection distance of each unit-direction ray
    with the obstacle boundary (inf where the ray misses).

    dirs: (n, 2) array of unit vectors; rays start at `origin`.
    """
    o = np.asarray(origin, dtype=float) - center
    out = np.full(len(dirs), np.inf)
    if spec.shape in ("circle", "ellipse"):
        if spec.shape == "circle":
            ox, oy = o
            dx, dy = dirs[:, 0], dirs[:, 1]
            ra = rb = spec.radius
            ang = 0.0
        else:
            ra, rb, ang = spec.a, spec.b, spec.angle
            ox, oy = _rotate(o[0], o[1], ang)
            dx, dy = _rotate(dirs[:, 0], dirs[:, 1], ang)
        # scale to the unit circle
        ox, oy = ox / ra, oy / rb
        dx, dy = dx / ra, dy / rb
        A = dx * dx + dy * dy
        B = 2.0 * (ox * dx + oy * dy)
        C = ox * ox + oy * oy - 1.0
        disc = B * B - 4.0 * A * C
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        s1 = (-B - sq) / (2.0 * A)
        s2 = (-B + sq) / (2.0 * A)
        s = np.where(s1 > 1e-12, s1, np.where(s2 > 1e-12, s2, np.inf))
        out = np.where(hit, s, np.inf)
        return out
    # rectangle: slab method in the box frame
    hw, hh = 0.5 * spec.width, 0.5 * spec.height
    ox, oy = _rotate(o[0], o[1], spec.angle)
    dx, dy = _rotate(dirs[:, 0], dirs[:, 1], spec.angle)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_x = np.where(dx != 0, 1.0 / dx, np.inf)
        inv_y = np.where(dy != 0, 1.0 / dy, np.inf)
        tx1 = (-hw - ox) * inv_x
        tx2 = (hw - ox) * inv_x
        ty1 = (-hh - oy) * inv_y
        ty2 = (hh - oy) * inv_y
    # degenerate direction components: the slab is either always or never met
    big = 1e30
    tx_lo = np.where(dx != 0, np.minimum(tx1, tx2), np.where(np.abs(ox) <= hw, -big, big))
    tx_hi = np.where(dx != 0, np.maximum(tx1, tx2), np.where(np.abs(ox) <= hw, big, -big))
    ty_lo = np.where(dy != 0, np.minimum(ty1, ty2), np.where(np.abs(oy) <= hh, -big, big))
    ty_hi = np.where(dy != 0, np.maximum(ty1, ty2), np.where(np.abs(oy) <= hh, big, -big))
    t_in = np.maximum(tx_lo, ty_lo)
    t_out = np.minimum(tx_hi, ty_hi)
    hit = (t_in <= t_out) & (t_out > 1e-12)
    s = np.where(t_in > 1e-12, t_in, t_out)
    return np.where(hit, s, np.inf)


@dataclass(frozen=True)
class LidarScan:
    """One sweep of range returns converted to world-frame 2D points."""

    points: np.ndarray  # (n, 2) world-frame hit points
    ray_count: int
    max_range: float
    timestamp: float

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class World:
    """Obstacle set plus the simulation clock; centers derive from time."""

    obstacles: list[ObstacleSpec] = field(default_factory=list)
    time: float = 0.0

    def centers(self) -> list[np.ndarray]:
        return [ob.center_at(self.time) for ob in self.obstacles]

    def validate_disjoint(self) -> None:
        """Reject ground-truth obstacle interiors that overlap at t=0."""
        centers = self.centers()
        n = len(self.obstacles)
        for i in range(n):
            for j in range(i + 1, n):
                gap = _pair_gap(self.obstacles[i], centers[i], self.obstacles[j], centers[j])
                if gap <= 0:
                    raise ValueError(
                        f"obstacles {i} and {j} overlap at t=0 (boundary gap {gap:.4f} m)"
                    )


def _pair_gap(a: ObstacleSpec, ca: np.ndarray, b: ObstacleSpec, cb: np.ndarray) -> float:
    """Approximate boundary gap between two obstacles (exact for circles;
    dense boundary sampling otherwise, adequate for load-time checks)."""
    if a.shape == "circle" and b.shape == "circle":
        return float(np.hypot(*(ca - cb))) - a.radius - b.radius
    pts = _boundary_points(a, ca, 128)
    return min(boundary_distance(b, cb, p) for p in pts)


def _boundary_points(spec: ObstacleSpec, center: np.ndarray, n: int) -> np.ndarray:
    ts = np.linspace(0.0, TWO_PI, n, endpoint=False)
    if spec.shape == "circle":
        local = spec.radius * np.stack([np.cos(ts), np.sin(ts)], axis=1)
        return center + local
    if spec.shape == "ellipse":
        local = np.stack([spec.a * np.cos(ts), spec.b * np.sin(ts)], axis=1)
    else:
        hw, hh = 0.5 * spec.width, 0.5 * spec.height
        k = n // 4
        xs = np.linspace(-hw, hw, k, endpoint=False)
        ys = np.linspace(-hh, hh, k, endpoint=False)
        local = np.concatenate(
            [
                np.stack([xs, np.full(k, -hh)], axis=1),
                np.stack([np.full(k, hw), ys], axis=1),
                np.stack([-xs, np.full(k, hh)], axis=1),
                np.stack([np.full(k, -hw), -ys], axis=1),
            ]
        )
    c, s = math.cos(spec.angle), math.sin(spec.angle)
    rot = np.array([[c, -s], [s, c]])
    return center + local @ rot.T


def _unicycle_rhs(state: np.ndarray, v: float, omega: float) -> np.ndarray:
    return np.array([v * math.cos(state[2]), v * math.sin(state[2]), omega])


def step_dynamics(state: RobotState, u: ControlInput, dt: float) -> RobotState:
    """Advance the unicycle one RK4 step; heading re-wrapped to (-pi, pi]."""
    vals = (state.x, state.y, state.heading, u.linear_velocity, u.angular_velocity, dt)
    if not all(math.isfinite(val) for val in vals):
        raise ValueError("non-finite state or input")
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.array([state.x, state.y, state.heading])
    v, w = u.linear_velocity, u.angular_velocity
    k1 = _unicycle_rhs(x, v, w)
    k2 = _unicycle_rhs(x + 0.5 * dt * k1, v, w)
    k3 = _unicycle_rhs(x + 0.5 * dt * k2, v, w)
    k4 = _unicycle_rhs(x + dt * k3, v, w)
    nxt = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return RobotState(float(nxt[0]), float(nxt[1]), wrap_angle(float(nxt[2])), state.time + dt)


def update_obstacles(world: World, dt: float) -> World:
    """Advance every obstacle per its motion model (statics unchanged)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return World(obstacles=world.obstacles, time=world.time + dt)


def lidar_scan(
    world: World,
    robot: RobotState,
    ray_count: int = 360,
    max_range: float = 5.0,
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
) -> LidarScan:
    """Cast `ray_count` equally spaced rays from the robot; return the
    nearest boundary hit per ray.  Rays that reach max_range produce no
    point.  Gaussian range noise (std `noise_std`) is applied along the
    ray when an rng is supplied."""
    if ray_count < 8:
        raise ValueError("ray_count must be >= 8")
    bearings = robot.heading + TWO_PI * np.arange(ray_count) / ray_count
    dirs = np.stack([np.cos(bearings), np.sin(bearings)], axis=1)
    origin = robot.position()
    dist = np.full(ray_count, np.inf)
    for spec, center in zip(world.obstacles, world.centers()):
        reach = float(np.hypot(*(origin - center))) - spec.bounding_radius()
        if reach > max_range:
            continue
        dist = np.minimum(dist, ray_distances(spec, center, origin, dirs))
    if noise_std > 0 and rng is not None:
        noisy = dist + rng.normal(0.0, noise_std, size=ray_count)
        dist = np.where(np.isfinite(dist), noisy, dist)
    mask = dist < max_range
    points = origin + dist[mask, None] * dirs[mask]
    return LidarScan(points=points, ray_count=ray_count, max_range=max_range, timestamp=robot.time)


def collision_check(world: World, robot: RobotState, r: float) -> tuple[bool, float]:
    """Whether the robot disc of radius r intersects any obstacle, plus the
    signed minimum clearance from the disc boundary to the nearest
    obstacle boundary (negative when penetrating)."""
    if r <= 0:
        raise ValueError("robot radius must be positive")
    pos = robot.position()
    clearance = math.inf
    for spec, center in zip(world.obstacles, world.centers()):
        clearance = min(clearance, boundary_distance(spec, center, pos) - r)
    return clearance < 0, clearance
