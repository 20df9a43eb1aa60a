"""Per-obstacle barrier construction: radial extent of a bounding
ellipse, barrier value and analytic gradient, the motion-rate term for
dynamic obstacles, and buffer-zone activation weights.

All functions are stateless; one BarrierEval per (track, robot pose).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .perception import EllipseTrack, Mbe
from .world import wrap_angle


@dataclass(frozen=True)
class BarrierParams:
    """Geometry margins and activation band widths.

    R_safe: standoff kept beyond the ellipse surface.  r: robot disc
    radius charged against the barrier.  c_k shifts the nominal barrier;
    d_k is the width of the outer blending band.  gamma is the linear
    class-K gain.  b_min mirrors the perception floor on semi-axes.
    """

    R_safe: float = 0.3
    r: float = 0.15
    c_k: float = 0.1
    d_k: float = 0.2
    gamma: float = 1.0
    b_min: float = 0.05
    ramp: str = "linear"  # or "smoothstep"

    def __post_init__(self):
        if min(self.R_safe, self.r, self.d_k, self.gamma, self.b_min) <= 0 or self.c_k < 0:
            raise ValueError("barrier parameters out of range")
        if self.ramp not in ("linear", "smoothstep"):
            raise ValueError(f"unknown ramp {self.ramp!r}")


@dataclass(frozen=True)
class BarrierEval:
    """One obstacle's barrier numbers at one robot pose."""

    track_label: int
    h: float
    h_shifted: float
    grad_robot: np.ndarray  # (2,) dh/dz at the robot output point
    epsilon: float
    in_buffer: bool
    rho: float


def radial_extent(mbe: Mbe, bearing: float) -> float:
    """Distance from the ellipse center to its boundary along a bearing
    measured from the major axis."""
    if not mbe.a >= mbe.b > 0:
        raise ValueError("ellipse axes must satisfy a >= b > 0")
    c, s = math.cos(bearing), math.sin(bearing)
    return mbe.a * mbe.b / math.sqrt(mbe.b**2 * c * c + mbe.a**2 * s * s)


def bearing_angle(mbe: Mbe, robot_pos) -> float:
    """Angle in (-pi, pi] between the center-to-robot line and the
    ellipse major axis.  Errors on a coincident center."""
    dx = float(robot_pos[0]) - mbe.center[0]
    dy = float(robot_pos[1]) - mbe.center[1]
    if dx * dx + dy * dy < 1e-24:
        raise ValueError("robot position coincides with the ellipse center")
    c, s = math.cos(mbe.angle), math.sin(mbe.angle)
    xi = dx * c + dy * s
    eta = -dx * s + dy * c
    return wrap_angle(math.atan2(eta, xi))


def barrier_value(mbe: Mbe, robot_pos, params: BarrierParams) -> float:
    """h = center distance - radial extent - R_safe - r."""
    d = math.hypot(float(robot_pos[0]) - mbe.center[0], float(robot_pos[1]) - mbe.center[1])
    l = radial_extent(mbe, bearing_angle(mbe, robot_pos))
    return d - l - params.R_safe - params.r


def barrier_gradient(
    mbe: Mbe, robot_pos, params: BarrierParams, obstacle_velocity=None
) -> tuple[np.ndarray, float]:
    """Analytic dh/dz at the robot point, plus the motion-rate term
    epsilon = (dh/dc) . c_dot for a moving obstacle (0 when the velocity
    is absent or zero; shape rates are modeled as zero-drift)."""
    pos = np.array([float(robot_pos[0]), float(robot_pos[1])])
    d = pos - mbe.center
    dist = float(np.hypot(d[0], d[1]))
    if dist < 1e-12:
        raise ValueError("robot position coincides with the ellipse center")
    a, b = mbe.a, mbe.b
    c, s = math.cos(mbe.angle), math.sin(mbe.angle)
    e1 = np.array([c, s])
    e2 = np.array([-s, c])
    xi = float(d @ e1)
    eta = float(d @ e2)
    theta = math.atan2(eta, xi)
    ct, st = math.cos(theta), math.sin(theta)
    denom = b * b * ct * ct + a * a * st * st
    dl_dtheta = -a * b * (a * a - b * b) * st * ct * denom ** (-1.5)
    dtheta_dz = (xi * e2 - eta * e1) / (dist * dist)
    grad = d / dist - dl_dtheta * dtheta_dz
    eps = 0.0
    if obstacle_velocity is not None:
        vel = np.asarray(obstacle_velocity, dtype=float)
        # dh/dc = -dh/dz for a rigid translation of the ellipse
        eps = float(-grad @ vel)
    return grad, eps


def shift_and_activate(h: float, params: BarrierParams) -> tuple[float, bool, float]:
    """Shifted barrier, buffer membership, and the activation weight rho
    (1 above the band, ramped inside [0, d_k], 0 below zero)."""
    h_hat = h - params.c_k
    in_buffer = -params.c_k <= h_hat <= params.d_k
    if h_hat > params.d_k:
        rho = 1.0
    elif h_hat < 0.0:
        rho = 0.0
    else:
        t = h_hat / params.d_k
        rho = t * t * (3.0 - 2.0 * t) if params.ramp == "smoothstep" else t
    return h_hat, in_buffer, rho


def evaluate_track(track: EllipseTrack, robot_pos, params: BarrierParams) -> BarrierEval:
    """Assemble the full BarrierEval for one track at one robot point.
    Static tracks export epsilon = 0 regardless of filter state."""
    mbe = track.mbe()
    h = barrier_value(mbe, robot_pos, params)
    vel = track.trusted_velocity() if track.kind == "dynamic" else None
    grad, eps = barrier_gradient(mbe, robot_pos, params, vel)
    h_hat, in_buffer, rho = shift_and_activate(h, params)
    return BarrierEval(
        track_label=track.label,
        h=h,
        h_shifted=h_hat,
        grad_robot=grad,
        epsilon=eps,
        in_buffer=in_buffer,
        rho=rho,
    )
