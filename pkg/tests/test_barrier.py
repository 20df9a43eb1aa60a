import dataclasses
import math

import numpy as np
import pytest

from zonecbf.barrier import (
    BarrierParams,
    barrier_gradient,
    barrier_value,
    bearing_angle,
    evaluate_track,
    radial_extent,
    shift_and_activate,
)
from zonecbf.perception import Mbe, PerceptionParams, _new_track


def mbe(cx=0.0, cy=0.0, a=2.0, b=1.0, angle=0.0):
    return Mbe(center=np.array([cx, cy]), a=a, b=b, angle=angle)


def ray_extent_oracle(m: Mbe, bearing: float) -> float:
    """Bisection along the bearing ray for the boundary crossing."""
    c, s = math.cos(m.angle), math.sin(m.angle)
    world = np.array([c * math.cos(bearing) - s * math.sin(bearing),
                      s * math.cos(bearing) + c * math.sin(bearing)])

    def implicit(t):
        p = m.center + t * world
        d = p - m.center
        u = d[0] * c + d[1] * s
        w = -d[0] * s + d[1] * c
        return (u / m.a) ** 2 + (w / m.b) ** 2 - 1.0

    lo, hi = 0.0, 2.0 * m.a + 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if implicit(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestRadialExtent:
    def test_circle(self):
        m = mbe(a=0.7, b=0.7)
        for th in np.linspace(-3, 3, 11):
            assert radial_extent(m, th) == pytest.approx(0.7)

    def test_principal_axes(self):
        m = mbe(a=2.0, b=1.0)
        assert radial_extent(m, 0.0) == pytest.approx(2.0)
        assert radial_extent(m, math.pi / 2) == pytest.approx(1.0)

    def test_diagonal(self):
        assert radial_extent(mbe(), math.pi / 4) == pytest.approx(2 / math.sqrt(2.5), abs=1e-12)

    def test_symmetries(self):
        m = mbe(a=1.7, b=0.4)
        for th in np.linspace(0, math.pi, 13):
            assert radial_extent(m, th) == pytest.approx(radial_extent(m, th + math.pi))
            assert radial_extent(m, th) == pytest.approx(radial_extent(m, -th))

    def test_against_ray_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            a = rng.uniform(0.1, 3.0)
            m = mbe(a=a, b=rng.uniform(0.05, a), angle=rng.uniform(-np.pi / 2, np.pi / 2))
            th = rng.uniform(-np.pi, np.pi)
            assert radial_extent(m, th) == pytest.approx(ray_extent_oracle(m, th), abs=1e-6)


class TestBearingAngle:
    def test_major_axis(self):
        m = mbe()
        th = bearing_angle(m, (3.0, 0.0))
        assert math.isclose(abs(math.sin(th)), 0.0, abs_tol=1e-12)

    def test_minor_axis(self):
        assert abs(bearing_angle(mbe(), (0.0, 3.0))) == pytest.approx(math.pi / 2)

    def test_frame_rotation_oracle(self):
        m = mbe(a=2.0, b=1.0, angle=math.pi / 6)
        robot = 3.0 * np.array([math.cos(math.pi / 3), math.sin(math.pi / 3)])
        th = bearing_angle(m, robot)
        # rotate so the ellipse is axis-aligned; the bearing is direct there
        rel = math.pi / 3 - math.pi / 6
        assert math.isclose(abs(math.cos(th)), abs(math.cos(rel)), abs_tol=1e-12)
        assert radial_extent(m, th) == pytest.approx(radial_extent(mbe(angle=0.0), rel))

    def test_range_and_error(self):
        m = mbe()
        assert -math.pi < bearing_angle(m, (0.3, -2.0)) <= math.pi
        with pytest.raises(ValueError):
            bearing_angle(m, (0.0, 0.0))


class TestBarrierValue:
    def test_axis_aligned_substitution(self):
        p = BarrierParams(R_safe=0.3, r=0.2)
        assert barrier_value(mbe(), (3.0, 0.0), p) == pytest.approx(0.5)

    def test_zero_on_inflated_boundary(self):
        p = BarrierParams(R_safe=0.3, r=0.2)
        th = 0.77
        m = mbe(a=1.4, b=0.6, angle=0.3)
        l = radial_extent(m, bearing_angle(m, m.center + 10 * np.array([math.cos(th), math.sin(th)])))
        robot = m.center + (l + 0.5) * np.array([math.cos(th), math.sin(th)])
        assert barrier_value(m, robot, p) == pytest.approx(0.0, abs=1e-9)

    def test_sign_matches_ray_oracle(self):
        rng = np.random.default_rng(1)
        p = BarrierParams(R_safe=0.25, r=0.15)
        for _ in range(300):
            a = rng.uniform(0.2, 2.0)
            m = mbe(cx=rng.uniform(-1, 1), cy=rng.uniform(-1, 1), a=a,
                    b=rng.uniform(0.05, a), angle=rng.uniform(-np.pi / 2, np.pi / 2))
            th = rng.uniform(-np.pi, np.pi)
            dist = rng.uniform(0.05, 4.0)
            robot = m.center + dist * np.array([math.cos(th), math.sin(th)])
            h = barrier_value(m, robot, p)
            oracle = dist - ray_extent_oracle(m, bearing_angle(m, robot)) - 0.25 - 0.15
            assert h == pytest.approx(oracle, abs=1e-6)

    def test_continuity_along_path(self):
        p = BarrierParams()
        m = mbe(a=1.5, b=0.4, angle=0.5)
        start, end = np.array([-3.0, -2.0]), np.array([3.0, 2.4])
        steps = np.linspace(0, 1, 4001)
        prev_h = None
        seg = float(np.hypot(*(end - start))) / (len(steps) - 1)
        for t in steps:
            pos = start + t * (end - start)
            if float(np.hypot(*(pos - m.center))) < 0.05:
                prev_h = None
                continue
            h = barrier_value(m, pos, p)
            g, _ = barrier_gradient(m, pos, p)
            if prev_h is not None:
                assert abs(h - prev_h) <= seg * (1.0 + float(np.linalg.norm(g))) + 1e-9
            prev_h = h


class TestBarrierGradient:
    def test_circle_gradient_is_unit_radial(self):
        p = BarrierParams()
        m = mbe(a=1.0, b=1.0, angle=0.4)
        g, eps = barrier_gradient(m, (2.0, 1.5), p)
        u = np.array([2.0, 1.5]) / math.hypot(2.0, 1.5)
        assert np.allclose(g, u, atol=1e-12)
        assert eps == 0.0

    def test_static_epsilon_zero(self):
        p = PerceptionParams()
        tr = _new_track(0, mbe(a=0.5, b=0.3), p)
        ev = evaluate_track(tr, (2.0, 0.5), BarrierParams())
        assert ev.epsilon == 0.0

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        p = BarrierParams()
        step = 1e-5
        for _ in range(1000):
            a = rng.uniform(0.15, 2.5)
            m = mbe(cx=rng.uniform(-2, 2), cy=rng.uniform(-2, 2), a=a,
                    b=rng.uniform(0.05, a), angle=rng.uniform(-np.pi / 2, np.pi / 2))
            th = rng.uniform(-np.pi, np.pi)
            robot = m.center + rng.uniform(0.4, 5.0) * np.array([math.cos(th), math.sin(th)])
            g, _ = barrier_gradient(m, robot, p)
            fd = np.zeros(2)
            for i in range(2):
                dp, dm = np.array(robot, dtype=float), np.array(robot, dtype=float)
                dp[i] += step
                dm[i] -= step
                fd[i] = (barrier_value(m, dp, p) - barrier_value(m, dm, p)) / (2 * step)
            rel = np.linalg.norm(g - fd) / max(1e-9, np.linalg.norm(fd))
            assert rel <= 1e-4

    def test_epsilon_sign(self):
        p = BarrierParams()
        m = mbe(a=0.6, b=0.6)
        # obstacle moving toward the robot shrinks h: epsilon negative
        _, eps = barrier_gradient(m, (2.0, 0.0), p, obstacle_velocity=(1.0, 0.0))
        assert eps < 0
        _, eps = barrier_gradient(m, (2.0, 0.0), p, obstacle_velocity=(-1.0, 0.0))
        assert eps > 0


class TestActivation:
    def test_above_band(self):
        p = BarrierParams(c_k=0.1, d_k=0.2)
        h_hat, in_buffer, rho = shift_and_activate(0.5, p)
        assert h_hat == pytest.approx(0.4)
        assert not in_buffer
        assert rho == 1.0

    def test_below_zero(self):
        p = BarrierParams(c_k=0.1, d_k=0.2)
        h_hat, in_buffer, rho = shift_and_activate(0.05, p)
        assert h_hat == pytest.approx(-0.05)
        assert in_buffer
        assert rho == 0.0

    def test_linear_midpoint(self):
        p = BarrierParams(c_k=0.1, d_k=0.2)
        _, in_buffer, rho = shift_and_activate(0.2, p)
        assert in_buffer
        assert rho == pytest.approx(0.5)

    def test_breakpoints_exact(self):
        p = BarrierParams(c_k=0.1, d_k=0.2)
        assert shift_and_activate(p.c_k, p)[2] == 0.0
        assert shift_and_activate(p.c_k + p.d_k, p)[2] == 1.0

    def test_monotone(self):
        p = BarrierParams(c_k=0.1, d_k=0.2)
        rhos = [shift_and_activate(h, p)[2] for h in np.linspace(-0.3, 0.6, 200)]
        assert all(b >= a - 1e-12 for a, b in zip(rhos, rhos[1:]))

    def test_shifted_implies_plain_safety(self):
        p = BarrierParams(c_k=0.1, d_k=0.2)
        for h in np.linspace(-0.2, 0.8, 50):
            h_hat, _, _ = shift_and_activate(h, p)
            if h_hat >= 0:
                assert h >= p.c_k >= 0

    def test_smoothstep_option(self):
        p = BarrierParams(c_k=0.1, d_k=0.2, ramp="smoothstep")
        assert shift_and_activate(0.2, p)[2] == pytest.approx(0.5)
        assert shift_and_activate(0.1, p)[2] == 0.0
        assert shift_and_activate(0.3, p)[2] == 1.0
