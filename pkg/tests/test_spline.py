"""Cumulative cubic B-spline trajectory checks.

Oracle strategy: the cumulative basis is checked against partial sums of the
standard uniform cubic B-spline basis evaluated with scipy's BSpline (De Boor
recursion); velocities and accelerations are checked against central finite
differences of the pose; smoothness and the constant-increment special case
are checked analytically.
"""

import math

import numpy as np
import pytest
from scipy.interpolate import BSpline

from evtrack.errors import OutOfRange, OutOfSpan
from evtrack import geometry as geo
from evtrack import spline as sp


RNG = np.random.default_rng(777)


def random_pose(rot=0.6, trans=0.5):
    w = RNG.normal(size=3)
    w = w / np.linalg.norm(w) * RNG.uniform(0.05, rot)
    return geo.Pose(geo.so3_exp(w), RNG.normal(scale=trans, size=3))


def random_spline(n_controls=8, dt=0.1, t0=0.0, rot=0.4, trans=0.3):
    poses = [random_pose(rot, trans)]
    for _ in range(n_controls - 1):
        inc = np.concatenate([
            RNG.normal(scale=trans, size=3),
            RNG.normal(size=3) / 3 * RNG.uniform(0.05, rot),
        ])
        poses.append(poses[-1].compose(geo.exp_se3(inc)))
    return sp.SplineTrajectory(poses, dt, t0)


class TestCumulativeBasis:
    def test_matches_de_boor_partial_sums(self):
        """Cumulative basis entry k at u equals sum_{j>=k} of the standard
        uniform cubic basis functions active on the segment."""
        # standard cubic B-spline basis on uniform knots, evaluated via scipy
        knots = np.arange(-3, 6, dtype=float)
        for u in np.linspace(0.0, 1.0 - 1e-12, 17):
            # the four standard basis values active at parameter u in [0,1)
            vals = []
            for j in range(4):
                c = np.zeros(5)
                c[j] = 1.0
                b = BSpline(knots, c, 3, extrapolate=False)
                vals.append(b(u))
            vals = np.array(vals)  # ascending index = oldest control first
            cumulative = np.array([vals[k:].sum() for k in range(4)])
            np.testing.assert_allclose(sp.cumulative_basis(u), cumulative, atol=1e-12)

    def test_derivatives_match_finite_differences(self):
        h = 1e-6
        for u in np.linspace(0.01, 0.99, 13):
            d1 = (sp.cumulative_basis(u + h) - sp.cumulative_basis(u - h)) / (2 * h)
            np.testing.assert_allclose(sp.cumulative_basis_d1(u), d1, atol=1e-8)
            d2 = (sp.cumulative_basis_d1(u + h) - sp.cumulative_basis_d1(u - h)) / (2 * h)
            np.testing.assert_allclose(sp.cumulative_basis_d2(u), d2, atol=1e-8)

    def test_boundary_values(self):
        np.testing.assert_allclose(
            sp.cumulative_basis(0.0), [1.0, 5.0 / 6.0, 1.0 / 6.0, 0.0], atol=1e-15
        )
        np.testing.assert_allclose(
            sp.cumulative_basis(1.0 - 1e-13), [1.0, 1.0, 5.0 / 6.0, 1.0 / 6.0], atol=1e-9
        )

    def test_rejects_out_of_range(self):
        with pytest.raises(OutOfRange):
            sp.cumulative_basis(1.0)
        with pytest.raises(OutOfRange):
            sp.cumulative_basis(-0.01)


class TestSplineEvaluation:
    def test_interpolation_weights_at_knots(self):
        """At a knot time the pose depends only on the three nearest controls
        with cumulative weights (1, 5/6, 1/6); check against a direct product."""
        s = random_spline()
        t = s.knot_time(2)
        state = s.evaluate(t)
        T0 = s.control_poses[1]
        o1 = geo.log_se3(s.control_poses[1].inverse().compose(s.control_poses[2]))
        o2 = geo.log_se3(s.control_poses[2].inverse().compose(s.control_poses[3]))
        expected = T0.compose(geo.exp_se3(o1 * (5.0 / 6.0))).compose(geo.exp_se3(o2 / 6.0))
        np.testing.assert_allclose(state.pose.matrix(), expected.matrix(), atol=1e-12)

    def test_velocity_matches_finite_differences(self):
        s = random_spline()
        h = 1e-6
        for t in np.linspace(s.t_min + 0.01, s.t_max - 0.01, 9):
            state = s.evaluate(t)
            Tp = s.evaluate(t + h).pose.matrix()
            Tm = s.evaluate(t - h).pose.matrix()
            dT = (Tp - Tm) / (2 * h)
            V = dT @ np.linalg.inv(state.pose.matrix())
            fd = geo.se3_vee(V)
            err = np.linalg.norm(state.velocity - fd) / max(np.linalg.norm(fd), 1e-9)
            assert err < 1e-4

    def test_acceleration_matches_finite_differences(self):
        s = random_spline()
        h = 1e-5
        for t in np.linspace(s.t_min + 0.01, s.t_max - 0.01, 9):
            state = s.evaluate(t)
            vp = s.evaluate(t + h).velocity
            vm = s.evaluate(t - h).velocity
            fd = (vp - vm) / (2 * h)
            err = np.linalg.norm(state.acceleration - fd) / max(np.linalg.norm(fd), 1e-6)
            assert err < 1e-4

    def test_constant_increment_gives_constant_velocity(self):
        """Controls along a one-parameter subgroup yield a constant twist."""
        xi = np.array([0.2, -0.1, 0.05, 0.3, -0.2, 0.1])
        base = random_pose()
        dt = 0.1
        poses = [base]
        for _ in range(7):
            poses.append(poses[-1].compose(geo.exp_se3(xi)))
        s = sp.SplineTrajectory(poses, dt, 0.0)
        velocities = [s.evaluate(t).velocity for t in np.linspace(s.t_min, s.t_max - 1e-9, 11)]
        for v in velocities[1:]:
            np.testing.assert_allclose(v, velocities[0], atol=1e-6)
        for t in np.linspace(s.t_min, s.t_max - 1e-9, 11):
            np.testing.assert_allclose(s.evaluate(t).acceleration, 0.0, atol=1e-6)

    def test_c2_continuity_across_segments(self):
        """Pose, velocity and acceleration agree across a knot boundary."""
        s = random_spline(n_controls=8)
        t_knot = s.knot_time(3)
        eps = 1e-9
        lo = s.evaluate(t_knot - eps)
        hi = s.evaluate(t_knot + eps)
        np.testing.assert_allclose(lo.pose.matrix(), hi.pose.matrix(), atol=1e-6)
        np.testing.assert_allclose(lo.velocity, hi.velocity, atol=1e-5)
        np.testing.assert_allclose(lo.acceleration, hi.acceleration, atol=1e-3)

    def test_out_of_span(self):
        s = random_spline()
        with pytest.raises(OutOfSpan):
            s.evaluate(s.t_min - 0.01)
        with pytest.raises(OutOfSpan):
            s.evaluate(s.t_max + 0.01)
        # the exact endpoints are valid
        s.evaluate(s.t_min)
        s.evaluate(s.t_max)

    def test_active_control_indices(self):
        s = random_spline(n_controls=8, dt=0.1, t0=0.0)
        assert s.active_control_indices(0.15) == [0, 1, 2, 3]
        assert s.active_control_indices(0.55) == [4, 5, 6, 7]

    def test_push_control_pose_is_persistent(self):
        s = random_spline()
        n = s.num_knots
        s2 = s.push_control_pose(random_pose())
        assert s.num_knots == n and s2.num_knots == n + 1
        assert s2.t_max == pytest.approx(s.t_max + s.knot_interval)

    def test_extrapolated_control_continues_velocity(self):
        xi = np.array([0.1, 0.0, -0.05, 0.02, 0.1, 0.0])
        poses = [random_pose()]
        for _ in range(3):
            poses.append(poses[-1].compose(geo.exp_se3(xi)))
        s = sp.SplineTrajectory(poses, 0.1, 0.0)
        nxt = s.extrapolated_control()
        expected = poses[-1].compose(geo.exp_se3(xi))
        np.testing.assert_allclose(nxt.matrix(), expected.matrix(), atol=1e-9)

    def test_requires_four_controls(self):
        with pytest.raises(ValueError):
            sp.SplineTrajectory([geo.Pose.identity()] * 3, 0.1, 0.0)


class TestSplineJacobians:
    def test_jacobians_match_one_sided_probe(self):
        """Columns of the control-pose Jacobians reproduce the effect of a
        small left-multiplied increment on one control."""
        s = random_spline(n_controls=6)
        t = s.knot_time(2) + 0.37 * s.knot_interval
        j_pose, j_vel, j_acc = s.active_segment_jacobians(t)
        idxs = s.active_control_indices(t)
        nominal = s.evaluate(t)
        step = 1e-6
        for k, ci in enumerate(idxs):
            for m in range(6):
                delta = np.zeros(6)
                delta[m] = step
                poses = list(s.control_poses)
                poses[ci] = geo.exp_se3(delta).compose(poses[ci])
                pert = sp.SplineTrajectory(poses, s.knot_interval, s.t0).evaluate(t)
                dp = geo.log_se3(pert.pose.compose(nominal.pose.inverse())) / step
                np.testing.assert_allclose(j_pose[k][:, m], dp, atol=1e-4)
                dv = (pert.velocity - nominal.velocity) / step
                np.testing.assert_allclose(j_vel[k][:, m], dv, atol=2e-3)
