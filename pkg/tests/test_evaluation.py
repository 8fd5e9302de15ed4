"""Trajectory metric checks.

Oracle strategy: zero cases and rigid-transform invariances follow from the
metric definitions; the single-displaced-pose ATE and the constant-drift RPE
have closed forms computed by hand in the tests.
"""

import math

import numpy as np
import pytest

from evtrack import evaluation as ev
from evtrack.errors import DegenerateAlignment, NoMatches, PathTooShort
from evtrack.geometry import Pose, so3_exp


def helix_trajectory(n=100, dt=0.1):
    """Generic non-degenerate path: positions on a helix, rotating orientation."""
    times = np.arange(n) * dt
    poses = []
    for i, t in enumerate(times):
        R = so3_exp(np.array([0.0, 0.02 * i, 0.01 * i]))
        p = np.array([math.cos(0.1 * i), math.sin(0.1 * i), 0.05 * i])
        poses.append(Pose(R, p))
    return ev.Trajectory(times, poses)


def random_pose(rng):
    return Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))


class TestAssociate:
    def test_identical_timestamps_identity_pairing(self):
        traj = helix_trajectory(20)
        pairs = ev.associate(traj, traj, max_dt=0.005)
        assert pairs == [(i, i) for i in range(20)]

    def test_half_tolerance_offset_pairs_fully(self):
        gt = helix_trajectory(20)
        est = ev.Trajectory(gt.times + 0.0025, gt.poses)
        pairs = ev.associate(est, gt, max_dt=0.005)
        assert len(pairs) == 20

    def test_double_tolerance_offset_raises(self):
        gt = helix_trajectory(20, dt=1.0)
        est = ev.Trajectory(gt.times + 0.01, gt.poses)
        with pytest.raises(NoMatches):
            ev.associate(est, gt, max_dt=0.005)

    def test_rejects_nonpositive_tolerance(self):
        traj = helix_trajectory(5)
        with pytest.raises(ValueError):
            ev.associate(traj, traj, max_dt=0.0)

    def test_gt_pose_used_at_most_once(self):
        gt = ev.Trajectory([0.0, 1.0], [Pose.identity(), Pose.identity()])
        est = ev.Trajectory([0.001, 0.002, 1.0], [Pose.identity()] * 3)
        pairs = ev.associate(est, gt, max_dt=0.005)
        assert len(pairs) == 2
        assert len({j for _, j in pairs}) == 2


class TestAte:
    def test_est_equals_gt_is_zero(self):
        traj = helix_trajectory()
        assert ev.ate_rmse(traj, traj) == pytest.approx(0.0, abs=1e-12)

    def test_invariant_under_global_rigid_transform(self):
        gt = helix_trajectory()
        rng = np.random.default_rng(1)
        for _ in range(5):
            est = gt.transformed(random_pose(rng))
            assert ev.ate_rmse(est, gt) == pytest.approx(0.0, abs=1e-9)

    def test_single_displaced_pose_closed_form(self):
        # one of 100 poses displaced by 0.1 m: alignment shifts everything by
        # the mean displacement d/n; RMSE = d * sqrt((1 - 1/n)) / sqrt(n) only
        # if rotation stayed fixed -- verify against a direct evaluation with
        # the alignment recomputed, which the hand formula approximates to
        # first order; the spec-level check is RMSE ~= 0.01 within 1e-6 on a
        # path where the alignment barely rotates.
        n = 100
        times = np.arange(n) * 0.1
        rng = np.random.default_rng(0)
        # isotropic cloud so a 0.1 m displacement cannot be absorbed by rotation
        poses = [Pose(np.eye(3), rng.normal(scale=5.0, size=3)) for _ in range(n)]
        gt = ev.Trajectory(times, poses)
        est_poses = list(poses)
        est_poses[50] = Pose(np.eye(3), poses[50].translation + np.array([0.1, 0.0, 0.0]))
        est = ev.Trajectory(times, est_poses)
        d = 0.1
        expected = d * math.sqrt(1.0 - 1.0 / n) / math.sqrt(n)
        assert ev.ate_rmse(est, gt) == pytest.approx(expected, abs=1e-4)

    def test_collinear_positions_raise(self):
        times = np.arange(10) * 0.1
        poses = [Pose(np.eye(3), np.array([0.1 * i, 0.0, 0.0])) for i in range(10)]
        gt = ev.Trajectory(times, poses)
        est = ev.Trajectory(times, [Pose(p.rotation, p.translation + 1e-3) for p in poses])
        with pytest.raises(DegenerateAlignment):
            ev.ate_rmse(est, gt)

    def test_needs_three_pairs(self):
        traj = helix_trajectory(2)
        with pytest.raises(NoMatches):
            ev.ate_rmse(traj, traj)


class TestRpe:
    def test_est_equals_gt_is_zero(self):
        traj = helix_trajectory()
        transl, rot, per = ev.rpe(traj, traj)
        assert transl == pytest.approx(0.0, abs=1e-12)
        assert rot == pytest.approx(0.0, abs=1e-6)  # acos noise on exact identities
        assert len(per) == 5

    def test_invariant_under_global_offset_of_estimate(self):
        gt = helix_trajectory()
        rng = np.random.default_rng(3)
        est = gt.transformed(random_pose(rng))
        transl, rot, _ = ev.rpe(est, gt)
        assert transl == pytest.approx(0.0, abs=1e-9)
        assert rot == pytest.approx(0.0, abs=1e-9)

    def test_invariant_under_joint_rigid_transform(self):
        gt = helix_trajectory()
        rng = np.random.default_rng(4)
        T = random_pose(rng)
        a = ev.rpe(gt.transformed(T), gt.transformed(T))
        assert a[0] == pytest.approx(0.0, abs=1e-9)

    def test_constant_drift_closed_form(self):
        """Estimate drifts by eps meters per meter traveled along x: the
        relative translation error over an arc of length L is exactly eps*L.
        With 101 uniform steps the fraction targets f*total fall strictly
        between samples, so the realized separation is the next sample at
        ceil(f*101) steps for every start index and the per-fraction RMSE
        has the closed form eps*step*ceil(f*101)."""
        n = 102  # 101 steps: f*101 is never an integer for f in 0.1..0.5
        step = 0.05
        times = np.arange(n) * 0.1
        eps = 0.002
        gt_poses = []
        est_poses = []
        for i in range(n):
            x = i * step
            gt_poses.append(Pose(np.eye(3), np.array([x, 0.0, 0.0])))
            est_poses.append(Pose(np.eye(3), np.array([x * (1 + eps), 0.0, 0.0])))
        gt = ev.Trajectory(times, gt_poses)
        est = ev.Trajectory(times, est_poses)
        transl, rot, per = ev.rpe(est, gt)
        expected = []
        for f, te, re in per:
            arc = step * math.ceil(f * (n - 1))
            expected.append(eps * arc)
            assert te == pytest.approx(eps * arc, abs=1e-9)
            assert re == pytest.approx(0.0, abs=1e-9)
        assert transl == pytest.approx(np.mean(expected), abs=1e-9)

    def test_rotation_error_is_geodesic_angle(self):
        n = 50
        times = np.arange(n) * 0.1
        gt_poses = [Pose(np.eye(3), np.array([0.1 * i, 0.01 * i * i, 0.0])) for i in range(n)]
        ang = 0.02  # rad of rotation error accumulated per sample
        est_poses = [
            Pose(so3_exp(np.array([0.0, 0.0, ang * i])), p.translation)
            for i, p in enumerate(gt_poses)
        ]
        _, rot, per = ev.rpe(
            ev.Trajectory(times, est_poses), ev.Trajectory(times, gt_poses)
        )
        assert rot > 0
        # relative rotation over k samples is exactly k*ang
        for f, _, re in per:
            assert re > 0

    def test_zero_length_path_raises(self):
        times = np.arange(5) * 0.1
        poses = [Pose.identity() for _ in range(5)]
        traj = ev.Trajectory(times, poses)
        with pytest.raises(PathTooShort):
            ev.rpe(traj, traj)


class TestTrajectoryType:
    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            ev.Trajectory(np.array([]), [])

    def test_rejects_nonincreasing_times(self):
        with pytest.raises(ValueError):
            ev.Trajectory(np.array([0.0, 0.0]), [Pose.identity(), Pose.identity()])

    def test_pose_interp_midpoint(self):
        a = Pose(np.eye(3), np.array([0.0, 0.0, 0.0]))
        b = Pose(np.eye(3), np.array([1.0, 0.0, 0.0]))
        traj = ev.Trajectory(np.array([0.0, 1.0]), [a, b])
        np.testing.assert_allclose(
            traj.pose_interp(0.5).translation, [0.5, 0.0, 0.0], atol=1e-12
        )


class TestOverlay:
    def test_contour_on_mask_boundary(self, tmp_path):
        from evtrack.geometry import CameraIntrinsics
        from evtrack.sdf import BoxSdf
        from evtrack import event_tracker as et

        K = CameraIntrinsics(fx=120.0, fy=120.0, cx=32.0, cy=32.0, width=64, height=64)
        shape = BoxSdf(np.array([0.1, 0.1, 0.1]))
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 1.0]))
        traj = ev.Trajectory(np.array([0.0]), [pose])
        frames = [(0.0, np.full((64, 64), 0.5))]
        path = ev.render_overlay(frames, traj, shape, K, tmp_path, samples=1)
        data = open(path, "rb").read()
        assert data.startswith(b"P6")
        # recover colored pixels and compare against the raycast hit mask edge
        header_end = data.index(b"255\n") + 4
        rgb = np.frombuffer(data[header_end:], dtype=np.uint8).reshape(64, 64, 3)
        colored = (rgb[:, :, 0] != rgb[:, :, 1]) | (rgb[:, :, 1] != rgb[:, :, 2])
        assert colored.any()
        mask = et.hit_mask(shape, pose, K)
        boundary = ev._mask_boundary(mask)
        grown = ev._mask_boundary(mask)
        for _ in range(1):
            grown = grown | np.roll(boundary, 1, 0) | np.roll(boundary, -1, 0) \
                | np.roll(boundary, 1, 1) | np.roll(boundary, -1, 1)
        assert np.all(grown[colored])  # every contour pixel within 1 px of boundary

    def test_empty_trajectory_rejected(self, tmp_path):
        from evtrack.geometry import CameraIntrinsics
        from evtrack.sdf import BoxSdf

        K = CameraIntrinsics(fx=120.0, fy=120.0, cx=32.0, cy=32.0, width=64, height=64)
        with pytest.raises(ValueError):
            ev.render_overlay([], helix_trajectory(3), BoxSdf(np.array([0.1] * 3)), K, tmp_path)
