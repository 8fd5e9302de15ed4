"""Signed-distance-field, raycaster and silhouette checks.

Oracle strategy: raycast depths are verified against a brute-force fine ray
march (independent of sphere tracing and of the analytic intersections); the
analytic intersections are additionally cross-checked against sphere tracing
on a grid-sampled copy of the same shape; SDF values are checked against
closed-form distances at hand-picked points and the eikonal property
|grad| = 1 at random off-surface points.
"""

import math
import os

import numpy as np
import pytest

from evtrack.errors import GrazingHit, MissError
from evtrack import sdf
from evtrack.geometry import CameraIntrinsics, Pose, so3_exp


RNG = np.random.default_rng(424242)
K = CameraIntrinsics(fx=120.0, fy=120.0, cx=64.0, cy=48.0, width=128, height=96)


def fine_march_depth(shape, pose, K, u, t_max=6.0, steps=24000):
    """Brute-force first-crossing search along one pixel ray, followed by
    bisection; independent of the production raycaster."""
    d_cam = sdf._camera_rays(K, np.asarray(u, float)[None, :])[0]
    inv = pose.inverse()
    o = inv.translation
    d = inv.rotation @ d_cam
    ts = np.linspace(1e-4, t_max, steps)
    vals = shape.value(o[None, :] + ts[:, None] * d[None, :])
    neg = np.flatnonzero(vals <= 0)
    if len(neg) == 0:
        return None
    lo, hi = ts[neg[0] - 1], ts[neg[0]]
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if shape.value(np.array([o + mid * d]))[0] <= 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi) * d_cam[2]


def shapes_under_test():
    return [
        sdf.BoxSdf(np.array([0.15, 0.1, 0.2])),
        sdf.CylinderSdf(radius=0.08, height=0.3),
        sdf.UnionSdf([
            sdf.BoxSdf(np.array([0.1, 0.1, 0.1]), center=np.array([0.08, 0.0, 0.0])),
            sdf.CylinderSdf(radius=0.06, height=0.25, center=np.array([-0.1, 0.0, 0.0])),
        ]),
    ]


class TestSdfValues:
    def test_box_closed_form(self):
        b = sdf.BoxSdf(np.array([1.0, 2.0, 3.0]))
        pts = np.array([
            [0.0, 0.0, 0.0],  # center: -min half extent
            [2.0, 0.0, 0.0],  # one unit outside the x face
            [2.0, 3.0, 0.0],  # outside an edge
            [0.5, 0.0, 0.0],  # inside
        ])
        expected = np.array([-1.0, 1.0, math.hypot(1.0, 1.0), -0.5])
        np.testing.assert_allclose(b.value(pts), expected, atol=1e-12)

    def test_cylinder_closed_form(self):
        c = sdf.CylinderSdf(radius=1.0, height=4.0)
        pts = np.array([
            [0.0, 0.0, 0.0],  # center
            [3.0, 0.0, 0.0],  # radially outside
            [0.0, 0.0, 3.0],  # beyond the cap
            [2.0, 0.0, 3.0],  # outside both: corner distance
        ])
        expected = np.array([-1.0, 2.0, 1.0, math.hypot(1.0, 1.0)])
        np.testing.assert_allclose(c.value(pts), expected, atol=1e-12)

    def test_union_is_min(self):
        shapes = shapes_under_test()
        u = shapes[2]
        pts = RNG.uniform(-0.5, 0.5, size=(50, 3))
        ref = np.minimum(u.shapes[0].value(pts), u.shapes[1].value(pts))
        np.testing.assert_allclose(u.value(pts), ref, atol=1e-15)

    def test_eikonal_property(self):
        """|grad Phi| = 1 away from the medial axis."""
        for shape in shapes_under_test():
            pts = RNG.uniform(-0.6, 0.6, size=(200, 3))
            vals = shape.value(pts)
            # exclude points close to the surface and to the center (skeleton)
            keep = (np.abs(vals) > 0.02) & (np.linalg.norm(pts, axis=1) > 0.1)
            g = shape.gradient(pts[keep])
            norms = np.linalg.norm(g, axis=1)
            assert np.quantile(np.abs(norms - 1.0), 0.9) < 1e-3

    def test_bounding_radius_contains_surface(self):
        for shape in shapes_under_test():
            r = shape.bounding_radius()
            pts = RNG.normal(size=(500, 3))
            pts /= np.linalg.norm(pts, axis=1, keepdims=True)
            assert np.all(shape.value(pts * (r + 1e-6)) > 0)


class TestRaycast:
    def test_depths_match_fine_march(self):
        pose = Pose(so3_exp(np.array([0.3, 0.5, 0.1])), np.array([0.02, -0.03, 0.9]))
        for shape in shapes_under_test():
            pixels = RNG.uniform([20, 16], [108, 80], size=(40, 2))
            depths = sdf.raycast_depths(shape, pose, K, pixels)
            for u, d in zip(pixels, depths):
                ref = fine_march_depth(shape, pose, K, u)
                if ref is None:
                    assert np.isnan(d)
                else:
                    assert abs(d - ref) < 1e-3, f"{u}: {d} vs {ref}"

    def test_analytic_matches_sphere_tracing(self):
        """The exact box/cylinder intersections agree with generic sphere
        tracing over a grid-sampled copy of the same geometry."""
        pose = Pose(so3_exp(np.array([0.2, -0.4, 0.3])), np.array([0.0, 0.05, 1.1]))
        for exact in (sdf.BoxSdf(np.array([0.12, 0.18, 0.1])), sdf.CylinderSdf(0.1, 0.25)):
            grid = sdf.GridSdf.from_shape(
                exact, origin=(-0.4, -0.4, -0.4), voxel_size=0.01, dims=(81, 81, 81)
            )
            pixels = RNG.uniform([56, 42], [72, 54], size=(30, 2))
            d_exact = sdf.raycast_depths(exact, pose, K, pixels)
            d_grid = sdf.raycast_depths(grid, pose, K, pixels)
            both = np.isfinite(d_exact) & np.isfinite(d_grid)
            # agreement where both hit cleanly; grid edges may disagree on
            # grazing rays, so compare the well-conditioned majority
            assert both.sum() >= 15
            assert np.median(np.abs(d_exact[both] - d_grid[both])) < 2e-3

    def test_ray_from_inside_hits_exit(self):
        b = sdf.BoxSdf(np.array([0.5, 0.5, 0.5]))
        t = b.ray_hits(np.zeros(3), np.array([[0.0, 0.0, 1.0]]))
        np.testing.assert_allclose(t, [0.5], atol=1e-12)

    def test_miss_is_nan(self):
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 1.0]))
        shape = sdf.BoxSdf(np.array([0.05, 0.05, 0.05]))
        d = sdf.raycast_depths(shape, pose, K, np.array([[0.0, 0.0]]))
        assert np.isnan(d[0])

    def test_depth_map_center_depth(self):
        shape = sdf.BoxSdf(np.array([0.2, 0.2, 0.1]))
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 1.5]))
        dm = sdf.raycast_depth_map(shape, pose, K)
        assert abs(dm[48, 64] - 1.4) < 1e-6

    def test_depth_pose_jacobian_translation(self):
        """Moving a fronto-parallel face away by dz increases depth by dz."""
        shape = sdf.BoxSdf(np.array([0.2, 0.2, 0.1]))
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 1.5]))
        jac = sdf.raycast_depth_pose_jacobian(shape, pose, K, np.array([64.0, 48.0]))
        np.testing.assert_allclose(jac[:3], [0.0, 0.0, 1.0], atol=1e-4)

    def test_depth_jacobian_raises_on_miss(self):
        shape = sdf.BoxSdf(np.array([0.05, 0.05, 0.05]))
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 1.0]))
        with pytest.raises(MissError):
            sdf.raycast_depth_pose_jacobian(shape, pose, K, np.array([0.0, 0.0]))


class TestSilhouette:
    def test_mask_supersets_hit_mask(self):
        """sigma > 0.5 region contains the raycast hit region up to a one
        pixel boundary band."""
        shape = sdf.BoxSdf(np.array([0.15, 0.1, 0.2]))
        pose = Pose(so3_exp(np.array([0.3, 0.4, 0.0])), np.array([0.05, 0.0, 1.2]))
        depth = sdf.raycast_depth_map(shape, pose, K)
        sil = sdf.silhouette_map(shape, pose, K, zeta=80.0, samples=64)
        hit = np.isfinite(depth)
        interior = hit.copy()
        # erode by one pixel: a hit pixel whose 4-neighbours all hit
        interior[1:-1, 1:-1] = (
            hit[1:-1, 1:-1] & hit[:-2, 1:-1] & hit[2:, 1:-1] & hit[1:-1, :-2] & hit[1:-1, 2:]
        )
        interior[0, :] = interior[-1, :] = False
        interior[:, 0] = interior[:, -1] = False
        assert np.all(sil[interior] > 0.5)

    def test_far_outside_is_zero_inside_is_one(self):
        shape = sdf.CylinderSdf(0.1, 0.3)
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 1.0]))
        assert sdf.silhouette_value(shape, pose, K, np.array([2.0, 2.0])) < 1e-3
        assert sdf.silhouette_value(shape, pose, K, np.array([64.0, 48.0])) > 0.999

    def test_values_monotonic_in_zeta_sharpness(self):
        """Larger zeta sharpens the transition: interior values increase,
        far-exterior values decrease."""
        shape = sdf.BoxSdf(np.array([0.15, 0.15, 0.15]))
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 1.2]))
        inside = np.array([64.0, 48.0])
        outside = np.array([5.0, 5.0])
        lo_i = sdf.silhouette_value(shape, pose, K, inside, zeta=10.0)
        hi_i = sdf.silhouette_value(shape, pose, K, inside, zeta=100.0)
        lo_o = sdf.silhouette_value(shape, pose, K, outside, zeta=10.0)
        hi_o = sdf.silhouette_value(shape, pose, K, outside, zeta=100.0)
        assert hi_i >= lo_i and hi_o <= lo_o

    def test_parameter_validation(self):
        shape = sdf.BoxSdf(np.array([0.1, 0.1, 0.1]))
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 1.0]))
        with pytest.raises(ValueError):
            sdf.silhouette_value(shape, pose, K, np.array([0.0, 0.0]), samples=1)
        with pytest.raises(ValueError):
            sdf.silhouette_value(shape, pose, K, np.array([0.0, 0.0]), zeta=0.0)


class TestGridSdf:
    def test_matches_source_shape_inside_grid(self):
        box = sdf.BoxSdf(np.array([0.1, 0.15, 0.12]))
        grid = sdf.GridSdf.from_shape(box, origin=(-0.3, -0.3, -0.3), voxel_size=0.005, dims=(121, 121, 121))
        pts = RNG.uniform(-0.25, 0.25, size=(200, 3))
        np.testing.assert_allclose(grid.value(pts), box.value(pts), atol=5e-3)

    def test_save_load_round_trip(self, tmp_path):
        box = sdf.BoxSdf(np.array([0.1, 0.1, 0.1]))
        grid = sdf.GridSdf.from_shape(box, origin=(-0.2, -0.2, -0.2), voxel_size=0.02, dims=(21, 21, 21))
        path = os.path.join(tmp_path, "shape.sdf")
        grid.save(path)
        loaded = sdf.GridSdf.load(path)
        np.testing.assert_allclose(loaded.values, grid.values.astype("<f4"), atol=0)
        np.testing.assert_allclose(loaded.origin, grid.origin)
        assert loaded.voxel_size == grid.voxel_size

    def test_load_rejects_bad_header(self, tmp_path):
        path = os.path.join(tmp_path, "bad.sdf")
        with open(path, "wb") as fh:
            fh.write(b"nonsense\n")
        with pytest.raises(ValueError):
            sdf.GridSdf.load(path)

    def test_load_rejects_truncated_data(self, tmp_path):
        box = sdf.BoxSdf(np.array([0.1, 0.1, 0.1]))
        grid = sdf.GridSdf.from_shape(box, origin=(-0.2, -0.2, -0.2), voxel_size=0.02, dims=(21, 21, 21))
        path = os.path.join(tmp_path, "trunc.sdf")
        grid.save(path)
        data = open(path, "rb").read()
        with open(path, "wb") as fh:
            fh.write(data[:-16])
        with pytest.raises(ValueError):
            sdf.GridSdf.load(path)
