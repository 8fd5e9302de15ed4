"""Signed distance fields, sphere-traced depth and smooth silhouette projection.

Sign convention: negative inside the object, positive outside. All shapes
expose a vectorized ``value`` over (N, 3) points in the object frame and a
``bounding_radius`` used to pick silhouette sampling bands and render
regions of interest.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import GrazingHit, MissError
from .geometry import CameraIntrinsics, Pose

RAYCAST_TOL = 1e-5
RAYCAST_MAX_STEPS = 256
RAYCAST_FAR = 100.0


class SdfShape:
    def value(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def bounding_radius(self) -> float:
        raise NotImplementedError

    def gradient(self, points: np.ndarray, h: float = 1e-6) -> np.ndarray:
        """Central-difference gradient, (N, 3)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        g = np.empty_like(points)
        for a in range(3):
            dp = np.zeros(3)
            dp[a] = h
            g[:, a] = (self.value(points + dp) - self.value(points - dp)) / (2.0 * h)
        return g


@dataclass
class BoxSdf(SdfShape):
    half_extents: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.half_extents = np.asarray(self.half_extents, dtype=float)
        self.center = np.asarray(self.center, dtype=float)

    def value(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float)) - self.center
        q = np.abs(p) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(np.max(q, axis=1), 0.0)
        return outside + inside

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.half_extents) + np.linalg.norm(self.center))

    def ray_hits(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Exact slab-test ray parameters; NaN marks a miss."""
        o = np.asarray(origin, dtype=float) - self.center
        d = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
        inv = 1.0 / d
        t1 = (-self.half_extents - o) * inv
        t2 = (self.half_extents - o) * inv
        tmin = np.max(np.minimum(t1, t2), axis=1)
        tmax = np.min(np.maximum(t1, t2), axis=1)
        hit = (tmax >= tmin) & (tmax > 0)
        t = np.where(tmin > 0, tmin, tmax)
        return np.where(hit, t, np.nan)


@dataclass
class CylinderSdf(SdfShape):
    """Cylinder aligned with the object-frame z axis."""

    radius: float
    height: float
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)

    def value(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float)) - self.center
        dr = np.hypot(p[:, 0], p[:, 1]) - self.radius
        dz = np.abs(p[:, 2]) - 0.5 * self.height
        q = np.stack([dr, dz], axis=1)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(np.max(q, axis=1), 0.0)
        return outside + inside

    def bounding_radius(self) -> float:
        r = float(np.hypot(self.radius, 0.5 * self.height))
        return r + float(np.linalg.norm(self.center))

    def ray_hits(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Exact side/cap intersections; NaN marks a miss."""
        o = np.asarray(origin, dtype=float) - self.center
        n = dirs.shape[0]
        hz = 0.5 * self.height
        cands = np.full((n, 4), np.inf)

        # lateral surface: quadratic in t on x^2 + y^2 = r^2
        a = dirs[:, 0] ** 2 + dirs[:, 1] ** 2
        b = 2.0 * (o[0] * dirs[:, 0] + o[1] * dirs[:, 1])
        c = o[0] ** 2 + o[1] ** 2 - self.radius**2
        disc = b * b - 4.0 * a * c
        ok = (a > 1e-18) & (disc >= 0.0)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        for s, col in ((-1.0, 0), (1.0, 1)):
            t = np.where(ok, (-b + s * sq) / np.where(ok, 2.0 * a, 1.0), np.inf)
            z = o[2] + t * dirs[:, 2]
            good = ok & (t > 0) & (np.abs(z) <= hz)
            cands[:, col] = np.where(good, t, np.inf)

        # end caps at z = +-h/2
        dz = np.where(np.abs(dirs[:, 2]) < 1e-18, 1e-18, dirs[:, 2])
        for s, col in ((-1.0, 2), (1.0, 3)):
            t = (s * hz - o[2]) / dz
            x = o[0] + t * dirs[:, 0]
            y = o[1] + t * dirs[:, 1]
            good = (t > 0) & (x * x + y * y <= self.radius**2)
            cands[:, col] = np.where(good, t, np.inf)

        t = np.min(cands, axis=1)
        return np.where(np.isfinite(t), t, np.nan)


@dataclass
class UnionSdf(SdfShape):
    shapes: list

    def value(self, points: np.ndarray) -> np.ndarray:
        vals = [s.value(points) for s in self.shapes]
        return np.min(np.stack(vals, axis=0), axis=0)

    def bounding_radius(self) -> float:
        return max(s.bounding_radius() for s in self.shapes)

    def ray_hits(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        parts = []
        for s in self.shapes:
            f = getattr(s, "ray_hits", None)
            if f is None:
                raise NotImplementedError("union member lacks an analytic raycast")
            parts.append(f(origin, dirs))
        stacked = np.stack(parts, axis=0)
        all_nan = np.all(np.isnan(stacked), axis=0)
        out = np.full(dirs.shape[0], np.nan)
        if not np.all(all_nan):
            out[~all_nan] = np.nanmin(stacked[:, ~all_nan], axis=0)
        return out


class GridSdf(SdfShape):
    """Dense voxel grid with trilinear interpolation.

    Outside the grid, the value is the distance to the grid boundary plus the
    interpolated value at the clamped point, which never understates the true
    distance by more than one voxel for a valid SDF.
    """

    def __init__(self, origin: np.ndarray, voxel_size: float, values: np.ndarray):
        self.origin = np.asarray(origin, dtype=float)
        self.voxel_size = float(voxel_size)
        # values indexed [iz, iy, ix]
        self.values = np.asarray(values, dtype=np.float64)
        self.dims = np.array(self.values.shape[::-1])  # (nx, ny, nz)

    @staticmethod
    def from_shape(shape: SdfShape, origin, voxel_size: float, dims) -> "GridSdf":
        nx, ny, nz = dims
        xs = origin[0] + voxel_size * np.arange(nx)
        ys = origin[1] + voxel_size * np.arange(ny)
        zs = origin[2] + voxel_size * np.arange(nz)
        Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
        vals = shape.value(pts).reshape(nz, ny, nx)
        return GridSdf(origin, voxel_size, vals)

    def value(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        g = (p - self.origin) / self.voxel_size
        hi = self.dims - 1
        gc = np.clip(g, 0.0, hi - 1e-9)
        outside = np.linalg.norm((g - gc), axis=1) * self.voxel_size

        i0 = np.floor(gc).astype(int)
        i0 = np.minimum(i0, hi - 1)
        f = gc - i0
        ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        v = self.values
        c000 = v[iz, iy, ix]
        c100 = v[iz, iy, ix + 1]
        c010 = v[iz, iy + 1, ix]
        c110 = v[iz, iy + 1, ix + 1]
        c001 = v[iz + 1, iy, ix]
        c101 = v[iz + 1, iy, ix + 1]
        c011 = v[iz + 1, iy + 1, ix]
        c111 = v[iz + 1, iy + 1, ix + 1]
        c00 = c000 * (1 - fx) + c100 * fx
        c01 = c001 * (1 - fx) + c101 * fx
        c10 = c010 * (1 - fx) + c110 * fx
        c11 = c011 * (1 - fx) + c111 * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        return c0 * (1 - fz) + c1 * fz + outside

    def bounding_radius(self) -> float:
        far_corner = self.origin + (self.dims - 1) * self.voxel_size
        corners = np.array(
            [
                [x, y, z]
                for x in (self.origin[0], far_corner[0])
                for y in (self.origin[1], far_corner[1])
                for z in (self.origin[2], far_corner[2])
            ]
        )
        return float(np.max(np.linalg.norm(corners, axis=1)))

    def save(self, path):
        with open(path, "wb") as fh:
            nx, ny, nz = self.dims
            header = (
                f"dims {nx} {ny} {nz}\n"
                f"origin {self.origin[0]:.9g} {self.origin[1]:.9g} {self.origin[2]:.9g}\n"
                f"voxel {self.voxel_size:.9g}\n"
            )
            fh.write(header.encode("ascii"))
            fh.write(self.values.astype("<f4").tobytes())

    @staticmethod
    def load(path) -> "GridSdf":
        with open(path, "rb") as fh:
            dims = fh.readline().split()
            origin = fh.readline().split()
            voxel = fh.readline().split()
            if dims[0] != b"dims" or origin[0] != b"origin" or voxel[0] != b"voxel":
                raise ValueError(f"bad grid SDF header in {path}")
            nx, ny, nz = (int(x) for x in dims[1:4])
            org = np.array([float(x) for x in origin[1:4]])
            vox = float(voxel[1])
            raw = fh.read(4 * nx * ny * nz)
            if len(raw) != 4 * nx * ny * nz:
                raise ValueError(f"truncated grid SDF data in {path}")
            vals = np.frombuffer(raw, dtype="<f4").reshape(nz, ny, nx).astype(np.float64)
            return GridSdf(org, vox, vals)


def _camera_rays(K: CameraIntrinsics, pixels: np.ndarray) -> np.ndarray:
    """Unit ray directions in the camera frame for (N, 2) pixel coordinates."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
    d = np.empty((pixels.shape[0], 3))
    d[:, 0] = (pixels[:, 0] - K.cx) / K.fx
    d[:, 1] = (pixels[:, 1] - K.cy) / K.fy
    d[:, 2] = 1.0
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d


def raycast_depths(
    shape: SdfShape,
    pose: Pose,
    K: CameraIntrinsics,
    pixels: np.ndarray,
    far: float = RAYCAST_FAR,
) -> np.ndarray:
    """Sphere-traced z-depths for an array of pixels; NaN marks a miss.

    After convergence to |phi| < RAYCAST_TOL the hit is refined by a few
    Newton steps along the ray so that the returned depth is smooth in the
    pose (needed for finite-difference pose derivatives).
    """
    dirs_cam = _camera_rays(K, pixels)
    inv = pose.inverse()
    origin = inv.translation  # camera center in object frame
    dirs = dirs_cam @ inv.rotation.T

    analytic = getattr(shape, "ray_hits", None)
    if analytic is not None:
        try:
            t = analytic(origin, dirs)
        except NotImplementedError:
            t = None
        if t is not None:
            t = np.where(t <= far, t, np.nan)
            return t * dirs_cam[:, 2]

    n = dirs.shape[0]
    t = np.zeros(n)
    done = np.zeros(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for _ in range(RAYCAST_MAX_STEPS):
        active = ~done
        if not np.any(active):
            break
        p = origin + t[active, None] * dirs[active]
        phi = shape.value(p)
        conv = phi < RAYCAST_TOL
        idx = np.flatnonzero(active)
        hit[idx[conv]] = True
        done[idx[conv]] = True
        t[idx[~conv]] += phi[~conv]
        overshoot = t[idx] > far
        done[idx[overshoot]] = True

    # Newton refinement of hits
    h = 1e-6
    hidx = np.flatnonzero(hit)
    if hidx.size:
        th = t[hidx]
        o = origin
        d = dirs[hidx]
        for _ in range(3):
            phi = shape.value(o + th[:, None] * d)
            dphi = (
                shape.value(o + (th + h)[:, None] * d)
                - shape.value(o + (th - h)[:, None] * d)
            ) / (2.0 * h)
            safe = np.abs(dphi) > 1e-3
            th = np.where(safe, th - phi / np.where(safe, dphi, 1.0), th)
        t[hidx] = th

    depth = np.full(n, np.nan)
    depth[hit] = t[hit] * dirs_cam[hit, 2]
    return depth


def raycast_depth(shape: SdfShape, pose: Pose, K: CameraIntrinsics, u) -> float | None:
    """Single-pixel raycast; returns z-depth in meters or None on miss."""
    d = raycast_depths(shape, pose, K, np.asarray(u, dtype=float)[None, :])
    return None if np.isnan(d[0]) else float(d[0])


def hit_normal(shape: SdfShape, pose: Pose, K: CameraIntrinsics, u, depth: float):
    """Object-frame surface normal and ray direction at a raycast hit."""
    dir_cam = _camera_rays(K, np.asarray(u, dtype=float)[None, :])[0]
    inv = pose.inverse()
    d_obj = inv.rotation @ dir_cam
    t_ray = depth / dir_cam[2]
    p = inv.translation + t_ray * d_obj
    n = shape.gradient(p[None, :])[0]
    norm = np.linalg.norm(n)
    if norm > 0:
        n = n / norm
    return n, d_obj


def raycast_depth_pose_jacobian(
    shape: SdfShape, pose: Pose, K: CameraIntrinsics, u, step: float = 1e-5
) -> np.ndarray:
    """Derivative of z-depth w.r.t. a left-multiplied pose increment (6,).

    Central finite differences with the given step. Raises on miss or when
    the ray grazes the surface (|cos| <= 0.1 between ray and normal).
    """
    from .geometry import exp_se3

    d0 = raycast_depth(shape, pose, K, u)
    if d0 is None:
        raise MissError("raycast miss at requested pixel")
    n, ray = hit_normal(shape, pose, K, u, d0)
    if abs(float(np.dot(n, ray))) <= 0.1:
        raise GrazingHit("ray nearly tangent to surface")

    jac = np.zeros(6)
    for m in range(6):
        delta = np.zeros(6)
        delta[m] = step
        dp = raycast_depth(shape, exp_se3(delta).compose(pose), K, u)
        dm = raycast_depth(shape, exp_se3(-delta).compose(pose), K, u)
        if dp is None or dm is None:
            raise MissError("raycast miss under pose perturbation")
        jac[m] = (dp - dm) / (2.0 * step)
    return jac


def default_ray_band(shape: SdfShape, pose: Pose) -> tuple[float, float]:
    """Depth band bracketing the object for silhouette ray sampling."""
    cz = float(pose.translation[2])
    r = shape.bounding_radius()
    return max(0.01, cz - 2.0 * r), cz + 2.0 * r


def silhouette_values(
    shape: SdfShape,
    pose: Pose,
    K: CameraIntrinsics,
    pixels: np.ndarray,
    zeta: float = 50.0,
    samples: int = 32,
    near: float | None = None,
    far: float | None = None,
) -> np.ndarray:
    """Smooth silhouette sigma in [0, 1] for an array of pixels.

    sigma = 1 - prod_p sigmoid(Phi(p) * zeta) over points sampled uniformly
    on each pixel ray between near and far; evaluated in log space.
    """
    if samples < 2:
        raise ValueError("need at least 2 ray samples")
    if zeta <= 0:
        raise ValueError("zeta must be positive")
    if near is None or far is None:
        dn, df = default_ray_band(shape, pose)
        near = dn if near is None else near
        far = df if far is None else far

    dirs_cam = _camera_rays(K, pixels)
    inv = pose.inverse()
    origin = inv.translation
    dirs = dirs_cam @ inv.rotation.T
    ts = np.linspace(near, far, samples)

    log_prod = np.zeros(dirs.shape[0])
    for t in ts:
        phi = shape.value(origin + t * dirs)
        # log(sigmoid(x)) = -log(1 + exp(-x))
        log_prod += -np.logaddexp(0.0, -phi * zeta)
    return -np.expm1(log_prod)


def silhouette_value(
    shape: SdfShape,
    pose: Pose,
    K: CameraIntrinsics,
    u,
    zeta: float = 50.0,
    samples: int = 32,
    near: float | None = None,
    far: float | None = None,
) -> float:
    return float(
        silhouette_values(
            shape, pose, K, np.asarray(u, dtype=float)[None, :], zeta, samples, near, far
        )[0]
    )


def image_pixel_grid(K: CameraIntrinsics) -> np.ndarray:
    """(H*W, 2) array of integer pixel coordinates in row-major order."""
    xs, ys = np.meshgrid(np.arange(K.width), np.arange(K.height))
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)


def raycast_depth_map(
    shape: SdfShape, pose: Pose, K: CameraIntrinsics, far: float = RAYCAST_FAR
) -> np.ndarray:
    """(H, W) z-depth map with NaN at misses."""
    px = image_pixel_grid(K)
    return raycast_depths(shape, pose, K, px, far=far).reshape(K.height, K.width)


def silhouette_map(
    shape: SdfShape,
    pose: Pose,
    K: CameraIntrinsics,
    zeta: float = 50.0,
    samples: int = 32,
) -> np.ndarray:
    """(H, W) map of silhouette values."""
    px = image_pixel_grid(K)
    return silhouette_values(shape, pose, K, px, zeta=zeta, samples=samples).reshape(
        K.height, K.width
    )
