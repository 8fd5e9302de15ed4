"""Synthetic event + frame camera with ground truth.

Renders log-intensity images of a textured SDF object moving along
parametric trajectories in front of a fixed camera, and emits per-pixel
level-crossing events with contrast threshold C plus intensity frames at
the frame clock. The renderer is a pure function of the scene and pose;
event generation only re-renders a region of interest around the object,
which is exact because pixels outside it are untouched by the object.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import OutOfRange
from .events import EventArray
from .geometry import CameraIntrinsics, Pose, so3_exp
from .sdf import SdfShape, image_pixel_grid, raycast_depths, _camera_rays

LOG_FLOOR = math.log(0.01)
GT_SAMPLE_RATE = 1000.0


@dataclass
class TrajectorySpec:
    kind: str  # constant_velocity | falling | sliding | dice | turn_left | turn_right | straight
    initial_pose: Pose
    linear_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gravity: float = 9.81
    gravity_direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    friction_decay: float = 0.0  # 1/s, sliding only
    turn_radius: float = 5.0  # m, turning only
    speed: float = 1.25  # m/s along the arc, turning only
    speed_multiplier: float = 1.0

    def __post_init__(self):
        self.linear_velocity = np.asarray(self.linear_velocity, dtype=float)
        self.angular_velocity = np.asarray(self.angular_velocity, dtype=float)
        g = np.asarray(self.gravity_direction, dtype=float)
        self.gravity_direction = g / np.linalg.norm(g)


def ground_truth_pose(spec: TrajectorySpec, t: float, duration: float | None = None) -> Pose:
    """Closed-form object pose at time t."""
    if t < -1e-12 or (duration is not None and t > duration + 1e-12):
        raise OutOfRange(f"t={t} outside [0, {duration}]")
    s = t * spec.speed_multiplier
    p0 = spec.initial_pose.translation
    R0 = spec.initial_pose.rotation
    kind = spec.kind

    if kind in ("constant_velocity", "straight"):
        p = p0 + spec.linear_velocity * s
        R = R0 @ so3_exp(spec.angular_velocity * s)
    elif kind in ("falling", "dice"):
        p = p0 + spec.linear_velocity * s + 0.5 * spec.gravity * s * s * spec.gravity_direction
        R = R0 @ so3_exp(spec.angular_velocity * s)
    elif kind == "sliding":
        mu = spec.friction_decay
        if mu > 1e-12:
            scale = (1.0 - math.exp(-mu * s)) / mu
        else:
            scale = s
        p = p0 + spec.linear_velocity * scale
        R = R0 @ so3_exp(spec.angular_velocity * scale)
    elif kind in ("turn_left", "turn_right"):
        sign = 1.0 if kind == "turn_left" else -1.0
        # circular arc in the camera x-z plane, heading tangent to the arc
        a1 = np.array([1.0, 0.0, 0.0])
        a2 = np.array([0.0, 0.0, 1.0])
        normal = np.cross(a1, a2)
        theta = sign * spec.speed * s / spec.turn_radius
        center = p0 + sign * spec.turn_radius * a1
        Rn = so3_exp(normal * theta)
        p = center + Rn @ (p0 - center)
        R = Rn @ R0
    else:
        raise ValueError(f"unknown trajectory kind '{kind}'")
    return Pose(R, p)


@dataclass
class SceneConfig:
    shape: SdfShape
    camera: CameraIntrinsics
    trajectory: TrajectorySpec
    camera_pose: Pose = field(default_factory=Pose.identity)  # camera in world
    texture_period: float = 0.05  # m, object checkerboard
    texture_albedo_a: float = 1.0
    texture_albedo_b: float = 0.15
    background: str = "uniform"  # uniform | plane
    background_albedo: float = 0.45
    background_albedo_b: float = 0.75
    background_depth: float = 4.0  # m, plane background
    background_period: float = 0.5  # m
    light_direction: np.ndarray = field(default_factory=lambda: np.array([0.25, 0.35, 0.9]))
    ambient: float = 0.35
    contrast: float = 0.1
    render_rate: float = 2000.0
    frame_rate: float = 30.0
    duration: float = 2.0
    jitter_sigma: float = 0.0  # s, per-event timestamp jitter
    spurious_rate: float = 0.0  # events / pixel / s

    def __post_init__(self):
        l = np.asarray(self.light_direction, dtype=float)
        self.light_direction = l / np.linalg.norm(l)
        if self.render_rate < 20.0 * self.frame_rate:
            raise ValueError("render rate must be at least 20x the frame rate")
        if self.contrast <= 0:
            raise ValueError("contrast threshold must be positive")

    def object_pose_in_camera(self, t: float) -> Pose:
        world = ground_truth_pose(self.trajectory, t, self.duration)
        return self.camera_pose.inverse().compose(world)


def _checker(points: np.ndarray, period: float, a: float, b: float) -> np.ndarray:
    # half-period offset keeps cell boundaries off axis-aligned shape faces
    idx = np.floor((points + 0.5 * period) / period).astype(np.int64)
    even = (idx.sum(axis=1) % 2) == 0
    return np.where(even, a, b)


def _background_log(scene: SceneConfig, pixels: np.ndarray) -> np.ndarray:
    if scene.background == "uniform":
        albedo = np.full(pixels.shape[0], scene.background_albedo)
    elif scene.background == "plane":
        dirs = _camera_rays(scene.camera, pixels)
        t = scene.background_depth / dirs[:, 2]
        pts = dirs * t[:, None]
        pts_plane = np.concatenate([pts[:, :2], np.zeros((len(pts), 1))], axis=1)
        albedo = _checker(
            pts_plane,
            scene.background_period,
            scene.background_albedo,
            scene.background_albedo_b,
        )
    else:
        raise ValueError(f"unknown background '{scene.background}'")
    return np.log(np.clip(albedo, 0.01, 1.0))


def _object_log(scene: SceneConfig, pose: Pose, pixels: np.ndarray):
    """Object log intensity and hit mask at the given pixels."""
    depth = raycast_depths(scene.shape, pose, scene.camera, pixels, far=50.0)
    hit = np.isfinite(depth)
    vals = np.zeros(pixels.shape[0])
    if np.any(hit):
        dirs = _camera_rays(scene.camera, pixels[hit])
        t_ray = depth[hit] / dirs[:, 2]
        inv = pose.inverse()
        pts_obj = inv.translation + (dirs @ inv.rotation.T) * t_ray[:, None]
        albedo = _checker(pts_obj, scene.texture_period, scene.texture_albedo_a, scene.texture_albedo_b)
        # evaluate the shading normal a hair inside the surface so rays that
        # land exactly on an edge resolve to one face instead of a blend
        dirs_obj = dirs @ inv.rotation.T
        n_obj = scene.shape.gradient(pts_obj + 1e-5 * dirs_obj)
        norms = np.linalg.norm(n_obj, axis=1)
        n_obj /= np.maximum(norms, 1e-12)[:, None]
        n_cam = n_obj @ pose.rotation.T
        lambert = np.maximum(0.0, -(n_cam @ scene.light_direction))
        shade = scene.ambient + (1.0 - scene.ambient) * lambert
        vals[hit] = np.log(np.clip(albedo * shade, 0.01, 1.0))
    return vals, hit


def render_log_intensity(scene: SceneConfig, pose: Pose) -> np.ndarray:
    """Full-image log intensity at the given object pose; deterministic."""
    K = scene.camera
    pixels = image_pixel_grid(K)
    bg = _background_log(scene, pixels)
    obj, hit = _object_log(scene, pose, pixels)
    out = np.where(hit, obj, bg)
    return out.reshape(K.height, K.width)


def _pixel_footprint_blur(img: np.ndarray) -> np.ndarray:
    """Separable 3-tap binomial smoothing modelling each pixel integrating
    light over its footprint instead of sampling a single point."""
    out = ndimage.convolve1d(img, _FOOTPRINT_KERNEL, axis=0, mode="nearest")
    return ndimage.convolve1d(out, _FOOTPRINT_KERNEL, axis=1, mode="nearest")


def render_event_log(scene: SceneConfig, pose: Pose) -> np.ndarray:
    """Log intensity as seen by the event pixels: the point-rendered image
    smoothed over each pixel's footprint. A point-sampled step edge flips a
    pixel only when it crosses the pixel center, turning sub-pixel motion
    into sparse full-height spikes; area integration responds in proportion
    to the swept area, which is what event pixels (and the tracker's
    linearized change model) see."""
    return _pixel_footprint_blur(render_log_intensity(scene, pose))


def render_intensity_frame(scene: SceneConfig, pose: Pose, supersample: int = 4) -> np.ndarray:
    """Full-image linear intensity averaged over a supersample x supersample
    subpixel grid, approximating the irradiance a frame camera integrates
    over each pixel's area; deterministic."""
    K = scene.camera
    s = int(supersample)
    if s <= 1:
        return np.exp(render_log_intensity(scene, pose))
    offs = (np.arange(s) + 0.5) / s - 0.5
    base = image_pixel_grid(K)
    acc = np.zeros(K.height * K.width)
    for oy in offs:
        for ox in offs:
            pixels = base + np.array([ox, oy])
            bg = _background_log(scene, pixels)
            obj, hit = _object_log(scene, pose, pixels)
            acc += np.exp(np.where(hit, obj, bg))
    return (acc / (s * s)).reshape(K.height, K.width)


def _roi_bbox(scene: SceneConfig, pose: Pose, margin: int = 3):
    """Pixel bounding box guaranteed to contain the object projection."""
    K = scene.camera
    c = pose.translation
    r = scene.shape.bounding_radius()
    near = c[2] - r
    if near <= 0.05:
        return 0, K.width, 0, K.height
    rx = K.fx * r / near + margin
    ry = K.fy * r / near + margin
    cx = K.fx * c[0] / c[2] + K.cx
    cy = K.fy * c[1] / c[2] + K.cy
    x0 = max(0, int(math.floor(cx - rx)))
    x1 = min(K.width, int(math.ceil(cx + rx)) + 1)
    y0 = max(0, int(math.floor(cy - ry)))
    y1 = min(K.height, int(math.ceil(cy + ry)) + 1)
    return x0, x1, y0, y1


def generate(scene: SceneConfig, seed: int = 0):
    """Simulate the scene.

    Returns (events: EventArray, frames: list of (t, intensity image),
    ground_truth: list of (t, Pose in camera frame)).
    """
    rng = np.random.default_rng(seed)
    K = scene.camera
    dt = 1.0 / scene.render_rate
    n_ticks = int(round(scene.duration * scene.render_rate))

    pose0 = scene.object_pose_in_camera(0.0)
    pixels_all = image_pixel_grid(K)
    bg_log = _background_log(scene, pixels_all).reshape(K.height, K.width)
    L_cur = render_log_intensity(scene, pose0)
    ell_ref = L_cur.copy()

    ev_t, ev_x, ev_y, ev_p = [], [], [], []
    prev_pose = pose0
    C = scene.contrast

    for j in range(1, n_ticks + 1):
        t_prev = (j - 1) * dt
        t_now = j * dt
        pose = scene.object_pose_in_camera(t_now)

        x0a, x1a, y0a, y1a = _roi_bbox(scene, prev_pose)
        x0b, x1b, y0b, y1b = _roi_bbox(scene, pose)
        x0, x1 = min(x0a, x0b), max(x1a, x1b)
        y0, y1 = min(y0a, y0b), max(y1a, y1b)
        prev_pose = pose
        if x0 >= x1 or y0 >= y1:
            continue

        xs, ys = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
        roi_px = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
        obj, hit = _object_log(scene, pose, roi_px)
        new_vals = np.where(hit, obj, bg_log[y0:y1, x0:x1].ravel())

        L_a = L_cur[y0:y1, x0:x1].ravel().copy()
        refs = ell_ref[y0:y1, x0:x1].ravel().copy()
        L_cur[y0:y1, x0:x1] = new_vals.reshape(y1 - y0, x1 - x0)

        delta = new_vals - refs
        k = np.floor(np.abs(delta) / C).astype(np.int64)
        firing = np.flatnonzero(k > 0)
        if firing.size:
            kf = k[firing]
            sign = np.sign(delta[firing])
            total = int(kf.sum())
            rep = np.repeat(firing, kf)
            # 1-based crossing index within each pixel's burst
            starts = np.cumsum(kf) - kf
            i_within = np.arange(total) - np.repeat(starts, kf) + 1
            sgn_rep = np.repeat(sign, kf)
            levels = refs[rep] + sgn_rep * i_within * C
            denom = new_vals[rep] - L_a[rep]
            frac = np.full(total, 0.5)
            np.divide(levels - L_a[rep], denom, out=frac, where=np.abs(denom) > 1e-15)
            frac = np.clip(frac, 0.0, 1.0)
            ev_t.append(t_prev + frac * dt)
            ev_x.append(roi_px[rep, 0].astype(np.int64))
            ev_y.append(roi_px[rep, 1].astype(np.int64))
            ev_p.append(sgn_rep.astype(np.int64))
            refs[firing] += kf * sign * C
            ell_ref[y0:y1, x0:x1] = refs.reshape(y1 - y0, x1 - x0)

        if scene.spurious_rate > 0:
            lam = scene.spurious_rate * K.width * K.height * dt
            n_sp = rng.poisson(lam)
            if n_sp > 0:
                ev_t.append(t_prev + rng.uniform(0.0, dt, n_sp))
                ev_x.append(rng.integers(0, K.width, n_sp))
                ev_y.append(rng.integers(0, K.height, n_sp))
                ev_p.append(rng.choice(np.array([-1, 1]), n_sp))

    if ev_t:
        t = np.concatenate(ev_t)
        x = np.concatenate(ev_x)
        y = np.concatenate(ev_y)
        p = np.concatenate(ev_p)
    else:
        t = np.zeros(0)
        x = np.zeros(0, dtype=np.int64)
        y = np.zeros(0, dtype=np.int64)
        p = np.zeros(0, dtype=np.int64)

    if scene.jitter_sigma > 0 and len(t):
        t = np.clip(t + rng.normal(0.0, scene.jitter_sigma, len(t)), 0.0, scene.duration)

    order = np.lexsort((p, x, y, t))
    events = EventArray(t=t[order], x=x[order], y=y[order], p=p[order])

    frames = []
    n_frames = int(math.floor(scene.duration * scene.frame_rate)) + 1
    for kf in range(n_frames):
        tf = kf / scene.frame_rate
        if tf > scene.duration + 1e-12:
            break
        img = render_intensity_frame(scene, scene.object_pose_in_camera(tf))
        frames.append((tf, img))

    gt = []
    n_gt = int(math.floor(scene.duration * GT_SAMPLE_RATE)) + 1
    for kg in range(n_gt):
        tg = kg / GT_SAMPLE_RATE
        gt.append((tg, scene.object_pose_in_camera(tg)))

    return events, frames, gt
