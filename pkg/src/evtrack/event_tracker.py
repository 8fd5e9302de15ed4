"""Fast tracking layer: fits the newest spline segment to event buffer frames.

The data term compares each event buffer frame, L2-normalized, against the
L2-normalized predicted log-intensity change ``grad_L(tau(u)) . du/dt * dt_F``
where the gradient is sampled in the reference keyframe through the warp of
the pixel's raycast 3D point. Pixels whose raycast misses the object predict
zero change but keep their measured contribution, so background clutter
penalizes wrong poses softly without a model gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import TrackerConfig
from .errors import DegenerateFrame, OutOfSpan
from .events import EventBufferFrame
from .geometry import (
    CameraIntrinsics,
    Pose,
    exp_se3,
    interaction_matrices,
)
from .nlls import levenberg_marquardt
from .sdf import SdfShape, raycast_depths
from .spline import SplineTrajectory

FD_STEP = 1e-6
NORM_EPS = 1e-12
NORM_FLOOR = 1e-3  # smooths the predicted-change normalization near zero motion
ACTIVE_DILATION = 3


@dataclass
class ReferenceKeyframe:
    """Log-intensity reference with precomputed spatial gradient."""

    log_image: np.ndarray
    grad_x: np.ndarray
    grad_y: np.ndarray
    pose: Pose
    timestamp: float

    @staticmethod
    def from_image(image: np.ndarray, pose: Pose, timestamp: float) -> "ReferenceKeyframe":
        L = np.log(np.clip(np.asarray(image, dtype=float), 0.01, 1.0))
        gx = np.zeros_like(L)
        gy = np.zeros_like(L)
        gx[:, 1:-1] = (L[:, 2:] - L[:, :-2]) * 0.5
        gy[1:-1, :] = (L[2:, :] - L[:-2, :]) * 0.5
        return ReferenceKeyframe(L, gx, gy, pose, timestamp)

    def sample_gradient(self, uv: np.ndarray):
        """Bilinear gradient samples; returns (gx, gy, valid)."""
        h, w = self.log_image.shape
        x = uv[:, 0]
        y = uv[:, 1]
        valid = (x >= 0) & (x <= w - 1 - 1e-9) & (y >= 0) & (y <= h - 1 - 1e-9)
        xs = np.where(valid, x, 0.0)
        ys = np.where(valid, y, 0.0)
        x0 = np.floor(xs).astype(int)
        y0 = np.floor(ys).astype(int)
        x0 = np.minimum(x0, w - 2)
        y0 = np.minimum(y0, h - 2)
        fx = xs - x0
        fy = ys - y0
        out = []
        for img in (self.grad_x, self.grad_y):
            v00 = img[y0, x0]
            v10 = img[y0, x0 + 1]
            v01 = img[y0 + 1, x0]
            v11 = img[y0 + 1, x0 + 1]
            v = (
                v00 * (1 - fx) * (1 - fy)
                + v10 * fx * (1 - fy)
                + v01 * (1 - fx) * fy
                + v11 * fx * fy
            )
            out.append(np.where(valid, v, 0.0))
        return out[0], out[1], valid


def object_pixel_bbox(shape: SdfShape, pose: Pose, K: CameraIntrinsics, margin: int = 2):
    """Image bounding box containing the projected object, or None if off-screen."""
    c = pose.translation
    r = shape.bounding_radius()
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
    if x0 >= x1 or y0 >= y1:
        return None
    return x0, x1, y0, y1


def _dilate(mask: np.ndarray, iterations: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(iterations):
        nxt = out.copy()
        nxt[1:, :] |= out[:-1, :]
        nxt[:-1, :] |= out[1:, :]
        nxt[:, 1:] |= out[:, :-1]
        nxt[:, :-1] |= out[:, 1:]
        out = nxt
    return out


def hit_mask(shape: SdfShape, pose: Pose, K: CameraIntrinsics) -> np.ndarray:
    """(H, W) boolean raycast hit mask, evaluated only inside the object bbox."""
    mask = np.zeros((K.height, K.width), dtype=bool)
    bbox = object_pixel_bbox(shape, pose, K)
    if bbox is None:
        return mask
    x0, x1, y0, y1 = bbox
    xs, ys = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
    px = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
    depth = raycast_depths(shape, pose, K, px, far=50.0)
    mask[y0:y1, x0:x1] = np.isfinite(depth).reshape(y1 - y0, x1 - x0)
    return mask


def predict_changes(
    ref: ReferenceKeyframe,
    pose: Pose,
    xi: np.ndarray,
    shape: SdfShape,
    K: CameraIntrinsics,
    pixels: np.ndarray,
    dt: float,
):
    """Expected accumulated log-intensity change magnitude q = grad_L . flow * dt.

    The measured buffer satisfies F ~ -q at the true motion. ``xi`` is the
    object's spatial twist in the camera frame; the equivalent camera twist
    for the interaction matrix is its negative. Returns (q, valid, grad_sq).
    """
    n = pixels.shape[0]
    q = np.zeros(n)
    valid = np.zeros(n, dtype=bool)
    # weights at miss pixels use the reference gradient at the pixel itself
    # (identity warp), so boundary events are downweighted like hit pixels
    gx0, gy0, _ = ref.sample_gradient(pixels)
    grad_sq = gx0 * gx0 + gy0 * gy0

    depth = raycast_depths(shape, pose, K, pixels, far=50.0)
    hit = np.isfinite(depth)
    if not np.any(hit):
        return q, valid, grad_sq

    d = depth[hit]
    u = pixels[hit]
    X = np.empty((len(d), 3))
    X[:, 0] = (u[:, 0] - K.cx) / K.fx * d
    X[:, 1] = (u[:, 1] - K.cy) / K.fy * d
    X[:, 2] = d

    T_rel = ref.pose.compose(pose.inverse())
    Xk = X @ T_rel.rotation.T + T_rel.translation
    in_front = Xk[:, 2] > 1e-6
    tau = np.zeros((len(d), 2))
    tau[in_front, 0] = K.fx * Xk[in_front, 0] / Xk[in_front, 2] + K.cx
    tau[in_front, 1] = K.fy * Xk[in_front, 1] / Xk[in_front, 2] + K.cy
    gx, gy, g_ok = ref.sample_gradient(tau)
    ok = in_front & g_ok

    u_norm = X[:, :2] / X[:, 2:]
    B = interaction_matrices(u_norm, d)
    flow_norm = B @ (-np.asarray(xi, dtype=float))
    flow_px_x = K.fx * flow_norm[:, 0]
    flow_px_y = K.fy * flow_norm[:, 1]
    q_hit = (gx * flow_px_x + gy * flow_px_y) * dt

    idx = np.flatnonzero(hit)
    q[idx[ok]] = q_hit[ok]
    grad_sq[idx[ok]] = (gx * gx + gy * gy)[ok]
    valid[idx[ok]] = True
    return q, valid, grad_sq


def predict_intensity_change(
    ref: ReferenceKeyframe,
    spline: SplineTrajectory,
    shape: SdfShape,
    K: CameraIntrinsics,
    u,
    t_frame: float,
    dt_frame: float,
):
    """Predicted intensity change -grad_L(tau(u)) . du/dt * dt at one pixel.

    Returns None (miss) when the raycast misses the object or the warp leaves
    the reference image.
    """
    state = spline.evaluate(t_frame)  # raises OutOfSpan
    q, valid, _ = predict_changes(
        ref, state.pose, state.velocity, shape, K,
        np.asarray(u, dtype=float)[None, :], dt_frame,
    )
    if not valid[0]:
        return None
    return float(-q[0])


@dataclass
class _FramePixels:
    """Per-frame sparse evaluation data, fixed for one segment optimization."""

    frame: EventBufferFrame
    pixels: np.ndarray  # (n, 2) float pixel coordinates
    measured: np.ndarray  # (n,) F values
    norm_measured: float
    sqrt_weights: np.ndarray = None  # (n,) frozen at the initial spline state


@dataclass
class SegmentProblem:
    """The four newest control poses and the buffer frames filling their segment."""

    spline: SplineTrajectory
    frames: list
    reference: ReferenceKeyframe
    shape: SdfShape
    camera: CameraIntrinsics
    _cache: list = field(default_factory=list, repr=False)

    def frame_pixels(self, config: TrackerConfig) -> list:
        if not self._cache:
            self._cache = [
                _build_frame_pixels(self, f) for f in self.frames
            ]
            kept = []
            for fp in self._cache:
                state = self.spline.evaluate(fp.frame.t_start)
                _, valid, grad_sq = predict_changes(
                    self.reference, state.pose, state.velocity, self.shape,
                    self.camera, fp.pixels, fp.frame.dt,
                )
                if not np.any(valid) or fp.norm_measured < NORM_EPS:
                    continue  # DegenerateFrame: dropped, see optimize_segment log
                # gradient weights frozen at the initial state: a pose-dependent
                # weight would reward sliding onto gradients without alignment
                fp.sqrt_weights = np.sqrt(
                    config.w_c**2 / (config.w_c**2 + grad_sq)
                )
                kept.append(fp)
            self._cache = kept
        return self._cache


def _build_frame_pixels(problem: SegmentProblem, frame: EventBufferFrame) -> _FramePixels:
    state = problem.spline.evaluate(frame.t_start)
    mask = _dilate(hit_mask(problem.shape, state.pose, problem.camera), ACTIVE_DILATION)
    mask |= frame.values != 0.0
    ys, xs = np.nonzero(mask)
    pixels = np.stack([xs, ys], axis=1).astype(float)
    measured = frame.values[ys, xs]
    return _FramePixels(
        frame=frame,
        pixels=pixels,
        measured=measured,
        norm_measured=float(np.linalg.norm(frame.values)),
    )


def frame_residuals(
    fp: _FramePixels,
    ref: ReferenceKeyframe,
    shape: SdfShape,
    K: CameraIntrinsics,
    pose: Pose,
    xi: np.ndarray,
    config: TrackerConfig,
) -> np.ndarray:
    """Weighted, normalized per-pixel residuals of one buffer frame."""
    q, valid, grad_sq = predict_changes(ref, pose, xi, shape, K, fp.pixels, fp.frame.dt)
    nq = math.hypot(float(np.linalg.norm(q[valid])), NORM_FLOOR)
    nf = max(fp.norm_measured, NORM_EPS)
    if fp.sqrt_weights is not None:
        sw = fp.sqrt_weights
    else:
        sw = np.sqrt(config.w_c**2 / (config.w_c**2 + grad_sq))
    return sw * (fp.measured / nf + q / nq)


def _frame_param_jacobian(fp, ref, shape, K, pose, xi, config):
    """Central-difference Jacobian of the frame residuals w.r.t. the 12 local
    parameters (left pose increment, spatial twist)."""
    n = fp.pixels.shape[0]
    J = np.zeros((n, 12))
    for m in range(6):
        delta = np.zeros(6)
        delta[m] = FD_STEP
        rp = frame_residuals(fp, ref, shape, K, exp_se3(delta).compose(pose), xi, config)
        rm = frame_residuals(fp, ref, shape, K, exp_se3(-delta).compose(pose), xi, config)
        J[:, m] = (rp - rm) / (2.0 * FD_STEP)
    for m in range(6):
        dxi = np.zeros(6)
        dxi[m] = FD_STEP
        rp = frame_residuals(fp, ref, shape, K, pose, xi + dxi, config)
        rm = frame_residuals(fp, ref, shape, K, pose, xi - dxi, config)
        J[:, 6 + m] = (rp - rm) / (2.0 * FD_STEP)
    return J


def data_term(problem: SegmentProblem, config: TrackerConfig):
    """Total data cost and stacked residual vector at the problem's spline."""
    residuals = []
    for fp in problem.frame_pixels(config):
        state = problem.spline.evaluate(fp.frame.t_start)
        residuals.append(
            frame_residuals(fp, problem.reference, problem.shape, problem.camera,
                            state.pose, state.velocity, config)
        )
    r = np.concatenate(residuals) if residuals else np.zeros(0)
    return float(r @ r), r


def regularizer(problem: SegmentProblem, config: TrackerConfig):
    """Acceleration (and optional velocity) prior residuals at frame start times."""
    residuals = []
    for fp in problem.frame_pixels(config):
        state = problem.spline.evaluate(fp.frame.t_start)
        residuals.append(math.sqrt(config.lambda_reg) * state.acceleration)
        if config.lambda_reg2 > 0:
            residuals.append(
                math.sqrt(config.lambda_reg2 * fp.frame.dt) * state.velocity
            )
    r = np.concatenate(residuals) if residuals else np.zeros(0)
    return float(r @ r), r


def _segment_residuals(problem: SegmentProblem, spline: SplineTrajectory, config: TrackerConfig):
    parts = []
    for fp in problem.frame_pixels(config):
        state = spline.evaluate(fp.frame.t_start)
        parts.append(
            frame_residuals(fp, problem.reference, problem.shape, problem.camera,
                            state.pose, state.velocity, config)
        )
        parts.append(math.sqrt(config.lambda_reg) * state.acceleration)
        if config.lambda_reg2 > 0:
            parts.append(math.sqrt(config.lambda_reg2 * fp.frame.dt) * state.velocity)
    return np.concatenate(parts) if parts else np.zeros(0)


def segment_residuals_and_jacobian(
    problem: SegmentProblem, spline: SplineTrajectory, config: TrackerConfig
):
    """Residual stack and its Jacobian w.r.t. the 24 local coordinates of the
    four active control poses (left-multiplicative increments)."""
    rows = []
    jacs = []
    k_first = spline.num_knots - 4
    for fp in problem.frame_pixels(config):
        t = fp.frame.t_start
        state = spline.evaluate(t)
        active = spline.active_control_indices(t)
        j_pose, j_vel, j_acc = spline.active_segment_jacobians(t)

        r = frame_residuals(fp, problem.reference, problem.shape, problem.camera,
                            state.pose, state.velocity, config)
        J12 = _frame_param_jacobian(fp, problem.reference, problem.shape, problem.camera,
                                    state.pose, state.velocity, config)
        J = np.zeros((len(r), 24))
        Ja = np.zeros((6, 24))
        Jv = np.zeros((6, 24)) if config.lambda_reg2 > 0 else None
        for slot, k in enumerate(active):
            col = (k - k_first) * 6
            if col < 0 or col >= 24:
                continue
            J[:, col:col + 6] = J12[:, :6] @ j_pose[slot] + J12[:, 6:] @ j_vel[slot]
            Ja[:, col:col + 6] = math.sqrt(config.lambda_reg) * j_acc[slot]
            if Jv is not None:
                Jv[:, col:col + 6] = math.sqrt(config.lambda_reg2 * fp.frame.dt) * j_vel[slot]
        rows.append(r)
        jacs.append(J)
        rows.append(math.sqrt(config.lambda_reg) * state.acceleration)
        jacs.append(Ja)
        if Jv is not None:
            rows.append(math.sqrt(config.lambda_reg2 * fp.frame.dt) * state.velocity)
            jacs.append(Jv)
    if not rows:
        return np.zeros(0), np.zeros((0, 24))
    return np.concatenate(rows), np.vstack(jacs)


def _apply_delta(spline: SplineTrajectory, delta: np.ndarray) -> SplineTrajectory:
    controls = list(spline.control_poses)
    k_first = spline.num_knots - 4
    for slot in range(4):
        d = delta[slot * 6:(slot + 1) * 6]
        controls[k_first + slot] = exp_se3(d).compose(controls[k_first + slot])
    return SplineTrajectory(controls, spline.knot_interval, spline.t0)


def optimize_segment(problem: SegmentProblem, config: TrackerConfig):
    """Levenberg-Marquardt over the four newest control poses.

    Returns (spline, stats dict). Raises SolverDiverged on failure.
    """
    dropped = len(problem.frames) - len(problem.frame_pixels(config))
    if not problem.frame_pixels(config):
        raise DegenerateFrame("all buffer frames in the segment are degenerate")

    result = levenberg_marquardt(
        residual_and_jacobian=lambda s: _with_jac(problem, s, config),
        cost_at=lambda s: _cost_only(problem, s, config),
        apply_step=_apply_delta,
        state=problem.spline,
        max_iterations=config.max_iterations,
        convergence_tol=config.convergence_tol,
    )
    stats = {
        "cost": result.cost,
        "iterations": result.iterations,
        "frames": len(problem.frame_pixels(config)),
        "dropped_frames": dropped,
        "converged": result.converged,
    }
    return result.state, stats


def _with_jac(problem, spline, config):
    return segment_residuals_and_jacobian(problem, spline, config)


def _cost_only(problem, spline, config):
    r = _segment_residuals(problem, spline, config)
    return float(r @ r)


def advance(spline: SplineTrajectory) -> SplineTrajectory:
    """Append a constant-velocity extrapolated control pose."""
    return spline.push_control_pose(spline.extrapolated_control())
