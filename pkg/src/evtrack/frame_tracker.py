"""Slow tracking layer: direct photometric refinement of keyframe poses.

Keyframe poses are optimized in a sliding window by aligning image
intensities at keypoints between each keyframe and all older keyframes,
under a robust Cauchy loss (applied exactly via the square-rooted kernel,
so the Levenberg-Marquardt cost is the true robust cost). Keyframes that
leave the window are marginalized with first-estimate Jacobians into a
Gaussian prior over the remaining poses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import RefinerConfig
from .errors import NoKeypoints
from .geometry import CameraIntrinsics, Pose, exp_se3, log_se3
from .nlls import levenberg_marquardt
from .sdf import SdfShape, raycast_depths, silhouette_map
from .spline import SplineTrajectory  # noqa: F401  (type for callers)

FD_STEP = 1e-6
NMS_CELL = 8


def smooth_image(img: np.ndarray) -> np.ndarray:
    """3x3 binomial blur; makes subpixel bilinear sampling consistent on the
    hard-edged rendered images."""
    img = np.asarray(img, dtype=float)
    p = np.pad(img, 1, mode="edge")
    k = np.array([1.0, 2.0, 1.0]) / 4.0
    h = k[0] * p[:, :-2] + k[1] * p[:, 1:-1] + k[2] * p[:, 2:]
    return k[0] * h[:-2, :] + k[1] * h[1:-1, :] + k[2] * h[2:, :]


def erode_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary erosion with a square structuring element of the given radius."""
    out = mask.copy()
    for _ in range(radius):
        m = np.zeros_like(out)
        m[1:-1, 1:-1] = (
            out[1:-1, 1:-1]
            & out[:-2, 1:-1] & out[2:, 1:-1] & out[1:-1, :-2] & out[1:-1, 2:]
            & out[:-2, :-2] & out[:-2, 2:] & out[2:, :-2] & out[2:, 2:]
        )
        out = m
    return out


def bilinear_sample(img: np.ndarray, uv: np.ndarray):
    """Bilinear image samples; returns (values, valid)."""
    h, w = img.shape
    x, y = uv[:, 0], uv[:, 1]
    valid = (x >= 0) & (x <= w - 1 - 1e-9) & (y >= 0) & (y <= h - 1 - 1e-9)
    xs = np.where(valid, x, 0.0)
    ys = np.where(valid, y, 0.0)
    x0 = np.minimum(np.floor(xs).astype(int), w - 2)
    y0 = np.minimum(np.floor(ys).astype(int), h - 2)
    fx = xs - x0
    fy = ys - y0
    v = (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x0 + 1] * fx * (1 - fy)
        + img[y0 + 1, x0] * (1 - fx) * fy
        + img[y0 + 1, x0 + 1] * fx * fy
    )
    return np.where(valid, v, 0.0), valid


@dataclass
class Keyframe:
    image: np.ndarray  # intensity in [0, 1]
    timestamp: float
    pose: Pose  # object pose in the camera frame, updated by the optimizer
    keypoints: np.ndarray  # (n, 2)
    kf_id: int = -1
    # per-keypoint patch pixel coordinates (n*p, 2) and reference intensities
    patch_pixels: np.ndarray = field(default=None, repr=False)
    patch_values: np.ndarray = field(default=None, repr=False)


def detect_keypoints(
    image: np.ndarray,
    shape: SdfShape,
    pose: Pose,
    K: CameraIntrinsics,
    max_keypoints: int,
    zeta: float = 50.0,
    samples: int = 32,
    sigma_threshold: float = 0.95,
    border: int = 0,
) -> np.ndarray:
    """Top gradient-magnitude corners inside the object silhouette.

    Scores use squared central-difference gradients with one maximum per
    8x8 cell; candidates must satisfy sigma > 0.95 and a raycast hit.
    ``border`` erodes the silhouette mask so that whole patches around the
    keypoints stay on the object (boundary pixels mix in background and
    break photometric constancy). Deterministic ordering: score descending,
    ties row-major.
    """
    img = np.asarray(image, dtype=float)
    h, w = img.shape
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = (img[:, 2:] - img[:, :-2]) * 0.5
    gy[1:-1, :] = (img[2:, :] - img[:-2, :]) * 0.5
    score = gx * gx + gy * gy

    sil = silhouette_map(shape, pose, K, zeta=zeta, samples=samples)
    mask = sil > sigma_threshold
    if border > 0:
        mask = erode_mask(mask, border)
    if not np.any(mask):
        raise NoKeypoints("object silhouette mask is empty")

    cand = []
    for y0 in range(0, h, NMS_CELL):
        for x0 in range(0, w, NMS_CELL):
            cell_mask = mask[y0:y0 + NMS_CELL, x0:x0 + NMS_CELL]
            if not np.any(cell_mask):
                continue
            cell = np.where(cell_mask, score[y0:y0 + NMS_CELL, x0:x0 + NMS_CELL], -1.0)
            flat = int(np.argmax(cell))
            cy, cx = divmod(flat, cell.shape[1])
            s = cell[cy, cx]
            if s <= 0:
                continue
            cand.append((-s, y0 + cy, x0 + cx))
    if not cand:
        raise NoKeypoints("no corners with positive score inside the silhouette")
    cand.sort()

    pts = np.array([[c[2], c[1]] for c in cand], dtype=float)
    depths = raycast_depths(shape, pose, K, pts, far=50.0)
    pts = pts[np.isfinite(depths)]
    if len(pts) == 0:
        raise NoKeypoints("no keypoints with a raycast hit")
    return pts[:max_keypoints]


def warp_points(
    pixels: np.ndarray,
    T_i: Pose,
    T_j: Pose,
    shape: SdfShape,
    K: CameraIntrinsics,
):
    """Warp pixels of frame i into frame j through the object surface.

    Returns (warped (n, 2), valid). Misses (no raycast hit, point behind the
    target camera, or out of bounds) are invalid.
    """
    n = pixels.shape[0]
    warped = np.zeros((n, 2))
    depth = raycast_depths(shape, T_i, K, pixels, far=50.0)
    hit = np.isfinite(depth)
    if not np.any(hit):
        return warped, hit

    d = depth[hit]
    u = pixels[hit]
    X = np.empty((len(d), 3))
    X[:, 0] = (u[:, 0] - K.cx) / K.fx * d
    X[:, 1] = (u[:, 1] - K.cy) / K.fy * d
    X[:, 2] = d
    T_rel = T_j.compose(T_i.inverse())
    Xj = X @ T_rel.rotation.T + T_rel.translation
    ok = Xj[:, 2] > 1e-6
    wp = np.zeros((len(d), 2))
    wp[ok, 0] = K.fx * Xj[ok, 0] / Xj[ok, 2] + K.cx
    wp[ok, 1] = K.fy * Xj[ok, 1] / Xj[ok, 2] + K.cy
    in_bounds = (
        (wp[:, 0] >= 0) & (wp[:, 0] <= K.width - 1 - 1e-9)
        & (wp[:, 1] >= 0) & (wp[:, 1] <= K.height - 1 - 1e-9)
    )
    ok &= in_bounds
    if np.any(ok):
        # visibility in the target view: the surface point must be the first
        # hit along the warped ray, or another part of the object occludes it
        d_j = raycast_depths(shape, T_j, K, wp[ok], far=50.0)
        visible = np.isfinite(d_j) & (d_j > Xj[ok, 2] - 1e-3)
        ok[np.flatnonzero(ok)[~visible]] = False
    idx = np.flatnonzero(hit)
    valid = np.zeros(n, dtype=bool)
    valid[idx[ok]] = True
    warped[idx[ok]] = wp[ok]
    return warped, valid


def warp(u, T_i: Pose, T_j: Pose, shape: SdfShape, K: CameraIntrinsics):
    """Single-pixel warp; returns the warped (2,) point or None on miss."""
    w, valid = warp_points(np.asarray(u, dtype=float)[None, :], T_i, T_j, shape, K)
    return w[0] if valid[0] else None


def make_keyframe(
    image: np.ndarray,
    timestamp: float,
    pose: Pose,
    shape: SdfShape,
    K: CameraIntrinsics,
    config: RefinerConfig,
    kf_id: int,
    zeta: float = 50.0,
    samples: int = 32,
) -> Keyframe:
    img = smooth_image(image)
    r = config.patch_radius
    kps = detect_keypoints(
        img, shape, pose, K, config.max_keypoints, zeta, samples, border=r + 4
    )
    offs = np.array([(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)], dtype=float)
    patch = (kps[:, None, :] + offs[None, :, :]).reshape(-1, 2)
    vals, _ = bilinear_sample(img, patch)
    return Keyframe(
        image=img,
        timestamp=timestamp,
        pose=pose,
        keypoints=kps,
        kf_id=kf_id,
        patch_pixels=patch,
        patch_values=vals,
    )


def photometric_residual(
    kf_i: Keyframe,
    kf_j: Keyframe,
    u,
    shape: SdfShape,
    K: CameraIntrinsics,
    config: RefinerConfig,
) -> np.ndarray:
    """Patch residual I_i(u + o) - I_j(warp(u + o)) with per-pixel warps.

    Miss pixels are excluded from the returned vector.
    """
    r = config.patch_radius
    offs = np.array([(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)], dtype=float)
    pix = np.asarray(u, dtype=float)[None, :] + offs
    ref_vals, ref_ok = bilinear_sample(kf_i.image, pix)
    warped, valid = warp_points(pix, kf_i.pose, kf_j.pose, shape, K)
    tgt_vals, tgt_ok = bilinear_sample(kf_j.image, warped)
    keep = ref_ok & valid & tgt_ok
    return (ref_vals - tgt_vals)[keep]


# residual charged to a patch pixel whose warp leaves the object or image
# during optimization; without it, pushing pixels off the object would zero
# their residuals and the cost would reward divergence
MISS_PENALTY = 0.5


def _pair_residuals(kf_i, kf_j, T_i, T_j, shape, K):
    """Raw residual vector over all patch pixels of kf_i.

    Invalid entries (raycast miss, behind camera, out of bounds) carry the
    constant MISS_PENALTY; the caller zeroes pixels outside its frozen mask.
    """
    warped, valid = warp_points(kf_i.patch_pixels, T_i, T_j, shape, K)
    tgt, ok = bilinear_sample(kf_j.image, warped)
    r = kf_i.patch_values - tgt
    return np.where(valid & ok, r, MISS_PENALTY), valid & ok


def cauchy_sqrt(r: np.ndarray, scale: float) -> np.ndarray:
    """Square-rooted Cauchy kernel: sign(r) * sqrt(rho(r)), rho = (c^2/2) log(1 + r^2/c^2)."""
    c2 = scale * scale
    return np.sign(r) * np.sqrt(0.5 * c2 * np.log1p(r * r / c2))


@dataclass
class GaussianPrior:
    """Quadratic prior cost delta^T H delta + 2 g^T delta over keyframe ids,
    with delta_i = log(T_i * lin_i^{-1}) relative to frozen linearization points."""

    ids: list
    lin_poses: list
    H: np.ndarray
    g: np.ndarray

    def sqrt_form(self):
        e, V = np.linalg.eigh(0.5 * (self.H + self.H.T))
        keep = e > 1e-9
        U = (np.sqrt(e[keep])[:, None]) * V[:, keep].T
        c = (1.0 / np.sqrt(e[keep]))[:, None] * V[:, keep].T @ self.g
        return U, c.ravel()

    def delta(self, poses_by_id: dict) -> np.ndarray:
        parts = [
            log_se3(poses_by_id[i].compose(lin.inverse()))
            for i, lin in zip(self.ids, self.lin_poses)
        ]
        return np.concatenate(parts)


@dataclass
class WindowState:
    keyframes: list = field(default_factory=list)
    prior: GaussianPrior | None = None
    next_id: int = 0

    def add_keyframe(self, kf: Keyframe) -> None:
        kf.kf_id = self.next_id
        self.next_id += 1
        self.keyframes.append(kf)


def keyframe_policy(current_pose: Pose, last_kf_pose: Pose, config: RefinerConfig) -> bool:
    """True when the object travelled beyond the translation or rotation threshold."""
    rel = last_kf_pose.inverse().compose(current_pose)
    trans = float(np.linalg.norm(current_pose.translation - last_kf_pose.translation))
    rot_deg = math.degrees(rel.rotation_angle())
    return trans > config.trans_threshold or rot_deg > config.rot_threshold_deg


ANCHOR_INFO = 1e2  # weak gauge prior on the first keyframe


def _window_system(state: WindowState, shape, K, config, masks=None):
    """Build residual/jacobian closures for the current window."""
    kfs = state.keyframes
    n = len(kfs)
    pairs = [(i, j) for i in range(1, n) for j in range(i - 1, -1, -1)]

    if masks is None:
        masks = {}
        for i, j in pairs:
            _, m = _pair_residuals(kfs[i], kfs[j], kfs[i].pose, kfs[j].pose, shape, K)
            masks[(i, j)] = m

    prior = state.prior
    if prior is not None:
        U, c = prior.sqrt_form()
        id_to_slot = {kf.kf_id: s for s, kf in enumerate(kfs)}
        prior_slots = [id_to_slot[i] for i in prior.ids]
    anchor_slot = 0
    anchor_lin = kfs[0].pose

    def residuals(poses):
        parts = []
        if prior is not None:
            poses_by_id = {kf.kf_id: poses[id_to_slot[kf.kf_id]] for kf in kfs}
            parts.append(U @ prior.delta(poses_by_id) + c)
        else:
            d0 = log_se3(poses[anchor_slot].compose(anchor_lin.inverse()))
            parts.append(math.sqrt(ANCHOR_INFO) * d0)
        for i, j in pairs:
            r, _ = _pair_residuals(kfs[i], kfs[j], poses[i], poses[j], shape, K)
            r = np.where(masks[(i, j)], r, 0.0)
            parts.append(cauchy_sqrt(r, config.cauchy_scale))
        return np.concatenate(parts)

    def residuals_and_jacobian(poses):
        rows = []
        jacs = []
        if prior is not None:
            poses_by_id = {kf.kf_id: poses[id_to_slot[kf.kf_id]] for kf in kfs}
            rows.append(U @ prior.delta(poses_by_id) + c)
            Jp = np.zeros((U.shape[0], 6 * n))
            for pi, slot in enumerate(prior_slots):
                # first-estimate Jacobian: identity chain on the local increment
                Jp[:, 6 * slot:6 * slot + 6] = U[:, 6 * pi:6 * pi + 6]
            jacs.append(Jp)
        else:
            d0 = log_se3(poses[anchor_slot].compose(anchor_lin.inverse()))
            rows.append(math.sqrt(ANCHOR_INFO) * d0)
            Ja = np.zeros((6, 6 * n))
            Ja[:, 6 * anchor_slot:6 * anchor_slot + 6] = math.sqrt(ANCHOR_INFO) * np.eye(6)
            jacs.append(Ja)
        for i, j in pairs:
            mask = masks[(i, j)]
            base, _ = _pair_residuals(kfs[i], kfs[j], poses[i], poses[j], shape, K)
            base = np.where(mask, base, 0.0)
            rows.append(cauchy_sqrt(base, config.cauchy_scale))
            Jij = np.zeros((len(base), 6 * n))
            for which, slot in ((0, i), (1, j)):
                for m in range(6):
                    delta = np.zeros(6)
                    delta[m] = FD_STEP
                    Tp = [poses[i], poses[j]]
                    Tm = [poses[i], poses[j]]
                    Tp[which] = exp_se3(delta).compose(Tp[which])
                    Tm[which] = exp_se3(-delta).compose(Tm[which])
                    rp, _ = _pair_residuals(kfs[i], kfs[j], Tp[0], Tp[1], shape, K)
                    rm, _ = _pair_residuals(kfs[i], kfs[j], Tm[0], Tm[1], shape, K)
                    rp = cauchy_sqrt(np.where(mask, rp, 0.0), config.cauchy_scale)
                    rm = cauchy_sqrt(np.where(mask, rm, 0.0), config.cauchy_scale)
                    Jij[:, 6 * slot + m] = (rp - rm) / (2.0 * FD_STEP)
            jacs.append(Jij)
        return np.concatenate(rows), np.vstack(jacs)

    return residuals, residuals_and_jacobian, masks


def optimize_window(state: WindowState, shape: SdfShape, K: CameraIntrinsics, config: RefinerConfig):
    """Refine all keyframe poses in the window; returns a stats dict."""
    kfs = state.keyframes
    if len(kfs) < 2:
        return {"cost": 0.0, "iterations": 0, "residuals": 0, "converged": True}

    residuals, residuals_and_jacobian, _ = _window_system(state, shape, K, config)

    def apply_step(poses, delta):
        return [
            exp_se3(delta[6 * s:6 * s + 6]).compose(p) for s, p in enumerate(poses)
        ]

    poses0 = [kf.pose for kf in kfs]
    r0 = residuals(poses0)
    result = levenberg_marquardt(
        residual_and_jacobian=residuals_and_jacobian,
        cost_at=lambda poses: float(np.sum(residuals(poses) ** 2)),
        apply_step=apply_step,
        state=poses0,
        max_iterations=config.max_iterations,
        convergence_tol=config.convergence_tol,
    )
    for kf, pose in zip(kfs, result.state):
        kf.pose = pose
    return {
        "cost_before": float(r0 @ r0),
        "cost": result.cost,
        "iterations": result.iterations,
        "residuals": len(r0),
        "converged": result.converged,
    }


def marginalize_linear(H: np.ndarray, g: np.ndarray, k: int):
    """Schur-complement the first k variables out of the quadratic
    delta^T H delta + 2 g^T delta; returns (H', g') over the remainder."""
    Hmm = H[:k, :k]
    Hmr = H[:k, k:]
    Hrr = H[k:, k:]
    gm = g[:k]
    gr = g[k:]
    # solve with a pseudo-inverse to tolerate gauge-deficient blocks
    Hmm_inv = np.linalg.pinv(0.5 * (Hmm + Hmm.T), rcond=1e-12)
    H_new = Hrr - Hmr.T @ Hmm_inv @ Hmr
    g_new = gr - Hmr.T @ Hmm_inv @ gm
    return 0.5 * (H_new + H_new.T), g_new


def marginalize_oldest(state: WindowState, shape: SdfShape, K: CameraIntrinsics, config: RefinerConfig) -> WindowState:
    """Remove the oldest keyframe, folding its information into the prior.

    All residual terms touching the departing keyframe (and the existing
    prior) are linearized at the current estimates; the departing 6 variables
    are eliminated by Schur complement. Linearization points are frozen into
    the new prior (first-estimate Jacobians).
    """
    kfs = state.keyframes
    if len(kfs) < 2:
        raise ValueError("cannot marginalize from a window of fewer than 2 keyframes")
    n = len(kfs)
    dim = 6 * n
    H = np.zeros((dim, dim))
    g = np.zeros(dim)

    # existing prior (or the gauge anchor) contributes at its frozen points
    if state.prior is not None:
        U, c = state.prior.sqrt_form()
        id_to_slot = {kf.kf_id: s for s, kf in enumerate(kfs)}
        J = np.zeros((U.shape[0], dim))
        for pi, pid in enumerate(state.prior.ids):
            slot = id_to_slot[pid]
            J[:, 6 * slot:6 * slot + 6] = U[:, 6 * pi:6 * pi + 6]
        poses_by_id = {kf.kf_id: kf.pose for kf in kfs}
        r = U @ state.prior.delta(poses_by_id) + c
        H += J.T @ J
        g += J.T @ r
    else:
        H[0:6, 0:6] += ANCHOR_INFO * np.eye(6)

    # photometric pairs involving the departing keyframe (slot 0)
    for i in range(1, n):
        pair_list = [(i, 0)]
        for a, b in pair_list:
            base, mask = _pair_residuals(kfs[a], kfs[b], kfs[a].pose, kfs[b].pose, shape, K)
            base = np.where(mask, base, 0.0)
            r = cauchy_sqrt(base, config.cauchy_scale)
            J = np.zeros((len(r), dim))
            for which, slot in ((0, a), (1, b)):
                for m in range(6):
                    delta = np.zeros(6)
                    delta[m] = FD_STEP
                    Tp = [kfs[a].pose, kfs[b].pose]
                    Tm = [kfs[a].pose, kfs[b].pose]
                    Tp[which] = exp_se3(delta).compose(Tp[which])
                    Tm[which] = exp_se3(-delta).compose(Tm[which])
                    rp, _ = _pair_residuals(kfs[a], kfs[b], Tp[0], Tp[1], shape, K)
                    rm, _ = _pair_residuals(kfs[a], kfs[b], Tm[0], Tm[1], shape, K)
                    rp = cauchy_sqrt(np.where(mask, rp, 0.0), config.cauchy_scale)
                    rm = cauchy_sqrt(np.where(mask, rm, 0.0), config.cauchy_scale)
                    J[:, 6 * slot + m] = (rp - rm) / (2.0 * FD_STEP)
            H += J.T @ J
            g += J.T @ r

    H_new, g_new = marginalize_linear(H, g, 6)
    remaining = kfs[1:]
    prior = GaussianPrior(
        ids=[kf.kf_id for kf in remaining],
        lin_poses=[kf.pose for kf in remaining],
        H=H_new,
        g=g_new,
    )
    return WindowState(keyframes=remaining, prior=prior, next_id=state.next_id)
