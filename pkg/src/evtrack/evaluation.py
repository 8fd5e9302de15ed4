"""Trajectory accuracy metrics (ATE / RPE) and trajectory overlay rendering."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateAlignment, NoMatches, PathTooShort
from .geometry import CameraIntrinsics, Pose
from .sdf import SdfShape, silhouette_map

DEFAULT_ASSOC_TOL = 0.005  # s
DEFAULT_FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5)


@dataclass
class Trajectory:
    times: np.ndarray  # (n,) strictly increasing
    poses: list  # list of Pose

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) == 0:
            raise ValueError("trajectory must be nonempty")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])

    def pose_near(self, t: float) -> Pose:
        i = int(np.argmin(np.abs(self.times - t)))
        return self.poses[i]

    def pose_interp(self, t: float) -> Pose:
        """Geodesic interpolation between bracketing samples; constant-velocity
        extrapolation beyond the ends."""
        from .geometry import exp_se3, log_se3

        if len(self.times) == 1:
            return self.poses[0]
        j = int(np.clip(np.searchsorted(self.times, t), 1, len(self.times) - 1))
        i = j - 1
        a = (t - self.times[i]) / (self.times[j] - self.times[i])
        rel = log_se3(self.poses[j].compose(self.poses[i].inverse()))
        return exp_se3(a * rel).compose(self.poses[i])

    def transformed(self, T: Pose) -> "Trajectory":
        return Trajectory(self.times.copy(), [T.compose(p) for p in self.poses])


def associate(est: Trajectory, gt: Trajectory, max_dt: float = DEFAULT_ASSOC_TOL):
    """Greedy nearest-timestamp matching; each gt pose used at most once."""
    if max_dt <= 0:
        raise ValueError("max_dt must be positive")
    cands = []
    for i, t in enumerate(est.times):
        j = int(np.searchsorted(gt.times, t))
        for jj in (j - 1, j):
            if 0 <= jj < len(gt.times):
                d = abs(gt.times[jj] - t)
                if d <= max_dt:
                    cands.append((d, i, jj))
    cands.sort()
    used_i, used_j = set(), set()
    pairs = []
    for _, i, j in cands:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        pairs.append((i, j))
    if not pairs:
        raise NoMatches("no timestamp associations within tolerance")
    pairs.sort()
    return pairs


def align_rigid(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Closed-form least-squares SE(3) alignment (no scale) mapping src to dst."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= 1e-12:
        raise DegenerateAlignment("positions coincident or collinear")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = cd - R @ cs
    return Pose(R, t)


def ate_rmse(est: Trajectory, gt: Trajectory, max_dt: float = DEFAULT_ASSOC_TOL) -> float:
    """Translational RMSE after global rigid alignment of est to gt."""
    pairs = associate(est, gt, max_dt)
    if len(pairs) < 3:
        raise NoMatches("need at least 3 associated pairs for ATE")
    pe = np.array([est.poses[i].translation for i, _ in pairs])
    pg = np.array([gt.poses[j].translation for _, j in pairs])
    T = align_rigid(pe, pg)
    res = pe @ T.rotation.T + T.translation - pg
    return float(np.sqrt(np.mean(np.sum(res * res, axis=1))))


def rpe(
    est: Trajectory,
    gt: Trajectory,
    fractions=DEFAULT_FRACTIONS,
    max_dt: float = DEFAULT_ASSOC_TOL,
):
    """Relative pose error over path-length separations.

    For each fraction of the total ground-truth path length, relative-pose
    residuals are collected over all index pairs separated by at least that
    arc length (nearest sample at or beyond it); the final measure is the
    mean over fractions of the per-fraction RMSE.

    Returns (transl_rmse_m, rot_rmse_deg, per_fraction) where per_fraction is
    a list of (fraction, transl_rmse_m, rot_rmse_deg).
    """
    pairs = associate(est, gt, max_dt)
    gt_poses = [gt.poses[j] for _, j in pairs]
    est_poses = [est.poses[i] for i, _ in pairs]
    pos = np.array([p.translation for p in gt_poses])
    seg = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = float(s[-1])
    if total <= 0:
        raise PathTooShort("ground-truth path length is zero")

    per_fraction = []
    for f in fractions:
        target = f * total
        terr = []
        rerr = []
        for i in range(len(s)):
            j = int(np.searchsorted(s, s[i] + target))
            if j >= len(s):
                break
            rel_gt = gt_poses[i].inverse().compose(gt_poses[j])
            rel_est = est_poses[i].inverse().compose(est_poses[j])
            err = rel_gt.inverse().compose(rel_est)
            terr.append(np.linalg.norm(err.translation))
            rerr.append(math.degrees(err.rotation_angle()))
        if not terr:
            continue
        per_fraction.append(
            (f, float(np.sqrt(np.mean(np.square(terr)))), float(np.sqrt(np.mean(np.square(rerr)))))
        )
    if not per_fraction:
        raise PathTooShort("no pose pairs reach the requested path lengths")
    transl = float(np.mean([x[1] for x in per_fraction]))
    rot = float(np.mean([x[2] for x in per_fraction]))
    return transl, rot, per_fraction


def _mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of the mask with at least one 4-neighbor outside it."""
    interior = mask.copy()
    interior[1:, :] &= mask[:-1, :]
    interior[:-1, :] &= mask[1:, :]
    interior[:, 1:] &= mask[:, :-1]
    interior[:, :-1] &= mask[:, 1:]
    return mask & ~interior


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.clip(rgb, 0.0, 1.0)
    data = (rgb * 255.0 + 0.5).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def render_overlay(
    frames,
    trajectory: Trajectory,
    shape: SdfShape,
    K: CameraIntrinsics,
    out_dir,
    samples: int = 8,
    name: str = "overlay",
    sigma_threshold: float = 0.95,
    zeta: float = 200.0,  # sharp enough that the level set hugs the hit mask
):
    """Draw silhouette contours at sampled trajectory poses over the first frame.

    Contours are colored red (start) to blue (end). Returns the written path.
    """
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    if not frames:
        raise ValueError("no frames to draw on")
    os.makedirs(out_dir, exist_ok=True)
    base = np.asarray(frames[0][1], dtype=float)
    rgb = np.stack([base, base, base], axis=2)

    n = min(samples, len(trajectory))
    idxs = np.unique(np.linspace(0, len(trajectory) - 1, n).astype(int))
    t0, t1 = trajectory.times[0], trajectory.times[-1]
    span = max(t1 - t0, 1e-12)
    for i in idxs:
        pose = trajectory.poses[i]
        mask = silhouette_map(shape, pose, K, zeta=zeta) > sigma_threshold
        contour = _mask_boundary(mask)
        a = (trajectory.times[i] - t0) / span
        color = np.array([1.0 - a, 0.0, a])
        rgb[contour] = color
    path = os.path.join(out_dir, f"{name}.ppm")
    write_ppm(path, rgb)
    return path
