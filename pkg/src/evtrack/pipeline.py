"""End-to-end tracking pipeline combining the fast and slow layers.

The fast layer fits the newest spline segment to event buffer frames as they
arrive. Whenever the optimized span passes a camera frame timestamp, the
frame becomes a keyframe candidate for the slow layer, which refines the
window of keyframe poses photometrically and republishes the newest keyframe
as the fast layer's reference. Modes:

    combined    both layers (default)
    event_only  fast layer only; references adopt spline poses unrefined
    frame_only  slow layer only, driven directly by camera frames
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

import numpy as np

from . import event_tracker as et
from . import frame_tracker as ft
from .config import RefinerConfig, TrackerConfig
from .errors import (
    AngleNearPi,
    BehindCamera,
    DegenerateFrame,
    NoKeypoints,
    NonPositiveDepth,
    SolverDiverged,
    TrackingDiverged,
)
from .evaluation import Trajectory
from .events import EventArray, accumulate
from .geometry import CameraIntrinsics, Pose
from .sdf import SdfShape
from .spline import SplineTrajectory

MAX_TRANSLATION = 50.0
MIN_DEPTH = 0.02

# failures that end a run with a partial result instead of crashing it:
# an estimate leaving the trusted region, a solver breakdown, a lost
# silhouette, or pose arithmetic degenerating (angle near pi, depth <= 0)
DIVERGENCE_ERRORS = (
    TrackingDiverged,
    SolverDiverged,
    NoKeypoints,
    AngleNearPi,
    BehindCamera,
    NonPositiveDepth,
    FloatingPointError,
    np.linalg.LinAlgError,
)


@dataclass
class PipelineResult:
    event_trajectory: Trajectory | None
    keyframe_trajectory: Trajectory | None
    diverged: bool
    reason: str = ""
    log: list = field(default_factory=list)


class _Mailbox:
    """Single-slot latest-wins mailbox between the fast and slow layers."""

    def __init__(self):
        self._cond = threading.Condition()
        self._item = None
        self._closed = False

    def post(self, item) -> None:
        with self._cond:
            self._item = item
            self._cond.notify()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify()

    def take(self):
        """Blocks for the next item; returns None once closed and drained."""
        with self._cond:
            while self._item is None and not self._closed:
                self._cond.wait()
            item, self._item = self._item, None
            return item


def _check_pose(pose: Pose, where: str) -> None:
    t = pose.translation
    if not np.all(np.isfinite(t)) or np.linalg.norm(t) > MAX_TRANSLATION:
        raise TrackingDiverged(f"{where}: unbounded translation {t}")
    if t[2] < MIN_DEPTH:
        raise TrackingDiverged(f"{where}: object depth {t[2]:.3f} m collapsed")


class _SlowLayer:
    """Sliding-window photometric refinement and reference publication."""

    def __init__(self, shape, K, refiner_cfg, zeta, samples, log):
        self.shape = shape
        self.K = K
        self.cfg = refiner_cfg
        self.zeta = zeta
        self.samples = samples
        self.log = log
        self.window = ft.WindowState()
        self.last_kf_pose = None
        self.kf_records = {}  # kf_id -> [timestamp, pose]

    def consider(self, t_frame: float, image: np.ndarray, pose: Pose):
        """Maybe create a keyframe and refine; returns the refined newest
        keyframe pose (for reference publication) or None."""
        if self.last_kf_pose is not None and not ft.keyframe_policy(
            pose, self.last_kf_pose, self.cfg
        ):
            return None
        kf = ft.make_keyframe(
            image, t_frame, pose, self.shape, self.K, self.cfg,
            kf_id=-1, zeta=self.zeta, samples=self.samples,
        )
        self.window.add_keyframe(kf)
        stats = ft.optimize_window(self.window, self.shape, self.K, self.cfg)
        for k in self.window.keyframes:
            self.kf_records[k.kf_id] = [k.timestamp, k.pose]
        if len(self.window.keyframes) > self.cfg.window_size:
            self.window = ft.marginalize_oldest(self.window, self.shape, self.K, self.cfg)
        newest = self.window.keyframes[-1]
        self.last_kf_pose = newest.pose
        _check_pose(newest.pose, f"window refinement at t={t_frame:.4f}")
        self.log.append({
            "layer": "frames", "t": t_frame,
            "keyframes": len(self.window.keyframes), **stats,
        })
        return newest

    def trajectory(self):
        if not self.kf_records:
            return None
        items = sorted(self.kf_records.values(), key=lambda r: r[0])
        return Trajectory(np.array([r[0] for r in items]), [r[1] for r in items])


def run_tracking(
    events: EventArray,
    frames: list,
    init: Trajectory,
    shape: SdfShape,
    K: CameraIntrinsics,
    contrast: float,
    tracker_cfg: TrackerConfig,
    refiner_cfg: RefinerConfig,
    mode: str = "combined",
    zeta: float = 50.0,
    samples: int = 32,
    parallel: bool = False,
) -> PipelineResult:
    """Track the object through the event stream and camera frames.

    ``frames`` is a list of (timestamp, intensity image). ``init`` supplies
    the assumed-known initial motion: the first four spline control poses are
    interpolated from it (it is never consulted past the first spline span).
    Returns partial trajectories with ``diverged=True`` when tracking fails.
    """
    if mode not in ("combined", "event_only", "frame_only"):
        raise ValueError(f"unknown mode '{mode}'")
    log: list = []
    slow = _SlowLayer(shape, K, refiner_cfg, zeta, samples, log)

    if mode == "frame_only":
        return _run_frame_only(frames, init.pose_interp(frames[0][0]) if frames else init.poses[0], slow, log)

    if not frames:
        raise ValueError("tracking requires at least one camera frame for the reference")

    return _run_fast(
        events, frames, init, shape, K, contrast,
        tracker_cfg, refiner_cfg, mode, slow, log,
        parallel=bool(parallel and mode == "combined"),
    )


def _run_frame_only(frames, initial_pose, slow: _SlowLayer, log):
    times = []
    poses = []
    diverged = False
    reason = ""
    prev = [initial_pose]  # last two keyframe poses for extrapolation
    try:
        for t_f, img in frames:
            if len(prev) >= 2:
                guess = prev[-1].compose(prev[-2].inverse()).compose(prev[-1])
            else:
                guess = prev[-1]
            newest = slow.consider(t_f, img, guess)
            if newest is not None:
                prev = (prev + [newest.pose])[-2:]
    except DIVERGENCE_ERRORS as exc:
        diverged = True
        reason = str(exc)
    traj = slow.trajectory()
    if traj is not None:
        times, poses = traj.times, traj.poses
    return PipelineResult(
        event_trajectory=None,
        keyframe_trajectory=traj,
        diverged=diverged,
        reason=reason,
        log=log,
    )


def _run_fast(
    events, frames, init, shape, K, contrast,
    tracker_cfg, refiner_cfg, mode, slow, log, parallel,
):
    dt_knot = tracker_cfg.knot_interval
    buffer_iter = accumulate(
        events, tracker_cfg.events_per_frame, contrast, K.width, K.height
    )
    try:
        first = next(buffer_iter)
    except StopIteration:
        raise ValueError("event stream too short for a single buffer frame") from None

    t_first = first.t_start
    t0_knot = t_first - dt_knot
    controls = [init.pose_interp(t0_knot + k * dt_knot) for k in range(4)]
    spline = SplineTrajectory(controls, dt_knot, t0_knot)

    t0_frame, img0 = frames[0]
    initial_pose = init.pose_interp(t0_frame)
    reference_cell = [et.ReferenceKeyframe.from_image(img0, initial_pose, t0_frame)]
    if mode == "combined":
        slow.last_kf_pose = initial_pose
        kf0 = ft.make_keyframe(
            img0, t0_frame, initial_pose, shape, K, slow.cfg,
            kf_id=-1, zeta=slow.zeta, samples=slow.samples,
        )
        slow.window.add_keyframe(kf0)
        slow.kf_records[kf0.kf_id] = [t0_frame, kf0.pose]

    mailbox = _Mailbox() if parallel else None
    worker_error = []

    def _refine(t_f, img, guess):
        newest = slow.consider(t_f, img, guess)
        if newest is not None:
            reference_cell[0] = et.ReferenceKeyframe.from_image(
                newest.image, newest.pose, newest.timestamp
            )

    if parallel:
        def _worker():
            while True:
                item = mailbox.take()
                if item is None:
                    return
                try:
                    _refine(*item)
                except DIVERGENCE_ERRORS as exc:
                    worker_error.append(exc)
                    return
        thread = threading.Thread(target=_worker, daemon=True)
        thread.start()

    ev_times = []
    ev_poses = []
    diverged = False
    reason = ""
    frame_idx = 1  # frames[0] consumed as the initial reference
    bucket = [first]

    def flush_bucket():
        nonlocal spline
        if not bucket:
            return
        problem = et.SegmentProblem(
            spline=spline,
            frames=list(bucket),
            reference=reference_cell[0],
            shape=shape,
            camera=K,
        )
        try:
            spline, stats = et.optimize_segment(problem, tracker_cfg)
        except DegenerateFrame:
            bucket.clear()
            return
        for fp in bucket:
            state = spline.evaluate(fp.t_start)
            _check_pose(state.pose, f"segment fit at t={fp.t_start:.4f}")
            ev_times.append(fp.t_start)
            ev_poses.append(state.pose)
        log.append({"layer": "events", "t": spline.t_max, **stats})
        bucket.clear()

    def handle_camera_frames(t_done):
        nonlocal frame_idx
        while frame_idx < len(frames) and frames[frame_idx][0] <= t_done + 1e-12:
            t_f, img = frames[frame_idx]
            frame_idx += 1
            if t_f < spline.t_min:
                continue
            pose_f = spline.evaluate(min(t_f, spline.t_max)).pose
            if mode == "event_only":
                # the latest frame within the spline becomes the reference,
                # adopting the fast layer's pose estimate unrefined
                reference_cell[0] = et.ReferenceKeyframe.from_image(img, pose_f, t_f)
            elif parallel:
                mailbox.post((t_f, img, pose_f))
                if worker_error:
                    raise worker_error[0]
            else:
                _refine(t_f, img, pose_f)

    try:
        stream_done = False
        while not stream_done:
            nxt = next(buffer_iter, None)
            if nxt is None:
                stream_done = True
                flush_bucket()
                handle_camera_frames(spline.t_max)
                break
            while nxt.t_start >= spline.t_max:
                flush_bucket()
                handle_camera_frames(spline.t_max)
                spline = et.advance(spline)
            bucket.append(nxt)
    except DIVERGENCE_ERRORS as exc:
        diverged = True
        reason = str(exc)
    finally:
        if parallel:
            mailbox.close()
            thread.join()
            if worker_error and not diverged:
                diverged = True
                reason = str(worker_error[0])

    event_traj = (
        Trajectory(np.array(ev_times), ev_poses) if ev_times else None
    )
    kf_traj = slow.trajectory() if mode == "combined" else None
    return PipelineResult(
        event_trajectory=event_traj,
        keyframe_trajectory=kf_traj,
        diverged=diverged,
        reason=reason,
        log=log,
    )


def write_log(path, log: list) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for entry in log:
            fh.write(json.dumps(entry) + "\n")
