"""Dataset and trajectory file I/O.

Dataset directory layout:
    events.csv        event stream, header "t,x,y,p"
    frames/NNNNNN.pgm 16-bit grayscale intensity frames
    frames.txt        "timestamp filename" per line
    groundtruth.txt   TUM format
    scene.cfg         key=value scene configuration
    calib.txt         "fx fy cx cy width height"
"""

from __future__ import annotations

import os

import numpy as np

from . import events as ev
from .errors import ConfigError
from .evaluation import Trajectory
from .geometry import CameraIntrinsics, Pose, quaternion_to_rotation, rotation_to_quaternion


def write_tum(path, trajectory: Trajectory) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for t, pose in zip(trajectory.times, trajectory.poses):
            q = rotation_to_quaternion(pose.rotation)
            tr = pose.translation
            fh.write(
                f"{t:.9f} {tr[0]:.9f} {tr[1]:.9f} {tr[2]:.9f} "
                f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n"
            )


def read_tum(path) -> Trajectory:
    times = []
    poses = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ConfigError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from exc
            times.append(vals[0])
            poses.append(Pose(quaternion_to_rotation(np.array(vals[4:8])), np.array(vals[1:4])))
    if not times:
        raise ConfigError(f"{path}: no trajectory lines")
    return Trajectory(np.array(times), poses)


def write_pgm(path, image: np.ndarray) -> None:
    """16-bit big-endian P5 (PGM convention), values from intensity in [0, 1]."""
    data = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    pix = (data * 65535.0 + 0.5).astype(">u2")
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ConfigError(f"{path}: not a binary PGM file")
        fields = []
        while len(fields) < 3:
            line = fh.readline()
            if not line:
                raise ConfigError(f"{path}: truncated PGM header")
            if line.startswith(b"#"):
                continue
            fields.extend(line.split())
        w, h, maxval = (int(x) for x in fields[:3])
        dtype = ">u2" if maxval > 255 else np.uint8
        raw = fh.read()
        pix = np.frombuffer(raw, dtype=dtype, count=w * h).reshape(h, w)
        return pix.astype(float) / maxval


def write_calib(path, K: CameraIntrinsics) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{K.fx:.9g} {K.fy:.9g} {K.cx:.9g} {K.cy:.9g} {K.width} {K.height}\n")


def read_calib(path) -> CameraIntrinsics:
    with open(path, "r", encoding="ascii") as fh:
        parts = fh.read().split()
    if len(parts) != 6:
        raise ConfigError(f"{path}: expected 6 calibration values")
    return CameraIntrinsics(
        fx=float(parts[0]),
        fy=float(parts[1]),
        cx=float(parts[2]),
        cy=float(parts[3]),
        width=int(parts[4]),
        height=int(parts[5]),
    )


def write_dataset(out_dir, scene_values: dict, events: ev.EventArray, frames, gt) -> None:
    """Write the full dataset layout; gt is a list of (t, Pose)."""
    os.makedirs(out_dir, exist_ok=True)
    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)

    ev.write_csv(os.path.join(out_dir, "events.csv"), events)

    with open(os.path.join(out_dir, "frames.txt"), "w", encoding="ascii") as fh:
        for i, (t, img) in enumerate(frames):
            name = f"{i:06d}.pgm"
            write_pgm(os.path.join(frames_dir, name), img)
            fh.write(f"{t:.9f} frames/{name}\n")

    traj = Trajectory(np.array([t for t, _ in gt]), [p for _, p in gt])
    write_tum(os.path.join(out_dir, "groundtruth.txt"), traj)

    with open(os.path.join(out_dir, "scene.cfg"), "w", encoding="ascii") as fh:
        for key in sorted(scene_values):
            fh.write(f"{key} = {scene_values[key]}\n")

    from .config import build_scene

    scene = build_scene(scene_values, base_dir=out_dir)
    write_calib(os.path.join(out_dir, "calib.txt"), scene.camera)


def read_dataset(dataset_dir):
    """Load a dataset directory.

    Returns (events, frames: list of (t, image), gt: Trajectory,
    K: CameraIntrinsics, scene_values: dict).
    """
    for required in ("events.csv", "frames.txt", "groundtruth.txt", "calib.txt", "scene.cfg"):
        if not os.path.exists(os.path.join(dataset_dir, required)):
            raise ConfigError(f"dataset incomplete: missing {required} in {dataset_dir}")
    events = ev.read_csv(os.path.join(dataset_dir, "events.csv"))
    K = read_calib(os.path.join(dataset_dir, "calib.txt"))
    gt = read_tum(os.path.join(dataset_dir, "groundtruth.txt"))

    frames = []
    with open(os.path.join(dataset_dir, "frames.txt"), "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ConfigError(f"frames.txt:{lineno}: expected 'timestamp filename'")
            t = float(parts[0])
            frames.append((t, read_pgm(os.path.join(dataset_dir, parts[1]))))

    from .config import parse_config

    scene_values = parse_config(os.path.join(dataset_dir, "scene.cfg"))
    return events, frames, gt, K, scene_values
