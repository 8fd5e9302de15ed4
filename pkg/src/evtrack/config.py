"""Flat key=value configuration with an ``include`` directive.

Later assignments override earlier ones, so presets can be included and then
selectively overridden. Unknown keys are rejected against the registry below.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geometry import CameraIntrinsics, Pose, quaternion_to_rotation, rotation_to_quaternion
from .sdf import BoxSdf, CylinderSdf, GridSdf
from .simulator import SceneConfig, TrajectorySpec

# key -> default (None = required when the consuming builder runs)
SCENE_KEYS = {
    "shape_kind": "box",
    "shape_half_extents": "0.15 0.15 0.15",
    "shape_radius": "0.05",
    "shape_height": "0.2",
    "shape_grid_file": "",
    "camera_fx": None,
    "camera_fy": None,
    "camera_cx": None,
    "camera_cy": None,
    "camera_width": None,
    "camera_height": None,
    "camera_pose": "0 0 0 0 0 0 1",
    "texture_period": "0.05",
    "texture_albedo_a": "1.0",
    "texture_albedo_b": "0.15",
    "background": "uniform",
    "background_albedo": "0.45",
    "background_albedo_b": "0.75",
    "background_depth": "4.0",
    "background_period": "0.5",
    "light_direction": "0.25 0.35 0.9",
    "ambient": "0.35",
    "contrast": "0.1",
    "render_rate": "2000",
    "frame_rate": "30",
    "duration": "2.0",
    "jitter_sigma": "0.0",
    "spurious_rate": "0.0",
    "trajectory_kind": "constant_velocity",
    "trajectory_initial_pose": "0 0 1.6 0 0 0 1",
    "trajectory_linear_velocity": "0 0 0",
    "trajectory_angular_velocity": "0 0 0",
    "trajectory_gravity": "9.81",
    "trajectory_gravity_direction": "0 1 0",
    "trajectory_friction_decay": "0.0",
    "trajectory_turn_radius": "5.0",
    "trajectory_speed": "1.25",
    "trajectory_speed_multiplier": "1.0",
}

TRACKER_KEYS = {
    "lambda_reg": "0.1",
    "lambda_reg2": "0.0",
    "w_c": "0.005",
    "events_per_frame": "1500",
    "knot_interval": "0.015",
    "max_iterations": "8",
    "convergence_tol": "1e-4",
}

REFINER_KEYS = {
    "window_size": "7",
    "kf_trans_threshold": "0.1",
    "kf_rot_threshold_deg": "5.0",
    "cauchy_scale": "0.05",
    "patch_radius": "1",
    "max_keypoints": "60",
    "refiner_max_iterations": "10",
    "refiner_convergence_tol": "1e-5",
}

RUN_KEYS = {
    "mode": "combined",
    "seed": "0",
    "zeta": "50.0",
    "silhouette_samples": "32",
}

ALL_KEYS = {**SCENE_KEYS, **TRACKER_KEYS, **REFINER_KEYS, **RUN_KEYS}

PRESET_DIR = os.path.join(os.path.dirname(__file__), "presets")


def parse_config(path: str, _depth: int = 0) -> dict:
    """Parse a key=value file with includes; returns a flat str->str dict."""
    if _depth > 8:
        raise ConfigError(f"include depth exceeded at {path}")
    values: dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    base = os.path.dirname(os.path.abspath(path))
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include"):
            target = line[len("include"):].strip()
            if not target:
                raise ConfigError(f"{path}:{lineno}: include without a path")
            cand = os.path.join(base, target)
            if not os.path.exists(cand):
                cand = os.path.join(PRESET_DIR, target)
            if not os.path.exists(cand):
                raise ConfigError(f"{path}:{lineno}: include target '{target}' not found")
            values.update(parse_config(cand, _depth + 1))
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got '{line}'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in ALL_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
        values[key] = val
    return values


def with_defaults(values: dict, keys: dict, context: str) -> dict:
    out = {}
    for key, default in keys.items():
        if key in values:
            out[key] = values[key]
        elif default is not None:
            out[key] = default
        else:
            raise ConfigError(f"missing required key '{key}' for {context}")
    return out


def _floats(s: str, n: int, key: str) -> np.ndarray:
    parts = s.split()
    if len(parts) != n:
        raise ConfigError(f"key '{key}' needs {n} numbers, got '{s}'")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise ConfigError(f"key '{key}': {exc}") from exc


def _pose(s: str, key: str) -> Pose:
    v = _floats(s, 7, key)
    return Pose(quaternion_to_rotation(v[3:7]), v[:3])


def pose_to_str(p: Pose) -> str:
    q = rotation_to_quaternion(p.rotation)
    t = p.translation
    return f"{t[0]:.9g} {t[1]:.9g} {t[2]:.9g} {q[0]:.9g} {q[1]:.9g} {q[2]:.9g} {q[3]:.9g}"


def build_scene(values: dict, base_dir: str = ".") -> SceneConfig:
    v = with_defaults(values, SCENE_KEYS, "scene")
    kind = v["shape_kind"]
    if kind == "box":
        shape = BoxSdf(_floats(v["shape_half_extents"], 3, "shape_half_extents"))
    elif kind == "cylinder":
        shape = CylinderSdf(float(v["shape_radius"]), float(v["shape_height"]))
    elif kind == "grid":
        path = v["shape_grid_file"]
        if not path:
            raise ConfigError("shape_kind=grid requires shape_grid_file")
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        shape = GridSdf.load(path)
    else:
        raise ConfigError(f"unknown shape_kind '{kind}'")

    camera = CameraIntrinsics(
        fx=float(v["camera_fx"]),
        fy=float(v["camera_fy"]),
        cx=float(v["camera_cx"]),
        cy=float(v["camera_cy"]),
        width=int(v["camera_width"]),
        height=int(v["camera_height"]),
    )
    traj = TrajectorySpec(
        kind=v["trajectory_kind"],
        initial_pose=_pose(v["trajectory_initial_pose"], "trajectory_initial_pose"),
        linear_velocity=_floats(v["trajectory_linear_velocity"], 3, "trajectory_linear_velocity"),
        angular_velocity=_floats(v["trajectory_angular_velocity"], 3, "trajectory_angular_velocity"),
        gravity=float(v["trajectory_gravity"]),
        gravity_direction=_floats(v["trajectory_gravity_direction"], 3, "trajectory_gravity_direction"),
        friction_decay=float(v["trajectory_friction_decay"]),
        turn_radius=float(v["trajectory_turn_radius"]),
        speed=float(v["trajectory_speed"]),
        speed_multiplier=float(v["trajectory_speed_multiplier"]),
    )
    return SceneConfig(
        shape=shape,
        camera=camera,
        trajectory=traj,
        camera_pose=_pose(v["camera_pose"], "camera_pose"),
        texture_period=float(v["texture_period"]),
        texture_albedo_a=float(v["texture_albedo_a"]),
        texture_albedo_b=float(v["texture_albedo_b"]),
        background=v["background"],
        background_albedo=float(v["background_albedo"]),
        background_albedo_b=float(v["background_albedo_b"]),
        background_depth=float(v["background_depth"]),
        background_period=float(v["background_period"]),
        light_direction=_floats(v["light_direction"], 3, "light_direction"),
        ambient=float(v["ambient"]),
        contrast=float(v["contrast"]),
        render_rate=float(v["render_rate"]),
        frame_rate=float(v["frame_rate"]),
        duration=float(v["duration"]),
        jitter_sigma=float(v["jitter_sigma"]),
        spurious_rate=float(v["spurious_rate"]),
    )


def scene_key_values(values: dict) -> dict:
    """The scene subset of a config (with defaults applied), for scene.cfg."""
    return with_defaults(values, SCENE_KEYS, "scene")


@dataclass
class TrackerConfig:
    lambda_reg: float = 0.1
    lambda_reg2: float = 0.0
    w_c: float = 0.005
    events_per_frame: int = 1500
    knot_interval: float = 0.015
    max_iterations: int = 8
    convergence_tol: float = 1e-4

    def __post_init__(self):
        if self.events_per_frame < 1:
            raise ValueError("need at least one event per buffer frame")
        for name in ("lambda_reg", "lambda_reg2", "w_c", "knot_interval", "convergence_tol"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class RefinerConfig:
    window_size: int = 7
    trans_threshold: float = 0.1
    rot_threshold_deg: float = 5.0
    cauchy_scale: float = 0.05
    patch_radius: int = 1
    max_keypoints: int = 60
    max_iterations: int = 10
    convergence_tol: float = 1e-5

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError("window size must be >= 2")
        if self.trans_threshold <= 0 or self.rot_threshold_deg <= 0:
            raise ValueError("keyframe thresholds must be positive")


def build_tracker_config(values: dict) -> TrackerConfig:
    v = with_defaults(values, TRACKER_KEYS, "tracker")
    return TrackerConfig(
        lambda_reg=float(v["lambda_reg"]),
        lambda_reg2=float(v["lambda_reg2"]),
        w_c=float(v["w_c"]),
        events_per_frame=int(v["events_per_frame"]),
        knot_interval=float(v["knot_interval"]),
        max_iterations=int(v["max_iterations"]),
        convergence_tol=float(v["convergence_tol"]),
    )


def build_refiner_config(values: dict) -> RefinerConfig:
    v = with_defaults(values, REFINER_KEYS, "refiner")
    return RefinerConfig(
        window_size=int(v["window_size"]),
        trans_threshold=float(v["kf_trans_threshold"]),
        rot_threshold_deg=float(v["kf_rot_threshold_deg"]),
        cauchy_scale=float(v["cauchy_scale"]),
        patch_radius=int(v["patch_radius"]),
        max_keypoints=int(v["max_keypoints"]),
        max_iterations=int(v["refiner_max_iterations"]),
        convergence_tol=float(v["refiner_convergence_tol"]),
    )
