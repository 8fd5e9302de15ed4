"""Cumulative cubic B-spline trajectory on SE(3) with analytic derivatives.

The trajectory is

    T(t) = T_{i-1} * prod_{j=1..3} exp(Btilde_j(u) * Omega_j),
    Omega_j = log(T_{i+j-2}^{-1} T_{i+j-1}),

with uniform knots ``t_k = t0 + k * knot_interval`` and the cumulative
uniform cubic basis Btilde. Velocity is reported as the spatial twist
``vee(dT/dt * T^{-1})`` (the object's twist expressed in the camera frame
at the evaluation time); acceleration is its time derivative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import OutOfRange, OutOfSpan
from .geometry import Pose, exp_se3, log_se3, project_to_rotation, se3_hat, se3_vee


def cumulative_basis(u: float) -> np.ndarray:
    """Cumulative uniform cubic B-spline basis (B0..B3) at u in [0, 1)."""
    if not (0.0 <= u < 1.0):
        raise OutOfRange(f"basis parameter {u} outside [0, 1)")
    u2 = u * u
    u3 = u2 * u
    return np.array(
        [
            1.0,
            (5.0 + 3.0 * u - 3.0 * u2 + u3) / 6.0,
            (1.0 + 3.0 * u + 3.0 * u2 - 2.0 * u3) / 6.0,
            u3 / 6.0,
        ]
    )


def cumulative_basis_d1(u: float) -> np.ndarray:
    """First derivative of the cumulative basis w.r.t. u."""
    u2 = u * u
    return np.array(
        [
            0.0,
            (3.0 - 6.0 * u + 3.0 * u2) / 6.0,
            (3.0 + 6.0 * u - 6.0 * u2) / 6.0,
            u2 / 2.0,
        ]
    )


def cumulative_basis_d2(u: float) -> np.ndarray:
    """Second derivative of the cumulative basis w.r.t. u."""
    return np.array([0.0, u - 1.0, 1.0 - 2.0 * u, u])


@dataclass(frozen=True)
class SplineState:
    pose: Pose
    velocity: np.ndarray  # spatial twist, (6,)
    acceleration: np.ndarray  # time derivative of the spatial twist, (6,)


class SplineTrajectory:
    """Immutable-by-convention spline; ``push_control_pose`` returns a new value."""

    def __init__(self, control_poses, knot_interval: float, t0: float):
        if len(control_poses) < 4:
            raise ValueError("need at least 4 control poses")
        if knot_interval <= 0:
            raise ValueError("knot interval must be positive")
        self.control_poses = list(control_poses)
        self.knot_interval = float(knot_interval)
        self.t0 = float(t0)

    @staticmethod
    def constant(pose: Pose, knot_interval: float, t0: float, count: int = 4) -> "SplineTrajectory":
        return SplineTrajectory([pose] * count, knot_interval, t0)

    @property
    def num_knots(self) -> int:
        return len(self.control_poses)

    def knot_time(self, k: int) -> float:
        return self.t0 + k * self.knot_interval

    @property
    def t_min(self) -> float:
        return self.knot_time(1)

    @property
    def t_max(self) -> float:
        return self.knot_time(self.num_knots - 2)

    def _segment_index(self, t: float) -> tuple[int, float]:
        if not (self.t_min - 1e-9 <= t <= self.t_max + 1e-9):
            raise OutOfSpan(f"t={t} outside spline span [{self.t_min}, {self.t_max}]")
        i = int(math.floor((t - self.t0) / self.knot_interval))
        i = min(max(i, 1), self.num_knots - 3)
        u = (t - self.knot_time(i)) / self.knot_interval
        u = min(max(u, 0.0), 1.0 - 1e-12)
        return i, u

    def active_control_indices(self, t: float) -> list[int]:
        i, _ = self._segment_index(t)
        return [i - 1, i, i + 1, i + 2]

    def evaluate(self, t: float) -> SplineState:
        i, u = self._segment_index(t)
        controls = [self.control_poses[k].matrix() for k in range(i - 1, i + 3)]
        return _evaluate_segment(controls, u, self.knot_interval)

    def push_control_pose(self, pose: Pose) -> "SplineTrajectory":
        return SplineTrajectory(
            self.control_poses + [pose], self.knot_interval, self.t0
        )

    def extrapolated_control(self) -> Pose:
        """Constant-velocity continuation: T_new = (T_last T_prev^-1) T_last."""
        prev, last = self.control_poses[-2], self.control_poses[-1]
        out = last.compose(prev.inverse()).compose(last)
        # the composition reuses T_last twice, doubling any rounding-level
        # non-orthonormality of its rotation at every knot; without the
        # projection the error grows as 2^k and corrupts long runs
        return Pose(project_to_rotation(out.rotation), out.translation)

    def active_segment_jacobians(self, t: float, step: float = 1e-6):
        """Central-difference Jacobians of (pose local coords, velocity, acceleration)
        at time t w.r.t. left-multiplied increments on the 4 active control poses.

        Returns three lists of four 6x6 arrays (pose, velocity, acceleration).
        """
        i, u = self._segment_index(t)
        base = [self.control_poses[k] for k in range(i - 1, i + 3)]
        nominal = _evaluate_segment([p.matrix() for p in base], u, self.knot_interval)
        T_nom_inv = nominal.pose.inverse()

        j_pose = [np.zeros((6, 6)) for _ in range(4)]
        j_vel = [np.zeros((6, 6)) for _ in range(4)]
        j_acc = [np.zeros((6, 6)) for _ in range(4)]
        for k in range(4):
            for m in range(6):
                delta = np.zeros(6)
                delta[m] = step
                plus = _perturbed_state(base, k, delta, u, self.knot_interval)
                minus = _perturbed_state(base, k, -delta, u, self.knot_interval)
                dp = log_se3(plus.pose.compose(T_nom_inv)) - log_se3(
                    minus.pose.compose(T_nom_inv)
                )
                j_pose[k][:, m] = dp / (2.0 * step)
                j_vel[k][:, m] = (plus.velocity - minus.velocity) / (2.0 * step)
                j_acc[k][:, m] = (plus.acceleration - minus.acceleration) / (2.0 * step)
        return j_pose, j_vel, j_acc


def _perturbed_state(base, k, delta, u, dt):
    mats = []
    for idx, p in enumerate(base):
        if idx == k:
            p = exp_se3(delta).compose(p)
        mats.append(p.matrix())
    return _evaluate_segment(mats, u, dt)


def _evaluate_segment(controls, u: float, knot_interval: float) -> SplineState:
    """Evaluate pose, spatial twist and its derivative on one cubic segment."""
    b = cumulative_basis(u)
    db = cumulative_basis_d1(u) / knot_interval
    ddb = cumulative_basis_d2(u) / (knot_interval * knot_interval)

    T0 = controls[0]
    omegas = []
    for j in range(1, 4):
        rel = Pose.from_matrix(np.linalg.solve(controls[j - 1], controls[j]))
        omegas.append(se3_hat(log_se3(rel)))

    A = [None] * 3
    dA = [None] * 3
    ddA = [None] * 3
    for j in range(3):
        Aj = exp_se3(se3_vee(omegas[j] * b[j + 1])).matrix()
        Om = omegas[j]
        A[j] = Aj
        dA[j] = Aj @ (Om * db[j + 1])
        ddA[j] = Aj @ (Om * db[j + 1]) @ (Om * db[j + 1]) + Aj @ (Om * ddb[j + 1])

    T = T0 @ A[0] @ A[1] @ A[2]
    dT = T0 @ (dA[0] @ A[1] @ A[2] + A[0] @ dA[1] @ A[2] + A[0] @ A[1] @ dA[2])
    ddT = T0 @ (
        ddA[0] @ A[1] @ A[2]
        + A[0] @ ddA[1] @ A[2]
        + A[0] @ A[1] @ ddA[2]
        + 2.0 * dA[0] @ dA[1] @ A[2]
        + 2.0 * dA[0] @ A[1] @ dA[2]
        + 2.0 * A[0] @ dA[1] @ dA[2]
    )

    T_inv = np.linalg.inv(T)
    V = dT @ T_inv  # spatial twist, hat form
    dV = ddT @ T_inv - V @ V
    return SplineState(Pose.from_matrix(T), se3_vee(V), se3_vee(dV))
