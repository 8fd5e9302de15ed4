"""SE(3)/SO(3) algebra, pinhole camera model and the optical-flow interaction matrix.

Conventions used throughout the package:
  * A ``Pose`` maps object-frame points into camera-frame points:
    ``X_cam = R @ X_obj + t``.
  * Twists are 6-vectors ordered ``(v_x, v_y, v_z, w_x, w_y, w_z)``
    (linear first), matching the column order of the interaction matrix.
  * The interaction matrix is expressed in normalized image coordinates;
    pixel-space flow is obtained by scaling rows with ``(fx, fy)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AngleNearPi, BehindCamera, NonPositiveDepth

_EPS_ANGLE = 1e-8


def so3_hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector."""
    w = np.asarray(w, dtype=float)
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def so3_vee(W: np.ndarray) -> np.ndarray:
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula with small-angle series."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    W = so3_hat(w)
    if theta < _EPS_ANGLE:
        # second-order series keeps orthogonality to machine precision here
        return np.eye(3) + W + 0.5 * (W @ W)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of R; requires angle < pi - 1e-6."""
    R = np.asarray(R, dtype=float)
    cos_theta = (np.trace(R) - 1.0) * 0.5
    cos_theta = min(1.0, max(-1.0, cos_theta))
    theta = math.acos(cos_theta)
    if theta > math.pi - 1e-6:
        raise AngleNearPi(f"rotation angle {theta} too close to pi")
    if theta < _EPS_ANGLE:
        return so3_vee(R - R.T) * 0.5
    return so3_vee(R - R.T) * (theta / (2.0 * math.sin(theta)))


def _so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    W = so3_hat(w)
    if theta < _EPS_ANGLE:
        return np.eye(3) + 0.5 * W + (W @ W) / 6.0
    t2 = theta * theta
    a = (1.0 - math.cos(theta)) / t2
    b = (theta - math.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * W + b * (W @ W)


def _so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    W = so3_hat(w)
    if theta < _EPS_ANGLE:
        return np.eye(3) - 0.5 * W + (W @ W) / 12.0
    half = 0.5 * theta
    cot = half / math.tan(half)
    return np.eye(3) - 0.5 * W + (1.0 - cot) / (theta * theta) * (W @ W)


@dataclass(frozen=True)
class Pose:
    """Rigid transform (R, t): X_out = R @ X_in + t."""

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        return Pose(np.array(T[:3, :3], dtype=float), np.array(T[:3, 3], dtype=float))

    def rotation_angle(self) -> float:
        c = (np.trace(self.rotation) - 1.0) * 0.5
        return math.acos(min(1.0, max(-1.0, c)))


@dataclass(frozen=True)
class Twist:
    """Rigid-body velocity, linear part in m/s and angular part in rad/s."""

    linear: np.ndarray
    angular: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular])

    @staticmethod
    def from_vector(xi: np.ndarray) -> "Twist":
        xi = np.asarray(xi, dtype=float)
        return Twist(xi[:3].copy(), xi[3:].copy())


def project_to_rotation(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (Frobenius) via polar decomposition."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def exp_se3(xi: np.ndarray) -> Pose:
    """Closed-form SE(3) exponential; xi = (rho, phi) with linear part first."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    R = so3_exp(phi)
    V = _so3_left_jacobian(phi)
    return Pose(R, V @ rho)


def log_se3(P: Pose) -> np.ndarray:
    """SE(3) logarithm; raises AngleNearPi for rotations near pi."""
    phi = so3_log(P.rotation)
    Vinv = _so3_left_jacobian_inv(phi)
    return np.concatenate([Vinv @ P.translation, phi])


def se3_hat(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    M = np.zeros((4, 4))
    M[:3, :3] = so3_hat(xi[3:])
    M[:3, 3] = xi[:3]
    return M


def se3_vee(M: np.ndarray) -> np.ndarray:
    return np.concatenate([M[:3, 3], so3_vee(M[:3, :3])])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


def project(K: CameraIntrinsics, X: np.ndarray) -> np.ndarray:
    """Pinhole projection of a (3,) point or (N, 3) points to pixel coordinates."""
    X = np.asarray(X, dtype=float)
    z = X[..., 2]
    if np.any(z <= 1e-6):
        raise BehindCamera("point behind camera (z <= 1e-6)")
    u = np.empty(X.shape[:-1] + (2,))
    u[..., 0] = K.fx * X[..., 0] / z + K.cx
    u[..., 1] = K.fy * X[..., 1] / z + K.cy
    return u


def unproject(K: CameraIntrinsics, u: np.ndarray, depth) -> np.ndarray:
    """3D point at z-depth ``depth`` along the ray of pixel u."""
    u = np.asarray(u, dtype=float)
    depth = np.asarray(depth, dtype=float)
    if np.any(depth <= 0):
        raise NonPositiveDepth("unproject requires depth > 0")
    X = np.empty(u.shape[:-1] + (3,))
    X[..., 0] = (u[..., 0] - K.cx) / K.fx * depth
    X[..., 1] = (u[..., 1] - K.cy) / K.fy * depth
    X[..., 2] = depth
    return X


def pixel_to_normalized(K: CameraIntrinsics, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    out[..., 0] = (u[..., 0] - K.cx) / K.fx
    out[..., 1] = (u[..., 1] - K.cy) / K.fy
    return out


def interaction_matrix(u_norm: np.ndarray, depth: float) -> np.ndarray:
    """2x6 matrix B(u) mapping a camera twist to flow in normalized coordinates.

    For a static scene point and a camera moving with twist (v, w) expressed
    in its own frame, the normalized image velocity is ``B(u) @ (v, w)``.
    """
    if depth <= 0:
        raise NonPositiveDepth("interaction matrix requires depth > 0")
    x, y = float(u_norm[0]), float(u_norm[1])
    d = float(depth)
    return np.array(
        [
            [-1.0 / d, 0.0, x / d, x * y, -(1.0 + x * x), y],
            [0.0, -1.0 / d, y / d, 1.0 + y * y, -x * y, -x],
        ]
    )


def interaction_matrices(u_norm: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Vectorized interaction matrices: (N, 2) points, (N,) depths -> (N, 2, 6)."""
    u_norm = np.asarray(u_norm, dtype=float)
    depth = np.asarray(depth, dtype=float)
    x, y = u_norm[:, 0], u_norm[:, 1]
    n = u_norm.shape[0]
    B = np.zeros((n, 2, 6))
    inv_d = 1.0 / depth
    B[:, 0, 0] = -inv_d
    B[:, 0, 2] = x * inv_d
    B[:, 0, 3] = x * y
    B[:, 0, 4] = -(1.0 + x * x)
    B[:, 0, 5] = y
    B[:, 1, 1] = -inv_d
    B[:, 1, 2] = y * inv_d
    B[:, 1, 3] = 1.0 + y * y
    B[:, 1, 4] = -x * y
    B[:, 1, 5] = -x
    return B


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (qx, qy, qz, qw) with qw >= 0 for deterministic output."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        qw = 0.25 * s
        qx = (R[2, 1] - R[1, 2]) / s
        qy = (R[0, 2] - R[2, 0]) / s
        qz = (R[1, 0] - R[0, 1]) / s
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
            qw = (R[2, 1] - R[1, 2]) / s
            qx = 0.25 * s
            qy = (R[0, 1] + R[1, 0]) / s
            qz = (R[0, 2] + R[2, 0]) / s
        elif i == 1:
            s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
            qw = (R[0, 2] - R[2, 0]) / s
            qx = (R[0, 1] + R[1, 0]) / s
            qy = 0.25 * s
            qz = (R[1, 2] + R[2, 1]) / s
        else:
            s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
            qw = (R[1, 0] - R[0, 1]) / s
            qx = (R[0, 2] + R[2, 0]) / s
            qy = (R[1, 2] + R[2, 1]) / s
            qz = 0.25 * s
    q = np.array([qx, qy, qz, qw])
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from quaternion (qx, qy, qz, qw)."""
    qx, qy, qz, qw = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
            [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
            [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
        ]
    )
