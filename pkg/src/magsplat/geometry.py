"""SE(3)/quaternion algebra, pinhole camera model, and rigid-fit primitives.

Conventions fixed repo-wide:
  * quaternions are stored as (qx, qy, qz, qw), unit norm;
  * a Pose is a camera-to-world (or submap-to-world) transform;
  * twists are 6-vectors [wx, wy, wz, vx, vy, vz] (rotation first);
  * camera axes: z forward, x right, y down; no distortion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(Exception):
    pass


class AngleAtPi(GeometryError):
    """Rotation angle within 1e-6 of pi; the log map is rejected there."""


class DegenerateGeometry(GeometryError):
    """Rigid fit is underdetermined (too few or collinear correspondences)."""


class InvalidDepth(GeometryError):
    pass


_SMALL_ANGLE = 1e-6


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) with canonical sign qw >= 0; accepts (4,) or (N,4)."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise GeometryError("zero quaternion")
    q = q / n
    # Canonical sign keeps serialization and comparisons stable.
    flip = q[..., 3] < 0.0
    return np.where(flip[..., None], -q, q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to (qx, qy, qz, qw), Shepperd's branch selection."""
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0:
        s = 0.5 / np.sqrt(trace + 1.0)
        w = 0.25 / s
        x = (R[2, 1] - R[1, 2]) * s
        y = (R[0, 2] - R[2, 0]) * s
        z = (R[1, 0] - R[0, 1]) * s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    return quat_normalize(np.array([x, y, z, w]))


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def quat_multiply_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product broadcast over leading axes; layout [qx qy qz qw]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax, ay, az, aw = np.moveaxis(a, -1, 0)
    bx, by, bz, bw = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        axis=-1,
    )


def so3_exp(omega: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(omega)
    K = _skew(omega)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    K = K / angle
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    cos_angle = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    angle = np.arccos(cos_angle)
    if np.pi - angle < _SMALL_ANGLE:
        raise AngleAtPi(f"rotation angle {angle} within 1e-6 of pi")
    axial = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < _SMALL_ANGLE:
        return axial
    return (angle / np.sin(angle)) * axial


def _so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(omega)
    K = _skew(omega)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    K2 = K @ K
    a2 = angle * angle
    return (
        np.eye(3)
        + ((1.0 - np.cos(angle)) / a2) * K
        + ((angle - np.sin(angle)) / (a2 * angle)) * K2
    )


def _so3_left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(omega)
    K = _skew(omega)
    if angle < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    K2 = K @ K
    coeff = 1.0 / (angle * angle) - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
    return np.eye(3) - 0.5 * K + coeff * K2


@dataclass(frozen=True)
class Pose:
    """Rigid transform: rotation quaternion (qx,qy,qz,qw) plus translation."""

    q: np.ndarray
    t: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @staticmethod
    def from_qt(q, t) -> "Pose":
        return Pose(quat_normalize(np.asarray(q, dtype=np.float64)),
                    np.asarray(t, dtype=np.float64).copy())

    @staticmethod
    def from_matrix(M: np.ndarray) -> "Pose":
        M = np.asarray(M, dtype=np.float64)
        return Pose(matrix_to_quat(M[:3, :3]), M[:3, 3].copy())

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.t
        return M

    def compose(self, other: "Pose") -> "Pose":
        """self * other: apply ``other`` first, then ``self``."""
        q = quat_normalize(quat_multiply(self.q, other.q))
        t = self.rotation @ other.t + self.t
        return Pose(q, t)

    def inverse(self) -> "Pose":
        q_inv = np.array([-self.q[0], -self.q[1], -self.q[2], self.q[3]])
        R_inv = quat_to_matrix(q_inv)
        return Pose(quat_normalize(q_inv), -(R_inv @ self.t))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N,3) batch."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.t

    def approx_equal(self, other: "Pose", tol: float = 1e-9) -> bool:
        dq = min(np.linalg.norm(self.q - other.q), np.linalg.norm(self.q + other.q))
        return dq < tol and np.linalg.norm(self.t - other.t) < tol


def se3_compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def se3_inverse(a: Pose) -> Pose:
    return a.inverse()


def se3_log(a: Pose) -> np.ndarray:
    """Twist [w, v] with exp(log(a)) == a; raises AngleAtPi near the boundary."""
    omega = so3_log(a.rotation)
    v = _so3_left_jacobian_inv(omega) @ a.t
    return np.concatenate([omega, v])


def se3_exp(twist: np.ndarray) -> Pose:
    twist = np.asarray(twist, dtype=np.float64)
    omega, v = twist[:3], twist[3:]
    R = so3_exp(omega)
    t = _so3_left_jacobian(omega) @ v
    return Pose(matrix_to_quat(R), t)


def umeyama_fit(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rigid transform T with dst ~= T * src (no scale).

    Reflections are corrected via the determinant sign fix. Raises
    DegenerateGeometry for fewer than 3 points or a rank-deficient
    cross-covariance (collinear input).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise DegenerateGeometry("umeyama_fit expects matching (N,3) arrays")
    n = src.shape[0]
    if n < 3:
        raise DegenerateGeometry(f"umeyama_fit needs >=3 correspondences, got {n}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (dst - mu_d).T @ (src - mu_s) / n
    U, S, Vt = np.linalg.svd(H)
    if S[0] < 1e-15 or S[1] <= 1e-9 * S[0]:
        raise DegenerateGeometry("rank-deficient cross-covariance")
    d = np.sign(np.linalg.det(U) * np.linalg.det(Vt))
    D = np.diag([1.0, 1.0, d])
    R = U @ D @ Vt
    t = mu_d - R @ mu_s
    return Pose(matrix_to_quat(R), t)


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
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside the image")


def project_point(K: CameraIntrinsics, p_cam: np.ndarray):
    """Pinhole projection of a camera-frame point.

    Returns (u, v, z), or None when the point is at or behind the camera
    (z <= 1e-6).
    """
    x, y, z = p_cam
    if z <= 1e-6:
        return None
    return (K.fx * x / z + K.cx, K.fy * y / z + K.cy, z)


def backproject_pixel(K: CameraIntrinsics, u: float, v: float, depth: float) -> np.ndarray:
    if depth <= 0:
        raise InvalidDepth(f"depth must be positive, got {depth}")
    return np.array(
        [(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth]
    )


def project_points(K: CameraIntrinsics, pts_cam: np.ndarray):
    """Vectorized projection: (N,3) -> (uv (N,2), z (N,), in_front (N,) bool)."""
    pts_cam = np.asarray(pts_cam, dtype=np.float64)
    z = pts_cam[:, 2]
    in_front = z > 1e-6
    zsafe = np.where(in_front, z, 1.0)
    u = K.fx * pts_cam[:, 0] / zsafe + K.cx
    v = K.fy * pts_cam[:, 1] / zsafe + K.cy
    return np.stack([u, v], axis=1), z, in_front


def backproject_depth_map(K: CameraIntrinsics, depth: np.ndarray) -> np.ndarray:
    """Back-project a full (H,W) depth map to an (H,W,3) camera-frame grid.

    Invalid pixels (depth <= 0) come back as zero vectors.
    """
    depth = np.asarray(depth, dtype=np.float64)
    v, u = np.mgrid[0 : depth.shape[0], 0 : depth.shape[1]].astype(np.float64)
    x = (u - K.cx) * depth / K.fx
    y = (v - K.cy) * depth / K.fy
    pts = np.stack([x, y, depth], axis=-1)
    pts[depth <= 0] = 0.0
    return pts
