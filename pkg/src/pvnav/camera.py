"""Pinhole camera model, poses and rotation helpers.

World frame is metric, right-handed, z-up. Camera frame follows the usual
computer-vision convention: x right, y down, z forward along the optical axis.
``Pose.R`` maps world to camera coordinates, ``p_cam = R @ p_world + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy.spatial.transform import Rotation


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    # Brown-Conrady k1, k2, p1, p2, k3
    dist: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")
        if len(self.dist) != 5:
            raise ValueError("expected 5 distortion coefficients (k1, k2, p1, p2, k3)")
        object.__setattr__(self, "dist", tuple(float(d) for d in self.dist))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def dist_coeffs(self) -> np.ndarray:
        return np.asarray(self.dist, dtype=float)

    @property
    def has_distortion(self) -> bool:
        return any(d != 0.0 for d in self.dist)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def without_distortion(self) -> "CameraIntrinsics":
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics of the same camera after resizing the image by ``factor``."""
        return CameraIntrinsics(
            self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
            int(round(self.width * factor)), int(round(self.height * factor)), self.dist,
        )

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height, "dist": list(self.dist)}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), tuple(d.get("dist", (0.0,) * 5)))


@dataclass(frozen=True)
class Pose:
    """Rigid world-to-camera transform."""

    R: np.ndarray
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ValueError("R must be a proper rotation matrix")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def center(self) -> np.ndarray:
        return camera_position(self.R, self.t)

    @classmethod
    def from_center(cls, R: np.ndarray, center) -> "Pose":
        R = np.asarray(R, dtype=float)
        return cls(R, -R @ np.asarray(center, dtype=float))

    def transform(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts @ self.R.T + self.t

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.array(d["R"]), np.array(d["t"]))


def camera_position(R, t) -> np.ndarray:
    """Camera center in world coordinates, ``C = R^T (-t)``."""
    R = np.asarray(R, dtype=float)
    return R.T @ (-np.asarray(t, dtype=float))


def look_rotation(forward, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera rotation for a camera looking along ``forward``.

    Image "up" (negative camera y) is aligned as closely as possible with ``up``.
    """
    z = np.asarray(forward, dtype=float)
    z = z / np.linalg.norm(z)
    up = np.asarray(up, dtype=float)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        raise ValueError("forward direction parallel to up vector")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.vstack([x, y, z])


def nearest_rotation(M) -> np.ndarray:
    """Closest proper rotation to ``M`` in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def angular_distance(Ra, Rb) -> float:
    """Angle of the relative rotation ``Ra Rb^T`` [rad].

    Uses atan2 of the skew and trace parts, which is the arccos-of-trace formula
    without its loss of precision near zero.
    """
    D = np.asarray(Ra, dtype=float) @ np.asarray(Rb, dtype=float).T
    cos = (np.trace(D) - 1.0) / 2.0
    s = np.array([D[2, 1] - D[1, 2], D[0, 2] - D[2, 0], D[1, 0] - D[0, 1]])
    sin = np.linalg.norm(s) / 2.0
    return float(np.arctan2(sin, cos))


def rotation_to_ypr(R) -> np.ndarray:
    """Yaw, pitch, roll [rad] of the camera orientation (camera-to-world, ZYX)."""
    Rwc = np.asarray(R, dtype=float).T
    if abs(Rwc[2, 0]) > 1.0 - 1e-9:
        raise ValueError("gimbal-lock orientation (pitch at +-90 deg)")
    return Rotation.from_matrix(Rwc).as_euler("ZYX")


def ypr_to_rotation(ypr) -> np.ndarray:
    """Inverse of :func:`rotation_to_ypr`; returns the world-to-camera matrix."""
    return Rotation.from_euler("ZYX", np.asarray(ypr, dtype=float)).as_matrix().T


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def distort_normalized(xy, dist) -> np.ndarray:
    """Apply Brown-Conrady distortion to normalized image coordinates."""
    k1, k2, p1, p2, k3 = dist
    x, y = xy[:, 0], xy[:, 1]
    r2 = x * x + y * y
    radial = 1 + k1 * r2 + k2 * r2**2 + k3 * r2**3
    xd = x * radial + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
    yd = y * radial + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
    return np.column_stack([xd, yd])


def project_points(points, pose: Pose, K: CameraIntrinsics, distort: bool = False):
    """Project world points into the image.

    Returns ``(uv, visible)``; points with non-positive depth are flagged
    invisible and their coordinates set to NaN.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    cam = pose.transform(pts)
    z = cam[:, 2]
    visible = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = cam[:, :2] / z[:, None]
    xy[~visible] = np.nan
    if distort and K.has_distortion:
        xy = distort_normalized(xy, K.dist)
    uv = np.column_stack([K.fx * xy[:, 0] + K.cx, K.fy * xy[:, 1] + K.cy])
    return uv, visible


def distort_pixels(uv, K: CameraIntrinsics) -> np.ndarray:
    """Map ideal pinhole pixel coordinates to distorted pixel coordinates."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    xy = np.column_stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy])
    xy = distort_normalized(xy, K.dist)
    return np.column_stack([K.fx * xy[:, 0] + K.cx, K.fy * xy[:, 1] + K.cy])


def undistort_pixels(uv, K: CameraIntrinsics) -> np.ndarray:
    """Map distorted pixel coordinates back to ideal pinhole pixel coordinates."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    if not K.has_distortion:
        return uv.copy()
    crit = (cv2.TERM_CRITERIA_COUNT | cv2.TERM_CRITERIA_EPS, 50, 1e-12)
    out = cv2.undistortPoints(uv.reshape(-1, 1, 2), K.matrix, K.dist_coeffs, None, None, K.matrix, crit)
    return out.reshape(-1, 2)
