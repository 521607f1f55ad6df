"""Camera pose from 2D-3D correspondences with EPnP.

World points are written as weighted sums of four control points (three
for planar point sets); the camera-frame control points lie in the null space
of a 2N x 12 system and are recovered from the preserved inter-control-point
distances, with a short Gauss-Newton polish of the null-space coefficients.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .camera import CameraIntrinsics, Pose, camera_position, nearest_rotation, project_points


class PnPError(ValueError):
    """No pose could be computed from the correspondences."""


class InsufficientCorrespondences(PnPError):
    pass


@dataclass
class CorrespondenceSet:
    image_points: np.ndarray
    world_points: np.ndarray
    frame_index: int = -1

    def __post_init__(self):
        self.image_points = np.asarray(self.image_points, dtype=float).reshape(-1, 2)
        self.world_points = np.asarray(self.world_points, dtype=float).reshape(-1, 3)
        if len(self.image_points) != len(self.world_points):
            raise ValueError("image and world point counts differ")

    def __len__(self):
        return len(self.image_points)


@dataclass
class PoseEstimate:
    pose: Pose
    position: np.ndarray
    reprojection_error: float
    n: int


PLANAR_RATIO = 1e-8


def _control_points(Pw):
    c0 = Pw.mean(axis=0)
    A = Pw - c0
    lam, vec = np.linalg.eigh(A.T @ A / len(Pw))  # ascending
    if lam[2] <= 0 or lam[1] < 1e-12 * lam[2]:
        raise PnPError("degenerate (collinear) world points")
    planar = lam[0] < PLANAR_RATIO * lam[2]
    axes = [2, 1] if planar else [2, 1, 0]
    ctrl = [c0] + [c0 + np.sqrt(lam[k]) * vec[:, k] for k in axes]
    return np.array(ctrl)


def _barycentric(Pw, ctrl):
    C = (ctrl[1:] - ctrl[0]).T
    rest, *_ = np.linalg.lstsq(C, (Pw - ctrl[0]).T, rcond=None)
    rest = rest.T
    return np.column_stack([1.0 - rest.sum(axis=1), rest])


def _system(alphas, xy):
    n, m = alphas.shape
    M = np.zeros((2 * n, 3 * m))
    M[0::2, 0::3] = alphas
    M[0::2, 2::3] = -alphas * xy[:, :1]
    M[1::2, 1::3] = alphas
    M[1::2, 2::3] = -alphas * xy[:, 1:]
    return M


class _DistanceSystem:
    """Squared control-point distances as a quadratic form in the betas."""

    def __init__(self, V, ctrl):
        m = len(ctrl)
        self.pairs = list(combinations(range(m), 2))
        self.V = [v.reshape(m, 3) for v in V]
        self.D = np.array([[v[i] - v[j] for v in self.V] for i, j in self.pairs])  # P x N x 3
        self.rho = np.array([np.sum((ctrl[i] - ctrl[j]) ** 2) for i, j in self.pairs])

    def columns(self, prods):
        cols = []
        for k, l in prods:
            c = np.einsum("pd,pd->p", self.D[:, k], self.D[:, l])
            cols.append(c if k == l else 2 * c)
        return np.column_stack(cols)

    def residual(self, betas):
        diff = np.einsum("k,pkd->pd", betas, self.D[:, : len(betas)])
        return np.sum(diff**2, axis=1) - self.rho, diff

    def gauss_newton(self, betas, iters=10):
        betas = np.array(betas, dtype=float)
        for _ in range(iters):
            r, diff = self.residual(betas)
            J = 2 * np.einsum("pd,pkd->pk", diff, self.D[:, : len(betas)])
            step, *_ = np.linalg.lstsq(J, -r, rcond=None)
            betas = betas + step
            if np.linalg.norm(step) <= 1e-15 * max(1.0, np.linalg.norm(betas)):
                break
        return betas


def _initial_betas(sys: _DistanceSystem, N: int, planar: bool):
    """Linearised beta estimates, one strategy per null-space dimension."""
    rho = sys.rho
    if N == 1:
        L = sys.columns([(0, 0)])
        b11 = float(np.linalg.lstsq(L, rho, rcond=None)[0][0])
        return np.array([np.sqrt(abs(b11))])
    if N == 2:
        b11, b12, b22 = np.linalg.lstsq(sys.columns([(0, 0), (0, 1), (1, 1)]), rho, rcond=None)[0]
        b1, b2 = np.sqrt(abs(b11)), np.sqrt(abs(b22))
        return np.array([b1 if b12 >= 0 else -b1, b2])
    if N == 3 and not planar:
        b11, b12, b22, b13, _ = np.linalg.lstsq(
            sys.columns([(0, 0), (0, 1), (1, 1), (0, 2), (1, 2)]), rho, rcond=None)[0]
        b1, b2 = np.sqrt(abs(b11)), np.sqrt(abs(b22))
        b1 = b1 if b12 >= 0 else -b1
        return np.array([b1, b2, b13 / b1 if b1 else 0.0])
    prods = [(0, k) for k in range(N)]
    b = np.linalg.lstsq(sys.columns(prods), rho, rcond=None)[0]
    b1 = np.sqrt(abs(b[0]))
    if b1 == 0:
        return np.zeros(N)
    sgn = 1.0 if b[0] >= 0 else -1.0
    return np.concatenate([[b1], sgn * b[1:] / b1])


def _absolute_orientation(Pw, Pc):
    """Rigid R, t with ``Pc ~ R Pw + t`` (least squares)."""
    mw, mc = Pw.mean(axis=0), Pc.mean(axis=0)
    H = (Pc - mc).T @ (Pw - mw)
    R = nearest_rotation(H)
    return R, mc - R @ mw


def reprojection_error(pose: Pose, corr: CorrespondenceSet, K: CameraIntrinsics) -> float:
    """RMS pixel distance between projected world points and observed image points."""
    uv, vis = project_points(corr.world_points, pose, K)
    if not vis.all():
        return float("inf")
    res = np.linalg.norm(uv - corr.image_points, axis=1)
    return float(np.sqrt(np.mean(res**2)))


def solve_epnp(corr: CorrespondenceSet, K: CameraIntrinsics, gn_iterations: int = 10) -> PoseEstimate:
    """Estimate the camera pose; image points must already be undistorted."""
    n = len(corr)
    if n < 4:
        raise InsufficientCorrespondences(f"insufficient correspondences: {n} < 4")
    Pw = corr.world_points
    if not np.all(np.isfinite(Pw)) or not np.all(np.isfinite(corr.image_points)):
        raise PnPError("non-finite correspondence coordinates")
    ctrl = _control_points(Pw)
    planar = len(ctrl) == 3
    alphas = _barycentric(Pw, ctrl)
    xy = np.column_stack([(corr.image_points[:, 0] - K.cx) / K.fx,
                          (corr.image_points[:, 1] - K.cy) / K.fy])
    M = _system(alphas, xy)
    _, vecs = np.linalg.eigh(M.T @ M)
    max_n = len(ctrl)
    V = [vecs[:, k] for k in range(max_n)]
    best = None
    for N in range(1, max_n + 1):
        sys = _DistanceSystem(V[:N], ctrl)
        betas = sys.gauss_newton(_initial_betas(sys, N, planar), gn_iterations)
        Cc = sum(b * v.reshape(-1, 3) for b, v in zip(betas, V[:N]))
        Pc = alphas @ Cc
        if np.mean(Pc[:, 2]) < 0:
            Pc = -Pc
        if not np.all(np.isfinite(Pc)) or np.all(Pc[:, 2] <= 0):
            continue
        R, t = _absolute_orientation(Pw, Pc)
        pose = Pose(R, t)
        err = reprojection_error(pose, corr, K)
        if best is None or err < best[0]:
            best = (err, pose)
    if best is None or not np.isfinite(best[0]):
        raise PnPError("EPnP produced no valid pose")
    err, pose = best
    return PoseEstimate(pose, camera_position(pose.R, pose.t), err, n)
