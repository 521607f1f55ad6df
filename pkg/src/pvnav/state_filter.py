"""Fixed-structure Kalman filter fusing PnP poses with GNSS-derived velocity.

State layout: ``[x, y, z, v_x, v_y, v_z, yaw, pitch, roll]``. There is no
covariance propagation: the gain is a diagonal matrix whose position and
orientation entries are the reprojection-gated PnP weight and whose velocity
entries are a fixed confidence.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import wrap_angle

POS = slice(0, 3)
VEL = slice(3, 6)
ORI = slice(6, 9)


@dataclass(frozen=True)
class GateConfig:
    sigma: float = 0.16
    th_r: float = 1.0
    th_d: float = 10.0
    w_vel: float = 1.0
    per_axis: bool = False

    def __post_init__(self):
        if min(self.sigma, self.th_r, self.th_d, self.w_vel) <= 0:
            raise ValueError("gate parameters must be positive")


@dataclass(frozen=True)
class FilterState:
    X: np.ndarray
    timestamp: float
    weights: np.ndarray = field(default_factory=lambda: np.zeros(9))

    def __post_init__(self):
        X = np.array(self.X, dtype=float).reshape(9)
        X[ORI] = wrap_angle(X[ORI])
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float).reshape(9))

    @property
    def position(self):
        return self.X[POS]

    @property
    def velocity(self):
        return self.X[VEL]

    @property
    def orientation(self):
        return self.X[ORI]


@dataclass(frozen=True)
class Measurement:
    Z: np.ndarray
    timestamp: float
    eps_r: float = np.inf
    eps_d: float = np.inf
    has_pose: bool = True

    def __post_init__(self):
        object.__setattr__(self, "Z", np.array(self.Z, dtype=float).reshape(9))


def transition_matrix(dt: float) -> np.ndarray:
    F = np.eye(9)
    F[POS, VEL] = dt * np.eye(3)
    return F


def control_matrix(dt: float) -> np.ndarray:
    """Acceleration input acting on position and velocity."""
    B = np.zeros((9, 3))
    B[POS] = 0.5 * dt * dt * np.eye(3)
    B[VEL] = dt * np.eye(3)
    return B


def predict(state: FilterState, dt: float, U=None) -> FilterState:
    """Constant-velocity prediction over ``dt`` seconds."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    X = transition_matrix(dt) @ state.X
    if U is not None:
        X = X + control_matrix(dt) @ np.asarray(U, dtype=float)
    return FilterState(X, state.timestamp + dt, state.weights)


def pnp_weight(eps_r: float, eps_d, gate: GateConfig) -> float:
    """Confidence of a PnP measurement from its reprojection error and deviation."""
    dev_ok = (np.all(np.abs(eps_d) <= gate.th_d) if np.ndim(eps_d) else eps_d <= gate.th_d)
    if eps_r > gate.th_r or not dev_ok:
        return 0.0
    if eps_r <= 0:
        return 2 * gate.sigma
    return min(gate.th_r / eps_r * gate.sigma, 2 * gate.sigma)


def deviation(Z, previous: FilterState, per_axis: bool = False):
    d = np.asarray(Z, dtype=float)[POS] - previous.position
    return np.abs(d) if per_axis else float(np.linalg.norm(d))


def update(state: FilterState, Z: Measurement, gate: GateConfig, previous: FilterState | None = None):
    """Apply ``X <- X + K (Z - X)`` with the diagonal gain.

    ``state`` is the prediction, ``previous`` the last state estimate used to
    measure the deviation of the new pose (defaults to the prediction).
    """
    if Z.timestamp < state.timestamp - 1e-9:
        raise ValueError("measurement older than the filter state")
    ref = previous if previous is not None else state
    w_pnp = 0.0
    if Z.has_pose:
        eps_d = deviation(Z.Z, ref, gate.per_axis)
        w_pnp = pnp_weight(Z.eps_r, eps_d, gate)
    gain = np.zeros(9)
    gain[POS] = w_pnp
    gain[ORI] = w_pnp
    gain[VEL] = gate.w_vel
    innov = Z.Z - state.X
    innov[ORI] = wrap_angle(innov[ORI])
    X = state.X.copy()
    for i in range(9):
        if gain[i] != 0.0:
            X[i] = X[i] + gain[i] * innov[i]
    return FilterState(X, max(state.timestamp, Z.timestamp), gain)


def compute_th_r(samples) -> float:
    """Reprojection threshold as twice the median reprojection error."""
    s = np.asarray(list(samples), dtype=float)
    if s.size == 0:
        raise ValueError("need at least one reprojection error sample")
    return float(2.0 * np.median(s))


def derive_velocity(positions, timestamps) -> np.ndarray:
    """Velocities from a position stream; central differences, one-sided at the ends."""
    p = np.asarray(positions, dtype=float)
    t = np.asarray(timestamps, dtype=float)
    if len(p) < 2:
        raise ValueError("need at least two samples")
    if np.any(np.diff(t) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    v = np.empty_like(p)
    v[1:-1] = (p[2:] - p[:-2]) / (t[2:] - t[:-2])[:, None]
    v[0] = (p[1] - p[0]) / (t[1] - t[0])
    v[-1] = (p[-1] - p[-2]) / (t[-1] - t[-2])
    return v


def initial_state(position, velocity, orientation, timestamp: float) -> FilterState:
    X = np.concatenate([np.asarray(position, float), np.asarray(velocity, float),
                        np.asarray(orientation, float)])
    return FilterState(X, timestamp, np.ones(9))

