"""Discrete strapdown propagation of an extended pose from IMU samples.

The mean update composes three group increments: a gravity term, a
constant-velocity kinematic term, and a closed-form IMU increment. The
companion covariance update propagates the right-invariant error through
the matching linearized transition and noise-injection matrices, with or
without the gyro/accel bias augmentation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .liegroups import (
    GRAVITY,
    ExtendedPose,
    rotation_project,
    se23_compose,
    se23_left_jacobian,
    se23_log,
    so3_Q,
    so3_exp,
    so3_hat,
    so3_left_jacobian,
    so3_left_jacobian_inv,
)


class NonPSD(ValueError):
    """A propagated covariance lost positive semidefiniteness."""


def _vec3(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(3)
    if not np.isfinite(v).all():
        raise ValueError(f"{name} must be finite")
    return v


def _psd3(value, name: str) -> np.ndarray:
    """Coerce a scalar, per-axis diagonal, or full 3x3 into a 3x3 PSD matrix."""
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        m = np.eye(3) * float(a)
    elif a.shape == (3,):
        m = np.diag(a)
    elif a.shape == (3, 3):
        m = 0.5 * (a + a.T)
    else:
        raise ValueError(f"{name} must be a scalar, length-3, or 3x3")
    if not np.isfinite(m).all():
        raise ValueError(f"{name} must be finite")
    if np.linalg.eigvalsh(m).min() < -1e-12:
        raise ValueError(f"{name} must be positive semidefinite")
    return m


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _check_cov(cov: np.ndarray, dim: int, tol: float = 1e-8) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (dim, dim):
        raise ValueError(f"covariance must be {dim}x{dim}")
    if np.abs(cov - cov.T).max() > 1e-10:
        raise ValueError("covariance must be symmetric")
    return cov


@dataclass(frozen=True)
class ImuSample:
    """One measured gyro/accel pair at time t (body rates, specific force)."""

    t: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.t):
            raise ValueError("t must be finite")
        object.__setattr__(self, "gyro", _vec3(self.gyro, "gyro"))
        object.__setattr__(self, "accel", _vec3(self.accel, "accel"))


@dataclass(frozen=True)
class ImuNoiseSpec:
    """Continuous-time noise intensities (PSDs) for the IMU channels.

    Each entry accepts a scalar, a per-axis triple, or a full 3x3 matrix;
    discrete per-sample covariance is PSD/dt, bias random-walk growth PSD*dt.
    """

    gyro_psd: np.ndarray
    accel_psd: np.ndarray
    gyro_bias_psd: np.ndarray = 0.0
    accel_bias_psd: np.ndarray = 0.0

    def __post_init__(self):
        for name in ("gyro_psd", "accel_psd", "gyro_bias_psd", "accel_bias_psd"):
            object.__setattr__(self, name, _psd3(getattr(self, name), name))


@dataclass(frozen=True)
class BiasState:
    """Current gyro and accelerometer bias estimates."""

    gyro_bias: np.ndarray
    accel_bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gyro_bias", _vec3(self.gyro_bias, "gyro_bias"))
        object.__setattr__(self, "accel_bias", _vec3(self.accel_bias, "accel_bias"))

    @staticmethod
    def zero() -> "BiasState":
        return BiasState(np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class NavBelief:
    """Extended pose with a 9x9 covariance of the right-invariant error.

    Block order of the error coordinates: attitude, velocity, position.
    """

    pose: ExtendedPose
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "cov", _check_cov(self.cov, 9))


@dataclass(frozen=True)
class NavBeliefExt:
    """Pose-plus-bias belief with a 15x15 covariance (pose error, then bias)."""

    pose: ExtendedPose
    bias: BiasState
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "cov", _check_cov(self.cov, 15))


# ---------------------------------------------------------------------------
# mean propagation

def gravity_increment(dt: float, gravity: np.ndarray = GRAVITY) -> ExtendedPose:
    """Contribution of gravity over dt: Gamma(I, g dt, g dt^2 / 2)."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    g = np.asarray(gravity, dtype=float).reshape(3)
    return ExtendedPose(np.eye(3), g * dt, 0.5 * g * dt * dt)


def kinematic_increment(x: ExtendedPose, dt: float) -> ExtendedPose:
    """Constant-velocity flow over dt: only the position advances."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    return ExtendedPose(x.rot, x.vel, x.pos + x.vel * dt)


def imu_increment(gyro_hat, accel_hat, dt: float) -> ExtendedPose:
    """Closed-form increment for constant bias-compensated inputs over dt.

    Rotation exp(w^ dt), velocity J_l(w dt) a dt, position Q_l(w dt) a dt^2.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    w = _vec3(gyro_hat, "gyro_hat") * dt
    a = _vec3(accel_hat, "accel_hat")
    return ExtendedPose(so3_exp(w), so3_left_jacobian(w) @ a * dt, so3_Q(w) @ a * dt * dt)


def classical_imu_increment(gyro_hat, accel_hat, dt: float) -> ExtendedPose:
    """Small-rotation variant (J_l -> I, Q_l -> I/2) of imu_increment."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    w = _vec3(gyro_hat, "gyro_hat") * dt
    a = _vec3(accel_hat, "accel_hat")
    return ExtendedPose(so3_exp(w), a * dt, 0.5 * a * dt * dt)


def propagate_pose(
    x: ExtendedPose,
    sample: ImuSample,
    bias: BiasState,
    dt: float,
    gravity: np.ndarray = GRAVITY,
    classical: bool = False,
) -> ExtendedPose:
    """One discrete strapdown step: gravity, kinematics, then the IMU increment."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    gyro_hat = sample.gyro - bias.gyro_bias
    accel_hat = sample.accel - bias.accel_bias
    if classical:
        m = classical_imu_increment(gyro_hat, accel_hat, dt)
    else:
        m = imu_increment(gyro_hat, accel_hat, dt)
    return se23_compose(gravity_increment(dt, gravity), se23_compose(kinematic_increment(x, dt), m))


def renormalize(x: ExtendedPose, drift_tol: float = 1e-8) -> ExtendedPose:
    """Re-project the rotation block onto SO(3) once roundoff drift exceeds drift_tol."""
    r = x.rot
    if np.linalg.norm(r.T @ r - np.eye(3)) > drift_tol:
        return ExtendedPose(rotation_project(r), x.vel, x.pos)
    return x


# ---------------------------------------------------------------------------
# covariance propagation

def error_transition(dt: float, gravity: np.ndarray = GRAVITY) -> np.ndarray:
    """9x9 transition of the invariant error over dt; entries are polynomial in dt."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    g = so3_hat(np.asarray(gravity, dtype=float).reshape(3))
    a = np.eye(9)
    a[3:6, 0:3] = g * dt
    a[6:9, 0:3] = 0.5 * g * dt * dt
    a[6:9, 3:6] = dt * np.eye(3)
    return a


def noise_injection(
    x: ExtendedPose,
    dt: float,
    exact: bool = True,
    gravity: np.ndarray = GRAVITY,
) -> np.ndarray:
    """9x6 map from per-sample IMU noise to invariant-error growth.

    The exact form carries the second-order gravity/velocity coupling terms;
    the simplified form keeps only the O(dt) blocks. Both coincide as dt -> 0.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    r = x.rot
    vx = so3_hat(x.vel)
    px = so3_hat(x.pos)
    gx = so3_hat(np.asarray(gravity, dtype=float).reshape(3))
    out = np.zeros((9, 6))
    out[0:3, 0:3] = dt * r
    out[3:6, 3:6] = dt * r
    if exact:
        out[3:6, 0:3] = (0.5 * gx * dt * dt + dt * vx) @ r
        out[6:9, 0:3] = (gx * dt ** 3 / 6.0 + 0.5 * vx * dt * dt + dt * px) @ r
        out[6:9, 3:6] = 0.5 * dt * dt * r
    else:
        out[3:6, 0:3] = dt * vx @ r
        out[6:9, 0:3] = dt * px @ r
    return out


def _discrete_input_cov(noise: ImuNoiseSpec, dt: float) -> np.ndarray:
    q = np.zeros((6, 6))
    q[:3, :3] = noise.gyro_psd / dt
    q[3:, 3:] = noise.accel_psd / dt
    return q


def _require_psd(cov: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    if np.linalg.eigvalsh(cov).min() < -tol:
        raise NonPSD("covariance update produced a negative eigenvalue")
    return cov


def propagate_covariance(
    belief: NavBelief,
    noise: ImuNoiseSpec,
    dt: float,
    exact: bool = True,
    gravity: np.ndarray = GRAVITY,
) -> NavBelief:
    """Invariant-error covariance update for one IMU interval (pose unchanged)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    a = error_transition(dt, gravity)
    l = noise_injection(belief.pose, dt, exact=exact, gravity=gravity)
    cov = symmetrize(a @ belief.cov @ a.T + l @ _discrete_input_cov(noise, dt) @ l.T)
    return NavBelief(belief.pose, _require_psd(cov))


def increment_noise_jacobian(gyro_m, dt: float, mhat: ExtendedPose) -> np.ndarray:
    """9x6 first-order map from IMU noise to the left perturbation of the increment.

    All rotation Jacobians are held at the measured rate; raises AngleNearPi
    through the embedded logarithm for half-turn rotations.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    w = _vec3(gyro_m, "gyro_m") * dt
    inner = np.zeros((9, 6))
    inner[0:3, 0:3] = dt * np.eye(3)
    inner[3:6, 3:6] = dt * np.eye(3)
    inner[6:9, 3:6] = so3_left_jacobian_inv(w) @ so3_Q(w) * dt * dt
    return se23_left_jacobian(se23_log(mhat)) @ inner


def propagate_ext(
    belief: NavBeliefExt,
    sample: ImuSample,
    noise: ImuNoiseSpec,
    dt: float,
    exact: bool = True,
    gravity: np.ndarray = GRAVITY,
) -> NavBeliefExt:
    """Joint pose-and-bias step: biases held constant, 15x15 covariance updated."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    pose_next = propagate_pose(belief.pose, sample, belief.bias, dt, gravity)
    a = error_transition(dt, gravity)
    l = noise_injection(belief.pose, dt, exact=exact, gravity=gravity)
    a_ext = np.eye(15)
    a_ext[:9, :9] = a
    a_ext[:9, 9:] = l
    l_ext = np.zeros((15, 12))
    l_ext[:9, :6] = l
    l_ext[9:, 6:] = -dt * np.eye(6)
    q_ext = np.zeros((12, 12))
    q_ext[0:3, 0:3] = noise.gyro_psd / dt
    q_ext[3:6, 3:6] = noise.accel_psd / dt
    q_ext[6:9, 6:9] = noise.gyro_bias_psd / dt
    q_ext[9:12, 9:12] = noise.accel_bias_psd / dt
    cov = symmetrize(a_ext @ belief.cov @ a_ext.T + l_ext @ q_ext @ l_ext.T)
    return NavBeliefExt(pose_next, belief.bias, _require_psd(cov))
