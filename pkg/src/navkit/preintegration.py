"""Keyframe-to-keyframe accumulation of IMU increments on the group.

An accumulated delta is independent of the keyframe state and of gravity;
applying it to a keyframe replays the whole sample stream in one composition.
The running noise covariance and the bias sensitivity are carried alongside
so sparse estimators can consume high-rate IMU data at keyframe rate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .liegroups import GRAVITY, ExtendedPose, se23_compose
from .strapdown import (
    BiasState,
    ImuNoiseSpec,
    ImuSample,
    error_transition,
    gravity_increment,
    imu_increment,
    kinematic_increment,
    noise_injection,
    symmetrize,
)


@dataclass(frozen=True)
class PreintegratedDelta:
    """Accumulated IMU motion over one keyframe interval.

    cov is the accumulated input-noise covariance (the state-independent
    term of the batch propagation); bias_jacobian is the first-order
    sensitivity of the delta to the bias estimate: shifting the estimate by
    db moves the delta by exp((bias_jacobian @ db)^) on the left. cov_ext
    is the 15x15 counterpart when the bias walk is tracked through the
    interval.
    """

    delta: ExtendedPose
    duration: float
    count: int
    cov: np.ndarray
    bias_jacobian: np.ndarray
    cov_ext: Optional[np.ndarray] = None

    @staticmethod
    def empty() -> "PreintegratedDelta":
        return PreintegratedDelta(
            ExtendedPose.identity(), 0.0, 0, np.zeros((9, 9)), np.zeros((9, 6))
        )


def delta_push(
    acc: PreintegratedDelta,
    mk: ExtendedPose,
    ak: np.ndarray,
    lk: np.ndarray,
    qk: np.ndarray,
    dt: float,
) -> PreintegratedDelta:
    """Fold one per-sample increment and its linearized matrices into the delta."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    delta = se23_compose(kinematic_increment(acc.delta, dt), mk)
    cov = symmetrize(ak @ acc.cov @ ak.T + lk @ qk @ lk.T)
    # over-estimating the bias removes signal from the inputs, hence the minus
    bias_jac = ak @ acc.bias_jacobian - lk
    return PreintegratedDelta(delta, acc.duration + dt, acc.count + 1, cov, bias_jac, acc.cov_ext)


def delta_push_ext(
    acc: PreintegratedDelta,
    mk: ExtendedPose,
    ak_ext: np.ndarray,
    lk_ext: np.ndarray,
    qk_ext: np.ndarray,
    dt: float,
) -> PreintegratedDelta:
    """Bias-augmented push: 15x15 covariance recursion, pose marginal mirrored."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    delta = se23_compose(kinematic_increment(acc.delta, dt), mk)
    prev = acc.cov_ext if acc.cov_ext is not None else np.zeros((15, 15))
    cov_ext = symmetrize(ak_ext @ prev @ ak_ext.T + lk_ext @ qk_ext @ lk_ext.T)
    bias_jac = ak_ext[:9, :9] @ acc.bias_jacobian - lk_ext[:9, :6]
    return PreintegratedDelta(
        delta, acc.duration + dt, acc.count + 1, cov_ext[:9, :9].copy(), bias_jac, cov_ext
    )


def accumulate_imu(
    samples: Iterable[ImuSample],
    dt: float,
    noise: ImuNoiseSpec,
    bias: BiasState = BiasState.zero(),
    with_bias_walk: bool = False,
    exact: bool = True,
    gravity: np.ndarray = GRAVITY,
) -> PreintegratedDelta:
    """Accumulate a bias-compensated sample stream with the standard matrices.

    The noise-injection matrix is evaluated along the keyframe-relative delta
    accumulated so far (the interval starts at the identity).
    """
    acc = PreintegratedDelta.empty()
    for sample in samples:
        mk = imu_increment(sample.gyro - bias.gyro_bias, sample.accel - bias.accel_bias, dt)
        ak = error_transition(dt, gravity)
        lk = noise_injection(acc.delta, dt, exact=exact, gravity=gravity)
        if with_bias_walk:
            ak_ext = np.eye(15)
            ak_ext[:9, :9] = ak
            ak_ext[:9, 9:] = lk
            lk_ext = np.zeros((15, 12))
            lk_ext[:9, :6] = lk
            lk_ext[9:, 6:] = -dt * np.eye(6)
            qk_ext = np.zeros((12, 12))
            qk_ext[0:3, 0:3] = noise.gyro_psd / dt
            qk_ext[3:6, 3:6] = noise.accel_psd / dt
            qk_ext[6:9, 6:9] = noise.gyro_bias_psd / dt
            qk_ext[9:12, 9:12] = noise.accel_bias_psd / dt
            acc = delta_push_ext(acc, mk, ak_ext, lk_ext, qk_ext, dt)
        else:
            qk = np.zeros((6, 6))
            qk[:3, :3] = noise.gyro_psd / dt
            qk[3:, 3:] = noise.accel_psd / dt
            acc = delta_push(acc, mk, ak, lk, qk, dt)
    return acc


def delta_apply(
    xi: ExtendedPose, acc: PreintegratedDelta, gravity: np.ndarray = GRAVITY
) -> ExtendedPose:
    """Advance a keyframe state by an accumulated interval."""
    if acc.count == 0:
        return xi
    head = se23_compose(
        gravity_increment(acc.duration, gravity), kinematic_increment(xi, acc.duration)
    )
    return se23_compose(head, acc.delta)


def batch_covariance(sigma_i: np.ndarray, acc: PreintegratedDelta, dt: float) -> np.ndarray:
    """Keyframe covariance update using the single-shot transition over count*dt."""
    sigma_i = np.asarray(sigma_i, dtype=float)
    if acc.count == 0:
        return sigma_i
    a = error_transition(acc.count * dt)
    return symmetrize(a @ sigma_i @ a.T + acc.cov)


def merge(
    left: PreintegratedDelta,
    right: PreintegratedDelta,
    gravity: np.ndarray = GRAVITY,
) -> PreintegratedDelta:
    """Join two adjacent intervals: shift the left delta through the right duration."""
    if left.count == 0:
        return right
    if right.count == 0:
        return left
    delta = se23_compose(kinematic_increment(left.delta, right.duration), right.delta)
    a = error_transition(right.duration, gravity)
    cov = symmetrize(a @ left.cov @ a.T + right.cov)
    bias_jac = a @ left.bias_jacobian + right.bias_jacobian
    return PreintegratedDelta(
        delta, left.duration + right.duration, left.count + right.count, cov, bias_jac
    )
