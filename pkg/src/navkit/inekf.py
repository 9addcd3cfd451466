"""Measurement updates for the extended-pose filter.

A catalogue of aiding sensors is linearized against the right-invariant
error of the current belief: body-frame sightings of known references keep
a constant Jacobian, fixed-frame measurements are rewritten so the Jacobian
depends only on the measured value, and the remaining sensors fall back to
a generic linearization at the estimate. A single Kalman-style correction
consumes any of them, retracting the mean on the group. A classical
multiplicative-error filter with additive velocity/position errors is
included as a comparison baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import enum
from typing import Iterable, Optional

import numpy as np
from scipy.stats import chi2

from .liegroups import (
    GRAVITY,
    ExtendedPose,
    proj,
    se23_compose,
    se23_exp,
    se23_inverse,
    se23_log,
    so3_exp,
    so3_hat,
)
from .strapdown import (
    BiasState,
    ImuNoiseSpec,
    ImuSample,
    NavBelief,
    NavBeliefExt,
    propagate_pose,
    symmetrize,
)


class DegenerateMeasurement(ValueError):
    """The measurement geometry collapses at the linearization point."""


class SingularInnovationCov(ValueError):
    """The innovation covariance is too ill-conditioned to invert."""


COND_LIMIT = 1e12

_E1, _E2, _E3 = np.eye(3)


class AidingKind(enum.IntEnum):
    """Supported aiding sensors.

    The numeric order is the processing order when several measurements
    share a timestamp; names double as the serialization tokens.
    """

    GpsPosition = 1
    GpsVelocity = 2
    Magnetometer = 3
    Landmark = 4
    Dvl = 5
    Barometer = 6
    RangeToAnchor = 7
    PitotTube = 8
    OpticalFlow = 9
    BearingToFeature = 10
    TiltAngle = 11
    ZeroLateralVelocity = 12


_KIND_DIM = {
    AidingKind.GpsPosition: 3,
    AidingKind.GpsVelocity: 3,
    AidingKind.Magnetometer: 3,
    AidingKind.Landmark: 3,
    AidingKind.Dvl: 3,
    AidingKind.Barometer: 1,
    AidingKind.RangeToAnchor: 1,
    AidingKind.PitotTube: 1,
    AidingKind.OpticalFlow: 3,
    AidingKind.BearingToFeature: 3,
    AidingKind.TiltAngle: 1,
    AidingKind.ZeroLateralVelocity: 1,
}

# kinds whose reference vector has no sensible default
_NEEDS_REFERENCE = {
    AidingKind.Magnetometer,
    AidingKind.Landmark,
    AidingKind.RangeToAnchor,
    AidingKind.BearingToFeature,
}

_UNIT_VALUE = {AidingKind.OpticalFlow, AidingKind.BearingToFeature}


def _vec3(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(3)
    if not np.isfinite(v).all():
        raise ValueError(f"{name} must be finite")
    return v


def _spd(value, dim: int, name: str) -> np.ndarray:
    """Coerce a scalar, diagonal, or full matrix into dim x dim SPD."""
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        m = np.eye(dim) * float(a)
    elif a.shape == (dim,):
        m = np.diag(a)
    elif a.shape == (dim, dim):
        m = 0.5 * (a + a.T)
    else:
        raise ValueError(f"{name} must be a scalar, length-{dim}, or {dim}x{dim}")
    if not np.isfinite(m).all():
        raise ValueError(f"{name} must be finite")
    if np.linalg.eigvalsh(m).min() <= 0.0:
        raise ValueError(f"{name} must be positive definite")
    return m


@dataclass(frozen=True)
class AidingMeasurement:
    """One aiding sensor reading plus the fixed quantities it refers to.

    The meaning of ``reference`` depends on the kind: magnetic field
    direction (Magnetometer), feature position (Landmark, BearingToFeature),
    anchor position (RangeToAnchor), or wind velocity (PitotTube, defaults
    to still air). ``lever_arm`` and ``angular_velocity`` only matter for
    the GPS kinds. ``noise_cov`` is the covariance of the raw sensor value.
    """

    kind: AidingKind
    value: np.ndarray
    noise_cov: np.ndarray
    t: float = 0.0
    reference: Optional[np.ndarray] = None
    lever_arm: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        kind = AidingKind(self.kind)
        object.__setattr__(self, "kind", kind)
        dim = _KIND_DIM[kind]
        value = np.asarray(self.value, dtype=float).reshape(dim)
        if not np.isfinite(value).all():
            raise ValueError("value must be finite")
        object.__setattr__(self, "value", value)
        object.__setattr__(self, "noise_cov", _spd(self.noise_cov, dim, "noise_cov"))
        if kind in _UNIT_VALUE and abs(np.linalg.norm(value) - 1.0) > 1e-6:
            raise ValueError(f"{kind.name} value must be a unit vector")
        if kind is AidingKind.RangeToAnchor and value[0] < 0.0:
            raise ValueError("measured range must be non-negative")
        if self.reference is None:
            if kind in _NEEDS_REFERENCE:
                raise ValueError(f"{kind.name} requires a reference vector")
            object.__setattr__(self, "reference", np.zeros(3))
        else:
            object.__setattr__(self, "reference", _vec3(self.reference, "reference"))
        object.__setattr__(self, "lever_arm", _vec3(self.lever_arm, "lever_arm"))
        object.__setattr__(
            self, "angular_velocity", _vec3(self.angular_velocity, "angular_velocity")
        )


@dataclass(frozen=True)
class LinearizedUpdate:
    """Innovation z, Jacobian H, and effective noise V in error coordinates."""

    H: np.ndarray
    z: np.ndarray
    V: np.ndarray
    invariance_tag: str

    def __post_init__(self):
        h = np.asarray(self.H, dtype=float)
        z = np.asarray(self.z, dtype=float).reshape(-1)
        m = z.shape[0]
        if h.shape not in ((m, 9), (m, 15)):
            raise ValueError("H must be m x 9 (or m x 15 with bias columns)")
        object.__setattr__(self, "H", h)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "V", _spd(self.V, m, "V"))
        if self.invariance_tag not in ("right", "left", "generic"):
            raise ValueError("invariance_tag must be right, left, or generic")


def _body_noise_cov(x: ExtendedPose, raw: np.ndarray) -> np.ndarray:
    """Transport body-frame sensor noise: pad the raw block with zero rows
    into the homogeneous representation, conjugate by the estimated state,
    and project back to the measured components."""
    vbar = np.zeros((5, 5))
    vbar[:3, :3] = raw
    m = x.as_matrix()
    p53 = proj(5, 3)
    return symmetrize(p53 @ m @ vbar @ m.T @ p53.T)


def linearize(meas: AidingMeasurement, belief) -> LinearizedUpdate:
    """Linearize one aiding measurement against the right-invariant error.

    ``belief`` only needs a ``pose`` attribute; the covariance is not used.
    Body-frame sightings of fixed references produce a state-independent H
    with the noise rotated into the fixed frame; fixed-frame measurements
    and everything else are linearized at the estimate.
    """
    x: ExtendedPose = belief.pose
    rot, vel, pos = x.rot, x.vel, x.pos
    kind = meas.kind
    h = np.zeros((_KIND_DIM[kind], 9))

    if kind is AidingKind.GpsPosition:
        predicted = rot @ meas.lever_arm + pos
        z = predicted - meas.value
        # linearizing at the prediction makes this row the adjoint transport
        # of the exactly linear body-frame update; at the measured value the
        # residual grows with |position| x error^2 and destabilizes large
        # initial misalignments
        h[:, 0:3] = -so3_hat(predicted)
        h[:, 6:9] = np.eye(3)
        return LinearizedUpdate(h, z, meas.noise_cov, "left")

    if kind is AidingKind.GpsVelocity:
        spin = np.cross(meas.angular_velocity, meas.lever_arm)
        predicted = rot @ spin + vel
        z = predicted - meas.value
        h[:, 0:3] = -so3_hat(predicted)
        h[:, 3:6] = np.eye(3)
        return LinearizedUpdate(h, z, meas.noise_cov, "left")

    if kind is AidingKind.Magnetometer:
        z = rot @ meas.value - meas.reference
        h[:, 0:3] = -so3_hat(meas.reference)
        return LinearizedUpdate(h, z, _body_noise_cov(x, meas.noise_cov), "right")

    if kind is AidingKind.Landmark:
        z = rot @ meas.value + pos - meas.reference
        h[:, 0:3] = -so3_hat(meas.reference)
        h[:, 6:9] = np.eye(3)
        return LinearizedUpdate(h, z, _body_noise_cov(x, meas.noise_cov), "right")

    if kind is AidingKind.Dvl:
        z = rot @ meas.value - vel
        h[:, 3:6] = -np.eye(3)
        return LinearizedUpdate(h, z, _body_noise_cov(x, meas.noise_cov), "right")

    if kind is AidingKind.Barometer:
        z = meas.value - pos[2:3]
        h[0, 0:3] = _E3 @ so3_hat(pos)
        h[0, 6:9] = -_E3
        return LinearizedUpdate(h, z, meas.noise_cov, "generic")

    if kind is AidingKind.RangeToAnchor:
        offset = meas.reference - pos
        dist = np.linalg.norm(offset)
        if dist < 1e-6:
            raise DegenerateMeasurement("anchor coincides with the estimated position")
        z = 0.5 * meas.value**2 - np.array([0.5 * dist * dist])
        h[0, 0:3] = -offset @ so3_hat(pos)
        h[0, 6:9] = offset
        # half-squared-range residual: raw range noise scales with distance
        v = dist * dist * meas.noise_cov
        return LinearizedUpdate(h, z, v, "generic")

    if kind is AidingKind.PitotTube:
        body_rel = rot.T @ (vel - meas.reference)
        z = meas.value - body_rel[0:1]
        h[0, 0:3] = _E1 @ rot.T @ so3_hat(meas.reference)
        h[0, 3:6] = -rot.T[0]
        return LinearizedUpdate(h, z, meas.noise_cov, "generic")

    if kind is AidingKind.OpticalFlow:
        if np.linalg.norm(vel) < 1e-6:
            raise DegenerateMeasurement("flow direction is undefined at zero velocity")
        f = meas.value
        pi_f = np.eye(3) - np.outer(f, f)
        z = -pi_f @ (rot.T @ vel)
        h[:, 3:6] = -pi_f @ rot.T
        return LinearizedUpdate(h, z, meas.noise_cov, "generic")

    if kind is AidingKind.BearingToFeature:
        offset = meas.reference - pos
        if np.linalg.norm(offset) < 1e-6:
            raise DegenerateMeasurement("feature coincides with the estimated position")
        b = meas.value
        pi_b = np.eye(3) - np.outer(b, b)
        z = -pi_b @ (rot.T @ offset)
        h[:, 0:3] = -pi_b @ rot.T @ so3_hat(meas.reference)
        h[:, 6:9] = pi_b @ rot.T
        return LinearizedUpdate(h, z, meas.noise_cov, "generic")

    if kind is AidingKind.TiltAngle:
        z = meas.value - rot[2, 2:3]
        h[0, 0:3] = -(_E3 @ rot.T @ so3_hat(_E3))
        return LinearizedUpdate(h, z, meas.noise_cov, "generic")

    if kind is AidingKind.ZeroLateralVelocity:
        z = meas.value - (rot.T @ vel)[1:2]
        h[0, 3:6] = -rot.T[1]
        return LinearizedUpdate(h, z, meas.noise_cov, "generic")

    raise ValueError(f"unhandled kind {kind!r}")


# ---------------------------------------------------------------------------
# correction

def _gain(cov: np.ndarray, h: np.ndarray, v: np.ndarray):
    s = symmetrize(h @ cov @ h.T + v)
    if np.linalg.cond(s) >= COND_LIMIT:
        raise SingularInnovationCov("innovation covariance is numerically singular")
    return np.linalg.solve(s, h @ cov).T, s


def _posterior_cov(cov, gain, h, v, joseph: bool) -> np.ndarray:
    ikh = np.eye(cov.shape[0]) - gain @ h
    if joseph:
        return symmetrize(ikh @ cov @ ikh.T + gain @ v @ gain.T)
    return symmetrize(ikh @ cov)


def _gated_out(z: np.ndarray, s: np.ndarray, gate: Optional[float]) -> bool:
    if gate is None:
        return False
    return float(z @ np.linalg.solve(s, z)) > chi2.ppf(gate, z.shape[0])


def correct(
    belief: NavBelief,
    upd: LinearizedUpdate,
    joseph: bool = False,
    gate: Optional[float] = None,
) -> NavBelief:
    """Kalman correction with the mean retracted on the group.

    Pass ``gate`` as a probability (e.g. 0.999) to reject innovations
    outside the corresponding chi-square quantile; rejected measurements
    leave the belief untouched.
    """
    if upd.H.shape[1] != 9:
        raise ValueError("update carries bias columns; use correct_ext")
    gain, s = _gain(belief.cov, upd.H, upd.V)
    if _gated_out(upd.z, s, gate):
        return belief
    delta = gain @ upd.z
    pose = se23_compose(se23_exp(-delta), belief.pose)
    return NavBelief(pose, _posterior_cov(belief.cov, gain, upd.H, upd.V, joseph))


def correct_ext(
    belief: NavBeliefExt,
    upd: LinearizedUpdate,
    joseph: bool = False,
    gate: Optional[float] = None,
) -> NavBeliefExt:
    """Correction of the bias-augmented belief.

    A 9-column H is padded with zero bias columns; the pose is retracted on
    the group while the bias estimate moves additively with its gain rows.
    """
    m = upd.z.shape[0]
    if upd.H.shape[1] == 15:
        h = upd.H
    else:
        h = np.hstack([upd.H, np.zeros((m, 6))])
    gain, s = _gain(belief.cov, h, upd.V)
    if _gated_out(upd.z, s, gate):
        return belief
    delta = gain @ upd.z
    pose = se23_compose(se23_exp(-delta[:9]), belief.pose)
    bias = BiasState(
        belief.bias.gyro_bias + delta[9:12],
        belief.bias.accel_bias + delta[12:15],
    )
    return NavBeliefExt(pose, bias, _posterior_cov(belief.cov, gain, h, upd.V, joseph))


def correct_all(belief, measurements: Iterable[AidingMeasurement], joseph=False, gate=None):
    """Apply simultaneous measurements in catalogue order, re-linearizing
    after each correction. Works for plain and bias-augmented beliefs."""
    ext = isinstance(belief, NavBeliefExt)
    for meas in sorted(measurements, key=lambda m: int(m.kind)):
        upd = linearize(meas, belief)
        if ext:
            belief = correct_ext(belief, upd, joseph=joseph, gate=gate)
        else:
            belief = correct(belief, upd, joseph=joseph, gate=gate)
    return belief


# ---------------------------------------------------------------------------
# evaluation helpers

def error_state(estimate: ExtendedPose, truth: ExtendedPose) -> np.ndarray:
    """Right-invariant error coordinates log(estimate * truth^-1)."""
    return se23_log(se23_compose(estimate, se23_inverse(truth)))


def nees(belief: NavBelief, truth: ExtendedPose) -> float:
    """Normalized estimation error squared of the pose belief against truth."""
    xi = error_state(belief.pose, truth)
    return float(xi @ np.linalg.solve(belief.cov, xi))


# ---------------------------------------------------------------------------
# multiplicative-error baseline

def mekf_matrices(rot: np.ndarray, accel_m: np.ndarray):
    """Continuous error dynamics of the baseline filter, linearized along
    the estimated trajectory: multiplicative attitude error, additive
    velocity/position errors, driven by the measured specific force."""
    f = np.zeros((9, 9))
    f[3:6, 0:3] = so3_hat(rot @ np.asarray(accel_m, dtype=float))
    f[6:9, 3:6] = np.eye(3)
    g = np.zeros((9, 6))
    g[0:3, 0:3] = rot
    g[3:6, 3:6] = -rot
    return f, g


def mekf_step(
    belief: NavBelief,
    sample: ImuSample,
    noise: ImuNoiseSpec,
    dt: float,
    gravity: np.ndarray = GRAVITY,
) -> NavBelief:
    """Baseline propagation: same strapdown mean as the invariant filter,
    Euler-discretized trajectory-dependent covariance."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    f, g = mekf_matrices(belief.pose.rot, sample.accel)
    phi = np.eye(9) + dt * f
    q = np.zeros((6, 6))
    q[:3, :3] = noise.gyro_psd
    q[3:, 3:] = noise.accel_psd
    cov = symmetrize(phi @ belief.cov @ phi.T + g @ q @ g.T * dt)
    pose = propagate_pose(belief.pose, sample, BiasState.zero(), dt, gravity)
    return NavBelief(pose, cov)


def mekf_linearize(meas: AidingMeasurement, belief: NavBelief) -> LinearizedUpdate:
    """Linearize an aiding measurement in the baseline error coordinates.

    Only the kinds exercised by the comparison scenarios are supported.
    """
    x = belief.pose
    rot, vel, pos = x.rot, x.vel, x.pos
    kind = meas.kind
    h = np.zeros((_KIND_DIM[kind], 9))

    if kind is AidingKind.GpsPosition:
        arm = rot @ meas.lever_arm
        z = meas.value - (pos + arm)
        h[:, 0:3] = so3_hat(arm)
        h[:, 6:9] = np.eye(3)
    elif kind is AidingKind.GpsVelocity:
        spin = rot @ np.cross(meas.angular_velocity, meas.lever_arm)
        z = meas.value - (vel + spin)
        h[:, 0:3] = so3_hat(spin)
        h[:, 3:6] = np.eye(3)
    elif kind is AidingKind.Magnetometer:
        z = meas.value - rot.T @ meas.reference
        h[:, 0:3] = -rot.T @ so3_hat(meas.reference)
    elif kind is AidingKind.Landmark:
        offset = meas.reference - pos
        z = meas.value - rot.T @ offset
        h[:, 0:3] = -rot.T @ so3_hat(offset)
        h[:, 6:9] = -rot.T
    elif kind is AidingKind.Dvl:
        z = meas.value - rot.T @ vel
        h[:, 0:3] = -rot.T @ so3_hat(vel)
        h[:, 3:6] = rot.T
    else:
        raise ValueError(f"baseline filter does not support {kind.name}")
    return LinearizedUpdate(h, z, meas.noise_cov, "generic")


def mekf_correct(
    belief: NavBelief,
    meas: AidingMeasurement,
    joseph: bool = False,
    gate: Optional[float] = None,
) -> NavBelief:
    """Baseline correction: multiplicative on attitude, additive elsewhere."""
    upd = mekf_linearize(meas, belief)
    gain, s = _gain(belief.cov, upd.H, upd.V)
    if _gated_out(upd.z, s, gate):
        return belief
    delta = gain @ upd.z
    pose = ExtendedPose(
        so3_exp(-delta[0:3]) @ belief.pose.rot,
        belief.pose.vel + delta[3:6],
        belief.pose.pos + delta[6:9],
    )
    return NavBelief(pose, _posterior_cov(belief.cov, gain, upd.H, upd.V, joseph))
