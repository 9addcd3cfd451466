"""Almost-globally convergent observers on an enlarged pose-velocity group.

Two designs share this module. The first enlarges the state with an
auxiliary orthonormal frame so that the body-frame translational estimation
error obeys an exactly linear time-varying system; a Riccati gain corrects
it, and a complementary-filter term steers the attitude through the
estimated frame columns. The second keeps the ordinary pose state but runs
a synchronized 3x2 auxiliary integrator so that a coupled error signal
obeys constant linear dynamics under constant gains.

All continuous dynamics are integrated with classical RK4 at the IMU rate;
rotations are re-projected onto the orthogonal group after each step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .inekf import DegenerateMeasurement
from .liegroups import GRAVITY, SHIFT2, ExtendedPose, rotation_project, so3_hat
from .strapdown import ImuSample, symmetrize


class LostPositivity(ValueError):
    """A Riccati covariance lost positive definiteness."""


#: Frame-alignment gains; positive and pairwise distinct.
RHO_DEFAULT = (1.0, 1.2, 1.4)

_I3 = np.eye(3)
#: Input column selector of the synchronized integrator (velocity slot).
SYNC_INPUT = np.array([1.0, 0.0])
#: Output column selector of the synchronized integrator (position slot).
SYNC_OUTPUT = np.array([0.0, 1.0])


def _vec3(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(3)
    if not np.isfinite(v).all():
        raise ValueError(f"{name} must be finite")
    return v


def se53_coupling(gravity=GRAVITY) -> np.ndarray:
    """5x5 drift of the column stack: velocity->position integrator plus the
    gravity feed through the embedded frame."""
    a = np.zeros((5, 5))
    a[0, 1] = 1.0
    a[2:, 0] = _vec3(gravity, "gravity")
    return a


def se53_F(omega, gravity=GRAVITY) -> np.ndarray:
    """15x15 rate matrix of the stacked body-frame translational error.

    Kronecker structure: transpose of the column-stack drift acting on the
    column index, minus the body angular rate acting on the row index.
    """
    w = _vec3(omega, "omega")
    return (np.kron(se53_coupling(gravity).T, _I3)
            - np.kron(np.eye(5), so3_hat(w)))


@dataclass(frozen=True)
class Se53State:
    """Estimate on the enlarged group: a rotation plus a 3x5 column stack.

    The stack columns are velocity, position, and three embedded-frame
    axes. The true frame is the identity; the estimated frame absorbs the
    attitude error while the translational error converges.
    """

    rot: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rot, dtype=float).reshape(3, 3)
        z = np.asarray(self.Z, dtype=float).reshape(3, 5)
        if not (np.isfinite(rot).all() and np.isfinite(z).all()):
            raise ValueError("state entries must be finite")
        object.__setattr__(self, "rot", rot)
        object.__setattr__(self, "Z", z)

    @classmethod
    def from_parts(cls, rot, vel, pos, frame=None) -> "Se53State":
        frame = _I3 if frame is None else np.asarray(frame, dtype=float)
        z = np.column_stack([_vec3(vel, "vel"), _vec3(pos, "pos"),
                             frame.reshape(3, 3)])
        return cls(rot=rot, Z=z)

    @property
    def vel(self) -> np.ndarray:
        return self.Z[:, 0]

    @property
    def pos(self) -> np.ndarray:
        return self.Z[:, 1]

    @property
    def frame(self) -> np.ndarray:
        return self.Z[:, 2:5]

    def frame_defect(self) -> float:
        """Orthonormality defect of the body-frame column block.

        Approaches zero as the estimate converges; monitored, not enforced.
        """
        body = self.rot.T @ self.frame
        return float(np.linalg.norm(body.T @ body - _I3))


@dataclass(frozen=True)
class Se53Measurement:
    """One processed aiding output with its exact-linear row factors.

    ``y`` is the processed output, ``H`` selects output components, and
    ``r`` selects the column combination of the state stack being observed.
    The innovation against any estimate is exactly linear in the stacked
    body-frame translational error, with zero remainder at any magnitude.
    """

    H: np.ndarray
    r: np.ndarray
    y: np.ndarray
    kind: str = ""

    def __post_init__(self):
        h = np.atleast_2d(np.asarray(self.H, dtype=float))
        r = np.asarray(self.r, dtype=float).reshape(5)
        y = np.atleast_1d(np.asarray(self.y, dtype=float)).reshape(-1)
        if h.shape[1] != 3:
            raise ValueError("H must have three columns")
        if y.shape[0] != h.shape[0]:
            raise ValueError("y length must match the rows of H")
        if not (np.isfinite(h).all() and np.isfinite(r).all()
                and np.isfinite(y).all()):
            raise ValueError("measurement entries must be finite")
        object.__setattr__(self, "H", h)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "y", y)


def se53_measurement_row(m: Se53Measurement) -> np.ndarray:
    """Row block mapping the stacked translational error to the innovation."""
    return -np.kron(m.r[None, :], m.H)


def se53_innovation(m: Se53Measurement, st: Se53State) -> np.ndarray:
    """Processed output minus its prediction from the estimate."""
    return m.y - m.H @ (st.rot.T @ st.Z @ m.r)


def _unit(direction, name: str) -> np.ndarray:
    d = _vec3(direction, name)
    n = np.linalg.norm(d)
    if n < 1e-6:
        raise DegenerateMeasurement(f"{name} has near-zero norm")
    return d / n


def gps_position_output(fix, lever_arm) -> Se53Measurement:
    """Position fix with a known body-frame antenna offset.

    The processed output is the (constant) offset itself; the fix enters
    the column selector.
    """
    return Se53Measurement(H=_I3, r=np.concatenate([[0.0, -1.0], _vec3(fix, "fix")]),
                           y=_vec3(lever_arm, "lever_arm"), kind="gps-position")


def landmark_output(seen, point) -> Se53Measurement:
    """Body-frame sighting of a known fixed point."""
    return Se53Measurement(H=_I3, r=np.concatenate([[0.0, -1.0], _vec3(point, "point")]),
                           y=_vec3(seen, "seen"), kind="landmark")


def bearing_output(direction, point) -> Se53Measurement:
    """Unit bearing toward a known fixed point; processed output is the
    zero transverse component."""
    b = _unit(direction, "direction")
    return Se53Measurement(H=_I3 - np.outer(b, b),
                           r=np.concatenate([[0.0, -1.0], _vec3(point, "point")]),
                           y=np.zeros(3), kind="bearing")


def tilt_output(value, body_axis, reference) -> Se53Measurement:
    """Projection of a known inertial direction onto a known body axis."""
    return Se53Measurement(H=_vec3(body_axis, "body_axis")[None, :],
                           r=np.concatenate([[0.0, 0.0], _vec3(reference, "reference")]),
                           y=np.atleast_1d(float(value)), kind="tilt")


def magnetometer_output(seen, field_dir) -> Se53Measurement:
    """Body-frame sighting of a known inertial direction."""
    return Se53Measurement(H=_I3,
                           r=np.concatenate([[0.0, 0.0], _vec3(field_dir, "field_dir")]),
                           y=_vec3(seen, "seen"), kind="magnetometer")


def pitot_output(airspeed, wind) -> Se53Measurement:
    """Forward-axis airspeed against a known inertial wind."""
    return Se53Measurement(H=_I3[0][None, :],
                           r=np.concatenate([[1.0, 0.0], -_vec3(wind, "wind")]),
                           y=np.atleast_1d(float(airspeed)), kind="pitot")


def dvl_output(seen) -> Se53Measurement:
    """Body-frame velocity measurement."""
    r = np.zeros(5)
    r[0] = 1.0
    return Se53Measurement(H=_I3, r=r, y=_vec3(seen, "seen"), kind="dvl")


def gps_velocity_output(fix, body_rate, lever_arm) -> Se53Measurement:
    """Velocity fix with a known antenna offset; the processed output is the
    (known) offset swing, the fix enters the column selector."""
    swing = np.cross(_vec3(body_rate, "body_rate"), _vec3(lever_arm, "lever_arm"))
    return Se53Measurement(H=_I3,
                           r=np.concatenate([[-1.0, 0.0], _vec3(fix, "fix")]),
                           y=swing, kind="gps-velocity")


def optical_flow_output(direction) -> Se53Measurement:
    """Unit flow direction; processed output is the zero transverse
    velocity component."""
    f = _unit(direction, "direction")
    r = np.zeros(5)
    r[0] = 1.0
    return Se53Measurement(H=_I3 - np.outer(f, f), r=r, y=np.zeros(3),
                           kind="optical-flow")


def sideslip_output(wind) -> Se53Measurement:
    """Zero-lateral-airspeed pseudo-measurement against a known wind."""
    return Se53Measurement(H=_I3[1][None, :],
                           r=np.concatenate([[1.0, 0.0], -_vec3(wind, "wind")]),
                           y=np.zeros(1), kind="zero-sideslip")


def processed_noise_cov(m: Se53Measurement, st: Se53State, raw_cov) -> np.ndarray:
    """First-order transport of the raw sensor covariance into innovation
    space, evaluated at the current estimate.

    Pass-through for kinds whose processed output is the raw reading
    (landmark, magnetometer, dvl, tilt, pitot, zero-sideslip). Fix-type
    kinds map through the estimated frame block; projector kinds map the
    raw unit-direction noise through the projected prediction. Approximate
    by construction.
    """
    raw = np.atleast_2d(np.asarray(raw_cov, dtype=float))
    if raw.shape[0] != raw.shape[1]:
        raise ValueError("raw_cov must be square")
    if m.kind in ("landmark", "magnetometer", "dvl", "tilt", "pitot",
                  "zero-sideslip"):
        if raw.shape[0] != m.y.shape[0]:
            raise ValueError("raw_cov must match the output dimension")
        return raw
    if m.kind in ("gps-position", "gps-velocity"):
        jac = -(st.rot.T @ st.frame)
        return jac @ raw @ jac.T
    if m.kind in ("bearing", "optical-flow"):
        # recover the projector axis; the sign ambiguity cancels below
        eigval, eigvec = np.linalg.eigh(m.H)
        axis = eigvec[:, np.argmin(eigval)]
        predicted = st.rot.T @ st.Z @ m.r
        jac = (axis @ predicted) * _I3 + np.outer(axis, predicted)
        return jac @ raw @ jac.T
    raise ValueError(f"unknown kind: {m.kind!r}")


@dataclass(frozen=True)
class RiccatiState:
    """Gain-governing covariance together with its tuning weights.

    ``P`` drives the correction gain, ``Q_gain`` weights the stacked
    innovation, ``V_drive`` keeps the flow uniformly excited.
    """

    P: np.ndarray
    Q_gain: np.ndarray
    V_drive: np.ndarray

    def __post_init__(self):
        p = symmetrize(np.atleast_2d(np.asarray(self.P, dtype=float)))
        q = symmetrize(np.atleast_2d(np.asarray(self.Q_gain, dtype=float)))
        v = symmetrize(np.atleast_2d(np.asarray(self.V_drive, dtype=float)))
        if p.shape != v.shape:
            raise ValueError("P and V_drive must have matching shapes")
        if np.linalg.eigvalsh(p).min() <= 0.0:
            raise LostPositivity("P must be positive definite")
        for name, mat in (("Q_gain", q), ("V_drive", v)):
            if np.linalg.eigvalsh(mat).min() < -1e-12:
                raise ValueError(f"{name} must be positive semidefinite")
        object.__setattr__(self, "P", p)
        object.__setattr__(self, "Q_gain", q)
        object.__setattr__(self, "V_drive", v)


def riccati_step(rs: RiccatiState, f: np.ndarray, c: np.ndarray,
                 dt: float) -> RiccatiState:
    """One RK4 step of the matrix Riccati flow of ``P``.

    ``c`` may have zero rows (no measurements), in which case the flow
    reduces to the driven Lyapunov equation.
    """
    f = np.atleast_2d(np.asarray(f, dtype=float))
    c = np.atleast_2d(np.asarray(c, dtype=float))
    n = rs.P.shape[0]
    if f.shape != (n, n):
        raise ValueError("f must match the shape of P")
    if c.size and c.shape[1] != n:
        raise ValueError("c must have as many columns as P")
    if c.size:
        if c.shape[0] != rs.Q_gain.shape[0]:
            raise ValueError("c rows must match the Q_gain dimension")
        damp = c.T @ rs.Q_gain @ c
    else:
        damp = np.zeros((n, n))

    def rate(p):
        return f @ p + p @ f.T - p @ damp @ p + rs.V_drive

    p = rs.P
    k1 = rate(p)
    k2 = rate(p + 0.5 * dt * k1)
    k3 = rate(p + 0.5 * dt * k2)
    k4 = rate(p + dt * k3)
    p_next = symmetrize(p + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
    if np.linalg.eigvalsh(p_next).min() <= 0.0:
        raise LostPositivity("Riccati step lost positive definiteness")
    return RiccatiState(P=p_next, Q_gain=rs.Q_gain, V_drive=rs.V_drive)


def _riccati_step_robust(rs: RiccatiState, f, c, dt: float,
                         max_doublings: int = 10) -> RiccatiState:
    """Riccati step with bounded halving for stiff gain settings.

    The exact flow preserves positive definiteness, so a positivity loss is
    a discretization artifact; retry with progressively finer substeps and
    propagate the failure only when halving bottoms out.
    """
    parts = 1
    for _ in range(max_doublings + 1):
        try:
            out = rs
            for _ in range(parts):
                out = riccati_step(out, f, c, dt / parts)
            return out
        except LostPositivity:
            parts *= 2
    raise LostPositivity(
        f"Riccati flow stayed indefinite down to dt/{parts // 2}")


def riccati_gain(rs: RiccatiState, c: np.ndarray) -> np.ndarray:
    """Correction gain induced by the current covariance and weights."""
    c = np.atleast_2d(np.asarray(c, dtype=float))
    if c.size == 0:
        return np.zeros((rs.P.shape[0], 0))
    return rs.P @ c.T @ rs.Q_gain


def _rk4_se53(rot, z, rate_fn, dt):
    k1r, k1z = rate_fn(rot, z)
    k2r, k2z = rate_fn(rot + 0.5 * dt * k1r, z + 0.5 * dt * k1z)
    k3r, k3z = rate_fn(rot + 0.5 * dt * k2r, z + 0.5 * dt * k2z)
    k4r, k4z = rate_fn(rot + dt * k3r, z + dt * k3z)
    rot_next = rot + (dt / 6.0) * (k1r + 2.0 * k2r + 2.0 * k3r + k4r)
    z_next = z + (dt / 6.0) * (k1z + 2.0 * k2z + 2.0 * k3z + k4z)
    return rotation_project(rot_next), z_next


def _se53_plant_rate(rot, z, omega_hat, accel, coupling):
    rot_rate = rot @ omega_hat
    z_rate = z @ coupling
    z_rate[:, 0] += rot @ accel
    return rot_rate, z_rate


def se53_propagate(st: Se53State, sample: ImuSample, dt: float,
                   gravity=GRAVITY) -> Se53State:
    """Correction-free RK4 step of the enlarged-group dynamics."""
    coupling = se53_coupling(gravity)
    omega_hat = so3_hat(sample.gyro)

    def rate(rot, z):
        return _se53_plant_rate(rot, z, omega_hat, sample.accel, coupling)

    rot, z = _rk4_se53(st.rot, st.Z, rate, dt)
    return Se53State(rot=rot, Z=z)


def se53_observer_step(st: Se53State, rs: RiccatiState, sample: ImuSample,
                       meas, dt: float, rho=RHO_DEFAULT,
                       gravity=GRAVITY) -> tuple[Se53State, RiccatiState]:
    """One corrected RK4 step of the observer plus its Riccati flow.

    The translational correction uses the gain from the covariance at the
    start of the step with innovations re-evaluated at every RK4 stage;
    the frame-alignment correction compares the estimated frame columns
    with the inertial axes.
    """
    rho = np.asarray(rho, dtype=float).reshape(3)
    if not np.all(rho > 0.0) or len(set(rho.tolist())) != 3:
        raise ValueError("rho entries must be positive and distinct")
    meas = list(meas)
    coupling = se53_coupling(gravity)
    omega_hat = so3_hat(sample.gyro)
    if meas:
        c = np.vstack([se53_measurement_row(m) for m in meas])
    else:
        c = np.zeros((0, rs.P.shape[0]))
    gain = riccati_gain(rs, c)

    def rate(rot, z):
        rot_rate, z_rate = _se53_plant_rate(rot, z, omega_hat, sample.accel,
                                            coupling)
        frame_err = sum(
            rho[i] * np.cross(z[:, 2 + i], _I3[:, i]) for i in range(3))
        delta_rot = so3_hat(frame_err)
        if meas:
            z_stack = np.concatenate(
                [m.y - m.H @ (rot.T @ z @ m.r) for m in meas])
            delta_z = rot @ (-gain @ z_stack).reshape(3, 5, order="F")
        else:
            delta_z = 0.0
        rot_rate = rot_rate + delta_rot @ rot
        z_rate = z_rate + delta_rot @ z + delta_z
        return rot_rate, z_rate

    rot, z = _rk4_se53(st.rot, st.Z, rate, dt)
    rs_next = _riccati_step_robust(rs, se53_F(sample.gyro, gravity), c, dt)
    return Se53State(rot=rot, Z=z), rs_next


def translational_error(st: Se53State, truth: Se53State) -> np.ndarray:
    """Stacked body-frame translational error of an estimate against truth.

    Zero exactly when the estimated stack equals the attitude-aligned true
    stack; this is the quantity the Riccati correction drives to zero.
    """
    tilde_rot = st.rot @ truth.rot.T
    tilde_z = st.Z - tilde_rot @ truth.Z
    return (st.rot.T @ tilde_z).reshape(15, order="F")


def gramian_condition(omega_seq, c_seq, dt: float, gravity=GRAVITY) -> float:
    """Condition number of the finite-window observability Gramian.

    A bounded condition number over a sliding window is a practical proxy
    for the uniform-observability hypothesis behind the convergence
    guarantee; it is necessary evidence only, not a certificate.
    """
    phi = np.eye(15)
    gram = np.zeros((15, 15))
    for omega, c in zip(omega_seq, c_seq):
        c = np.atleast_2d(np.asarray(c, dtype=float))
        block = c @ phi
        gram += block.T @ block * dt
        phi = expm(se53_F(omega, gravity) * dt) @ phi
    return float(np.linalg.cond(gram))


# --- synchronized auxiliary-integrator observer ---------------------------


@dataclass(frozen=True)
class SyncState:
    """Pose estimate paired with the synchronizing 3x2 integrator.

    ``psi`` integrates the same drift as the velocity/position block but is
    driven by gravity and the position innovation only, which removes the
    attitude coupling from the error dynamics. ``l_gain`` entries must be
    positive (closed loop strictly stable); ``rho`` scales the attitude
    correction.
    """

    pose: ExtendedPose
    psi: np.ndarray
    l_gain: np.ndarray = (1.0, 2.0)
    rho: float = 1.0

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=float).reshape(3, 2)
        l_gain = np.asarray(self.l_gain, dtype=float).reshape(2)
        if not (np.isfinite(psi).all() and np.isfinite(l_gain).all()):
            raise ValueError("psi and l_gain must be finite")
        if not np.all(l_gain > 0.0):
            raise ValueError("l_gain entries must be positive")
        if not self.rho > 0.0:
            raise ValueError("rho must be positive")
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "l_gain", l_gain)
        object.__setattr__(self, "rho", float(self.rho))


def sync_closed_loop(l_gain) -> np.ndarray:
    """2x2 closed-loop matrix governing the coupled error; strictly stable
    for positive gains."""
    l_gain = np.asarray(l_gain, dtype=float).reshape(2)
    return SHIFT2 - np.outer(SYNC_OUTPUT, l_gain)


def sync_observer_step(st: SyncState, sample: ImuSample, y,
                       dt: float, gravity=GRAVITY) -> SyncState:
    """One RK4 step of the synchronized observer under a position fix."""
    y = _vec3(y, "y")
    g = _vec3(gravity, "gravity")
    l_gain = st.l_gain
    rho = st.rho
    omega_hat = so3_hat(sample.gyro)
    accel = np.asarray(sample.accel, dtype=float)

    def rate(rot, z, psi):
        pos = z @ SYNC_OUTPUT
        psi_out = psi @ SYNC_OUTPUT
        delta_rot = so3_hat(rho * np.cross(pos - psi_out, y - psi_out))
        delta_z = -delta_rot @ psi + np.outer(y - pos, l_gain)
        gamma = np.outer(y - psi_out, l_gain)
        rot_rate = rot @ omega_hat + delta_rot @ rot
        z_rate = (z @ SHIFT2 + delta_rot @ z
                  + np.outer(g + rot @ accel, SYNC_INPUT) + delta_z)
        psi_rate = psi @ SHIFT2 + np.outer(g, SYNC_INPUT) + gamma
        return rot_rate, z_rate, psi_rate

    rot0 = st.pose.rot
    z0 = np.column_stack([st.pose.vel, st.pose.pos])
    psi0 = st.psi
    k1 = rate(rot0, z0, psi0)
    k2 = rate(rot0 + 0.5 * dt * k1[0], z0 + 0.5 * dt * k1[1],
              psi0 + 0.5 * dt * k1[2])
    k3 = rate(rot0 + 0.5 * dt * k2[0], z0 + 0.5 * dt * k2[1],
              psi0 + 0.5 * dt * k2[2])
    k4 = rate(rot0 + dt * k3[0], z0 + dt * k3[1], psi0 + dt * k3[2])
    rot = rot0 + (dt / 6.0) * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
    z = z0 + (dt / 6.0) * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
    psi = psi0 + (dt / 6.0) * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
    pose = ExtendedPose(rotation_project(rot), z[:, 0], z[:, 1])
    return SyncState(pose=pose, psi=psi, l_gain=l_gain, rho=rho)


def sync_coupled_error(st: SyncState, truth: ExtendedPose) -> np.ndarray:
    """3x2 coupled error signal; obeys the constant closed-loop dynamics
    exactly when truth is known and measurements are noise-free."""
    tilde_rot = st.pose.rot @ truth.rot.T
    truth_z = np.column_stack([truth.vel, truth.pos])
    est_z = np.column_stack([st.pose.vel, st.pose.pos])
    tilde_z = est_z - tilde_rot @ truth_z
    return tilde_rot.T @ tilde_z + (_I3 - tilde_rot.T) @ st.psi
