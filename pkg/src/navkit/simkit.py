"""Deterministic scenario simulation and Monte Carlo orchestration.

Ground truth is generated in closed form (planar circle), by the exact
discrete propagator (constant body inputs), or from a waypoint spline with
the body inputs recovered by inverting one exact step at a time. IMU and
sensor corruption uses the counter-based Philox 4x64 generator keyed as
(seed, channel) so streams are reproducible across platforms and
languages; channel indices are fixed: gyro 0, accel 1, gyro bias walk 2,
accel bias walk 3, then one channel per sensor in catalogue order, and a
final channel for the initial estimation error draw.

Sensor scheduling: a sensor at rate f fires at t = j/f for j = 1, 2, ...,
snapped to the nearest IMU timestamp; corrections are applied after the
propagation step that lands on the snapped index.
"""

from __future__ import annotations

import concurrent.futures
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import block_diag

from .inekf import (
    AidingKind,
    AidingMeasurement,
    correct,
    correct_ext,
    error_state,
    linearize,
    mekf_correct,
    mekf_linearize,
    mekf_matrices,
)
from .liegroups import (
    GRAVITY,
    ExtendedPose,
    se23_compose,
    se23_exp,
    so3_exp,
    so3_left_jacobian,
    so3_left_jacobian_inv,
    so3_log,
    so3_Q,
)
from .se53x import (
    RiccatiState,
    Se53State,
    dvl_output,
    gps_position_output,
    gps_velocity_output,
    landmark_output,
    magnetometer_output,
    bearing_output,
    optical_flow_output,
    pitot_output,
    se53_innovation,
    se53_measurement_row,
    se53_observer_step,
    sideslip_output,
    SyncState,
    sync_observer_step,
    tilt_output,
)
from .strapdown import (
    BiasState,
    ImuNoiseSpec,
    ImuSample,
    NavBelief,
    NavBeliefExt,
    error_transition,
    propagate_pose,
    symmetrize,
)

#: Fixed channel indices for the Philox streams.
CHANNEL_GYRO = 0
CHANNEL_ACCEL = 1
CHANNEL_GYRO_BIAS = 2
CHANNEL_ACCEL_BIAS = 3
CHANNEL_SENSOR_BASE = 4

FILTER_NAMES = ("invekf", "invekf_ext", "mekf", "se53", "sync")

#: Default IMU noise densities of the circular GPS-aided scenario.
DEFAULT_IMU_NOISE = ImuNoiseSpec(gyro_psd=np.deg2rad(0.2) ** 2,
                                 accel_psd=0.05 ** 2)

#: Horizontal reference direction used by the magnetometer presets.
MAG_FIELD = np.array([1.0, 0.0, 0.0])

#: Prior spread of the enlarged-group observer runs: velocity, position,
#: then the nine frame-column entries (sized to the preset initial errors).
SE53_P0_DIAG = tuple([0.25] * 3 + [0.25] * 3 + [0.05] * 9)

#: Event-correction gains of the synchronizing-observer runs.
SYNC_L_GAIN = (10.0, 20.0)
SYNC_RHO = 0.3


def channel_rng(seed: int, channel: int) -> np.random.Generator:
    """Philox stream for one noise channel of one run."""
    return np.random.Generator(np.random.Philox(key=[int(seed), int(channel)]))


# --- scenario description -------------------------------------------------


@dataclass(frozen=True)
class CircularPlanar:
    """Level circle of given radius traversed at constant speed."""

    radius: float
    speed: float

    def __post_init__(self):
        if not (self.radius > 0.0 and self.speed > 0.0):
            raise ValueError("radius and speed must be positive")


@dataclass(frozen=True)
class ConstantInput:
    """Constant body angular rate and specific force.

    When the spin is purely about the vertical axis the initial velocity is
    placed on the induced steady circle of radius |a_y/w_z| / |w_z|.
    """

    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(3))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(3))
        if not (np.isfinite(self.gyro).all() and np.isfinite(self.accel).all()):
            raise ValueError("gyro and accel must be finite")


@dataclass(frozen=True)
class WaypointSpline:
    """Cubic spline through timed position waypoints, heading along the
    horizontal velocity."""

    times: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).reshape(-1)
        p = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(t) != len(p) or len(t) < 4:
            raise ValueError("need at least four timed waypoints")
        if not np.all(np.diff(t) > 0.0):
            raise ValueError("waypoint times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", p)


@dataclass(frozen=True)
class SensorSpec:
    """One aiding sensor: kind, rate, per-axis noise std, fixed quantities."""

    kind: AidingKind
    rate: float
    noise_std: float
    reference: np.ndarray | None = None
    lever_arm: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "kind", AidingKind(self.kind))
        if not self.rate > 0.0:
            raise ValueError("sensor rate must be positive")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be non-negative")
        if self.reference is not None:
            object.__setattr__(
                self, "reference", np.asarray(self.reference, dtype=float).reshape(3))
        object.__setattr__(
            self, "lever_arm", np.asarray(self.lever_arm, dtype=float).reshape(3))


@dataclass(frozen=True)
class Scenario:
    """Complete description of one reproducible simulation run."""

    trajectory: CircularPlanar | ConstantInput | WaypointSpline
    duration: float
    imu_rate: float = 100.0
    sensors: tuple[SensorSpec, ...] = ()
    init_error: tuple[float, float, float] = (10.0, 0.0, 0.0)
    seed: int = 0
    imu_noise: ImuNoiseSpec = DEFAULT_IMU_NOISE

    def __post_init__(self):
        if not self.duration > 0.0:
            raise ValueError("duration must be positive")
        if not self.imu_rate > 0.0:
            raise ValueError("imu_rate must be positive")
        object.__setattr__(self, "sensors", tuple(self.sensors))
        err = tuple(float(v) for v in self.init_error)
        if len(err) != 3 or any(v < 0.0 for v in err):
            raise ValueError("init_error must be three non-negative magnitudes")
        object.__setattr__(self, "init_error", err)
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def dt(self) -> float:
        return 1.0 / self.imu_rate

    @property
    def steps(self) -> int:
        return int(round(self.duration * self.imu_rate))


# --- truth generation -----------------------------------------------------


@dataclass(frozen=True)
class TruthStream:
    """Ground-truth poses at every IMU instant plus the ideal body signals.

    Poses are sampled at n+1 instants; the n body-signal rows are constant
    over each interval and reproduce the pose sequence exactly under the
    discrete propagator.
    """

    t: np.ndarray
    rot: np.ndarray
    vel: np.ndarray
    pos: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    dt: float

    @property
    def steps(self) -> int:
        return self.gyro.shape[0]

    def pose(self, k: int) -> ExtendedPose:
        return ExtendedPose(self.rot[k], self.vel[k], self.pos[k])


def _circle_truth(traj: CircularPlanar, n: int, dt: float) -> TruthStream:
    omega = traj.speed / traj.radius
    t = np.arange(n + 1) * dt
    psi = omega * t
    c, s = np.cos(psi), np.sin(psi)
    rot = np.zeros((n + 1, 3, 3))
    rot[:, 0, 0] = c
    rot[:, 0, 1] = -s
    rot[:, 1, 0] = s
    rot[:, 1, 1] = c
    rot[:, 2, 2] = 1.0
    vel = np.stack([traj.speed * c, traj.speed * s, np.zeros(n + 1)], axis=1)
    pos = np.stack([traj.radius * s, traj.radius * (1.0 - c), np.zeros(n + 1)], axis=1)
    gyro = np.tile([0.0, 0.0, omega], (n, 1))
    accel = np.tile([0.0, traj.speed * omega, -GRAVITY[2]], (n, 1))
    return TruthStream(t, rot, vel, pos, gyro, accel, dt)


def _constant_input_truth(traj: ConstantInput, n: int, dt: float) -> TruthStream:
    w, a = traj.gyro, traj.accel
    if abs(w[2]) > 1e-12 and abs(w[0]) < 1e-12 and abs(w[1]) < 1e-12:
        v0 = np.array([a[1] / w[2], 0.0, 0.0])
    else:
        v0 = np.zeros(3)
    t = np.arange(n + 1) * dt
    rot = np.zeros((n + 1, 3, 3))
    vel = np.zeros((n + 1, 3))
    pos = np.zeros((n + 1, 3))
    x = ExtendedPose(np.eye(3), v0, np.zeros(3))
    sample = ImuSample(0.0, w, a)
    bias = BiasState.zero()
    for k in range(n + 1):
        rot[k], vel[k], pos[k] = x.rot, x.vel, x.pos
        if k < n:
            x = propagate_pose(x, sample, bias, dt)
    return TruthStream(t, rot, vel, pos, np.tile(w, (n, 1)), np.tile(a, (n, 1)), dt)


def _heading_frame(v: np.ndarray) -> np.ndarray:
    horiz = np.array([v[0], v[1], 0.0])
    nh = np.linalg.norm(horiz)
    if nh < 1e-6:
        raise ValueError("waypoint spline needs nonzero horizontal speed")
    r1 = horiz / nh
    r3 = np.array([0.0, 0.0, 1.0])
    r2 = np.cross(r3, r1)
    return np.column_stack([r1, r2, r3])


def _spline_truth(traj: WaypointSpline, n: int, dt: float) -> TruthStream:
    from scipy.interpolate import CubicSpline

    if traj.times[0] > 0.0 or traj.times[-1] < n * dt:
        raise ValueError("waypoints must cover the scenario duration")
    spline = CubicSpline(traj.times, traj.positions, axis=0, bc_type="natural")
    t = np.arange(n + 1) * dt
    pos = spline(t)
    vel = spline(t, 1)
    rot = np.stack([_heading_frame(v) for v in vel])
    gyro = np.zeros((n, 3))
    accel = np.zeros((n, 3))
    for k in range(n):
        # invert one exact step: rotation log gives the body rate, the
        # velocity increment gives the specific force
        w = so3_log(rot[k].T @ rot[k + 1])
        gyro[k] = w / dt
        dv = vel[k + 1] - vel[k] - GRAVITY * dt
        accel[k] = so3_left_jacobian_inv(w) @ (rot[k].T @ dv) / dt
    return TruthStream(t, rot, vel, pos, gyro, accel, dt)


def generate_truth(sc: Scenario) -> TruthStream:
    """Truth poses plus the ideal IMU stream that reproduces them."""
    n, dt = sc.steps, sc.dt
    if isinstance(sc.trajectory, CircularPlanar):
        return _circle_truth(sc.trajectory, n, dt)
    if isinstance(sc.trajectory, ConstantInput):
        return _constant_input_truth(sc.trajectory, n, dt)
    if isinstance(sc.trajectory, WaypointSpline):
        return _spline_truth(sc.trajectory, n, dt)
    raise TypeError(f"unknown trajectory type {type(sc.trajectory).__name__}")


# --- corruption -----------------------------------------------------------


@dataclass(frozen=True)
class ImuStream:
    """Measured body signals plus the true bias walks that entered them."""

    gyro: np.ndarray
    accel: np.ndarray
    gyro_bias: np.ndarray
    accel_bias: np.ndarray
    dt: float

    def sample(self, k: int, t: float) -> ImuSample:
        return ImuSample(t, self.gyro[k], self.accel[k])


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    return vecs @ np.diag(np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def corrupt(truth: TruthStream, noise: ImuNoiseSpec, seed: int) -> ImuStream:
    """Additive white noise (per-sample covariance PSD/dt) plus bias walks."""
    n, dt = truth.steps, truth.dt
    draws = {}
    for name, channel in (("gyro", CHANNEL_GYRO), ("accel", CHANNEL_ACCEL),
                          ("gyro_bias", CHANNEL_GYRO_BIAS),
                          ("accel_bias", CHANNEL_ACCEL_BIAS)):
        draws[name] = channel_rng(seed, channel).standard_normal((n, 3))
    white_g = draws["gyro"] @ _sqrt_psd(noise.gyro_psd / dt).T
    white_a = draws["accel"] @ _sqrt_psd(noise.accel_psd / dt).T
    walk_g = np.vstack([np.zeros(3),
                        np.cumsum(draws["gyro_bias"] @ _sqrt_psd(noise.gyro_bias_psd * dt).T,
                                  axis=0)])[:n]
    walk_a = np.vstack([np.zeros(3),
                        np.cumsum(draws["accel_bias"] @ _sqrt_psd(noise.accel_bias_psd * dt).T,
                                  axis=0)])[:n]
    return ImuStream(truth.gyro + walk_g + white_g,
                     truth.accel + walk_a + white_a, walk_g, walk_a, dt)


#: Kinds whose measurement is a single number rather than a 3-vector.
_SCALAR_KINDS = frozenset({AidingKind.Barometer, AidingKind.RangeToAnchor,
                           AidingKind.PitotTube, AidingKind.TiltAngle,
                           AidingKind.ZeroLateralVelocity})


def _sorted_sensors(sc: Scenario) -> list[SensorSpec]:
    order = sorted(range(len(sc.sensors)),
                   key=lambda i: (int(sc.sensors[i].kind), i))
    return [sc.sensors[i] for i in order]


def _synthesize(kind: AidingKind, pose: ExtendedPose, spec: SensorSpec,
                noise: np.ndarray):
    rot, vel, pos = pose.rot, pose.vel, pose.pos
    ref = spec.reference
    if kind is AidingKind.GpsPosition:
        return pos + rot @ spec.lever_arm + noise
    if kind is AidingKind.GpsVelocity:
        return vel + noise  # spin term added by the caller (needs the rate)
    if kind is AidingKind.Magnetometer:
        return rot.T @ ref + noise  # no renormalization (flagged convention)
    if kind is AidingKind.Landmark:
        return rot.T @ (ref - pos) + noise
    if kind is AidingKind.Dvl:
        return rot.T @ vel + noise
    if kind is AidingKind.Barometer:
        return pos[2:3] + noise
    if kind is AidingKind.RangeToAnchor:
        return np.abs(np.linalg.norm(ref - pos) + noise)
    if kind is AidingKind.PitotTube:
        wind = np.zeros(3) if ref is None else ref
        return (rot.T @ (vel - wind))[0:1] + noise
    if kind is AidingKind.OpticalFlow:
        raw = rot.T @ vel + noise
        return raw / np.linalg.norm(raw)
    if kind is AidingKind.BearingToFeature:
        raw = rot.T @ (ref - pos) + noise
        return raw / np.linalg.norm(raw)
    if kind is AidingKind.TiltAngle:
        return rot[2, 2:3] + noise
    if kind is AidingKind.ZeroLateralVelocity:
        return np.zeros(1)  # pseudo-measurement, noise enters the gain only
    raise ValueError(f"unhandled kind {kind!r}")


def aiding_events(sc: Scenario, truth: TruthStream,
                  imu: ImuStream) -> list[tuple[int, AidingMeasurement]]:
    """Noisy aiding measurements keyed by the IMU step they follow."""
    n, dt = sc.steps, sc.dt
    events: list[tuple[int, AidingMeasurement]] = []
    for i, spec in enumerate(_sorted_sensors(sc)):
        rng = channel_rng(sc.seed, CHANNEL_SENSOR_BASE + i)
        count = int(math.floor(sc.duration * spec.rate + 1e-9))
        dim = 1 if spec.kind in _SCALAR_KINDS else 3
        for j in range(1, count + 1):
            k = int(round(j / spec.rate * sc.imu_rate))
            if not 1 <= k <= n:
                continue
            noise = spec.noise_std * rng.standard_normal(dim)
            value = _synthesize(spec.kind, truth.pose(k), spec, noise)
            body_rate = imu.gyro[k - 1]
            if spec.kind is AidingKind.GpsVelocity:
                # antenna velocity uses the true rate; the filter only sees
                # the measured one
                value = value + truth.rot[k] @ np.cross(truth.gyro[k - 1],
                                                        spec.lever_arm)
            cov = max(spec.noise_std, 1e-3) ** 2 * np.eye(dim)
            events.append((k, AidingMeasurement(
                kind=spec.kind, value=value, noise_cov=cov, t=k * dt,
                reference=spec.reference, lever_arm=spec.lever_arm,
                angular_velocity=body_rate)))
    events.sort(key=lambda e: (e[0], int(e[1].kind)))
    return events


def initial_estimate(sc: Scenario, truth: TruthStream) -> ExtendedPose:
    """Apply the scenario's initial error magnitudes in random directions."""
    rng = channel_rng(sc.seed, CHANNEL_SENSOR_BASE + len(sc.sensors))
    att_deg, vel_mag, pos_mag = sc.init_error

    def direction():
        d = rng.normal(size=3)
        return d / np.linalg.norm(d)

    rot = so3_exp(np.deg2rad(att_deg) * direction()) @ truth.rot[0]
    vel = truth.vel[0] + vel_mag * direction()
    pos = truth.pos[0] + pos_mag * direction()
    return ExtendedPose(rot, vel, pos)


# --- filter runs ----------------------------------------------------------


@dataclass(frozen=True)
class RunRecord:
    """Aligned time series of one filter run against its ground truth."""

    t: np.ndarray
    err_att: np.ndarray
    err_vel: np.ndarray
    err_pos: np.ndarray
    sig_att: np.ndarray
    sig_vel: np.ndarray
    sig_pos: np.ndarray
    nees: np.ndarray
    truth_pos: np.ndarray
    est_pos: np.ndarray
    truth_yaw: np.ndarray
    est_yaw: np.ndarray
    innovation_stats: dict[str, tuple[int, float]]

    def __post_init__(self):
        n = self.t.shape[0]
        for name in ("err_att", "err_vel", "err_pos", "sig_att", "sig_vel",
                     "sig_pos", "nees", "truth_yaw", "est_yaw"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} is not aligned with t")
        for name in ("truth_pos", "est_pos"):
            if getattr(self, name).shape != (n, 3):
                raise ValueError(f"{name} is not aligned with t")


def _yaw(rot: np.ndarray) -> float:
    return float(np.arctan2(rot[1, 0], rot[0, 0]))


def _att_angle(est_rot: np.ndarray, true_rot: np.ndarray) -> float:
    return float(np.linalg.norm(so3_log(est_rot @ true_rot.T)))


class _Recorder:
    def __init__(self, n: int, dt: float):
        self.t = np.arange(n + 1) * dt
        self.err_att = np.zeros(n + 1)
        self.err_vel = np.zeros(n + 1)
        self.err_pos = np.zeros(n + 1)
        self.sig_att = np.zeros(n + 1)
        self.sig_vel = np.zeros(n + 1)
        self.sig_pos = np.zeros(n + 1)
        self.nees = np.zeros(n + 1)
        self.truth_pos = np.zeros((n + 1, 3))
        self.est_pos = np.zeros((n + 1, 3))
        self.truth_yaw = np.zeros(n + 1)
        self.est_yaw = np.zeros(n + 1)
        self.innov: dict[str, list[float]] = {}

    def mark(self, k, truth: TruthStream, rot, vel, pos,
             sig=(0.0, 0.0, 0.0), nees=0.0):
        self.err_att[k] = _att_angle(rot, truth.rot[k])
        self.err_vel[k] = float(np.linalg.norm(vel - truth.vel[k]))
        self.err_pos[k] = float(np.linalg.norm(pos - truth.pos[k]))
        self.sig_att[k], self.sig_vel[k], self.sig_pos[k] = sig
        self.nees[k] = nees
        self.truth_pos[k] = truth.pos[k]
        self.est_pos[k] = pos
        self.truth_yaw[k] = _yaw(truth.rot[k])
        self.est_yaw[k] = _yaw(rot)

    def note_innovation(self, kind: AidingKind, z: np.ndarray):
        self.innov.setdefault(kind.name, []).append(float(z @ z))

    def finish(self) -> RunRecord:
        stats = {name: (len(sq), float(np.sqrt(np.mean(sq))))
                 for name, sq in sorted(self.innov.items())}
        return RunRecord(self.t, self.err_att, self.err_vel, self.err_pos,
                         self.sig_att, self.sig_vel, self.sig_pos, self.nees,
                         self.truth_pos, self.est_pos, self.truth_yaw,
                         self.est_yaw, stats)


def _exact_injection(rot, vel, pos, dt: float) -> np.ndarray:
    """Noise injection with the gravity/velocity coupling terms, matching
    the library covariance step without per-step belief construction."""
    hat_g = np.array([[0.0, -GRAVITY[2], 0.0], [GRAVITY[2], 0.0, 0.0],
                      [0.0, 0.0, 0.0]])
    hat_v = np.array([[0.0, -vel[2], vel[1]], [vel[2], 0.0, -vel[0]],
                      [-vel[1], vel[0], 0.0]])
    hat_p = np.array([[0.0, -pos[2], pos[1]], [pos[2], 0.0, -pos[0]],
                      [-pos[1], pos[0], 0.0]])
    l = np.zeros((9, 6))
    l[0:3, 0:3] = dt * rot
    l[3:6, 0:3] = (0.5 * dt * dt * hat_g + dt * hat_v) @ rot
    l[3:6, 3:6] = dt * rot
    l[6:9, 0:3] = (dt ** 3 / 6.0 * hat_g + 0.5 * dt * dt * hat_v + dt * hat_p) @ rot
    l[6:9, 3:6] = 0.5 * dt * dt * rot
    return l


def _sig_from_cov(cov: np.ndarray) -> tuple[float, float, float]:
    # traces can dip a hair below zero once a zero-noise run collapses P
    return (float(np.sqrt(max(np.trace(cov[0:3, 0:3]), 0.0))),
            float(np.sqrt(max(np.trace(cov[3:6, 3:6]), 0.0))),
            float(np.sqrt(max(np.trace(cov[6:9, 6:9]), 0.0))))


def _events_by_step(events) -> dict[int, list[AidingMeasurement]]:
    grouped: dict[int, list[AidingMeasurement]] = {}
    for k, meas in events:
        grouped.setdefault(k, []).append(meas)
    return grouped


def _run_kalman(sc: Scenario, truth: TruthStream, imu: ImuStream,
                events, flavor: str) -> RunRecord:
    n, dt = sc.steps, sc.dt
    grouped = _events_by_step(events)
    init = initial_estimate(sc, truth)
    rot, vel, pos = init.rot, init.vel, init.pos
    ext = flavor == "invekf_ext"
    baseline = flavor == "mekf"
    cov = np.eye(9)
    if ext:
        cov = np.block([[cov, np.zeros((9, 6))],
                        [np.zeros((6, 9)), 1e-2 * np.eye(6)]])
        bias_g = np.zeros(3)
        bias_a = np.zeros(3)
    noise = sc.imu_noise
    a_step = error_transition(dt)
    gyro_q = noise.gyro_psd / dt
    accel_q = noise.accel_psd / dt
    rec = _Recorder(n, dt)
    rec.mark(0, truth, rot, vel, pos, _sig_from_cov(cov[:9, :9]))
    g_dt = GRAVITY * dt
    g_dt2 = 0.5 * GRAVITY * dt * dt
    for k in range(n):
        gyro_m = imu.gyro[k]
        accel_m = imu.accel[k]
        if ext:
            gyro_m = gyro_m - bias_g
            accel_m = accel_m - bias_a
        w = gyro_m * dt
        rm = so3_exp(w)
        vm = so3_left_jacobian(w) @ accel_m * dt
        pm = so3_Q(w) @ accel_m * (dt * dt)
        if baseline:
            f, _ = mekf_matrices(rot, accel_m)
            phi = np.eye(9) + dt * f
            gq = np.zeros((9, 9))
            gq[0:3, 0:3] = rot @ noise.gyro_psd @ rot.T
            gq[3:6, 3:6] = rot @ noise.accel_psd @ rot.T
            cov = phi @ cov @ phi.T + gq * dt
        else:
            l = _exact_injection(rot, vel, pos, dt)
            q = np.zeros((6, 6))
            q[:3, :3] = gyro_q
            q[3:, 3:] = accel_q
            if ext:
                a_ext = np.eye(15)
                a_ext[:9, :9] = a_step
                a_ext[:9, 9:] = l
                l_ext = np.zeros((15, 12))
                l_ext[:9, :6] = l
                l_ext[9:, 6:] = -dt * np.eye(6)
                q_ext = np.zeros((12, 12))
                q_ext[0:3, 0:3] = gyro_q
                q_ext[3:6, 3:6] = accel_q
                q_ext[6:9, 6:9] = noise.gyro_bias_psd / dt
                q_ext[9:12, 9:12] = noise.accel_bias_psd / dt
                cov = a_ext @ cov @ a_ext.T + l_ext @ q_ext @ l_ext.T
            else:
                cov = a_step @ cov @ a_step.T + l @ q @ l.T
        pos = pos + vel * dt + g_dt2 + rot @ pm
        vel = vel + g_dt + rot @ vm
        rot = rot @ rm
        cov = symmetrize(cov)
        meas_list = grouped.get(k + 1)
        if meas_list:
            pose = ExtendedPose(rot, vel, pos)
            if ext:
                belief = NavBeliefExt(pose, BiasState(bias_g, bias_a), cov)
                for m in meas_list:
                    upd = linearize(m, belief)
                    rec.note_innovation(m.kind, upd.z)
                    belief = correct_ext(belief, upd)
                bias_g = belief.bias.gyro_bias
                bias_a = belief.bias.accel_bias
            else:
                belief = NavBelief(pose, cov)
                for m in meas_list:
                    upd = (mekf_linearize if baseline else linearize)(m, belief)
                    rec.note_innovation(m.kind, upd.z)
                    belief = (mekf_correct(belief, m) if baseline
                              else correct(belief, upd))
            rot, vel, pos = belief.pose.rot, belief.pose.vel, belief.pose.pos
            cov = belief.cov
        pose_cov = cov[:9, :9]
        if baseline:
            xi = np.concatenate([so3_log(rot @ truth.rot[k + 1].T),
                                 truth.vel[k + 1] - vel,
                                 truth.pos[k + 1] - pos])
        else:
            xi = error_state(ExtendedPose(rot, vel, pos), truth.pose(k + 1))
        # tiny ridge keeps the diagnostic finite when a zero-noise run
        # collapses the covariance
        nees_val = float(xi @ np.linalg.solve(
            pose_cov + 1e-12 * np.eye(9), xi))
        rec.mark(k + 1, truth, rot, vel, pos, _sig_from_cov(pose_cov), nees_val)
    return rec.finish()


def _se53_from_aiding(m: AidingMeasurement):
    kind = m.kind
    if kind is AidingKind.GpsPosition:
        return gps_position_output(m.value, m.lever_arm)
    if kind is AidingKind.GpsVelocity:
        return gps_velocity_output(m.value, m.angular_velocity, m.lever_arm)
    if kind is AidingKind.Magnetometer:
        return magnetometer_output(m.value, m.reference)
    if kind is AidingKind.Landmark:
        return landmark_output(m.value, m.reference)
    if kind is AidingKind.Dvl:
        return dvl_output(m.value)
    if kind is AidingKind.PitotTube:
        return pitot_output(float(m.value[0]), m.reference)
    if kind is AidingKind.OpticalFlow:
        return optical_flow_output(m.value)
    if kind is AidingKind.BearingToFeature:
        return bearing_output(m.value, m.reference)
    if kind is AidingKind.TiltAngle:
        return tilt_output(float(m.value[0]), [0.0, 0.0, 1.0], [0.0, 0.0, 1.0])
    if kind is AidingKind.ZeroLateralVelocity:
        return sideslip_output(m.reference if m.reference is not None else np.zeros(3))
    raise ValueError(f"{kind.name} has no exact-linear output form")


def _run_se53(sc: Scenario, truth: TruthStream, imu: ImuStream,
              events) -> RunRecord:
    """Enlarged-group observer run with corrections at sensor timestamps.

    The observer is a continuous design; an arrival is folded in over the
    one interval it lands on, with the innovation weight set per event to
    sym(inv(C P C^T + R)) / dt. That weight makes the integrated correction
    a saturated (Kalman-style) update, so the loop stays inside the
    stability region of the step no matter how far P has grown between
    events. Position fixes enter through an output row whose auxiliary-frame
    weight scales with the fix magnitude, so noise (or stage lag, at very
    small R) slowly pumps the frame columns: expect a wandering
    position error on the order of ten metres on the noisy circle. This
    runner is a structural comparison device, not a tuned filter.
    """
    n, dt = sc.steps, sc.dt
    grouped = _events_by_step(events)
    init = initial_estimate(sc, truth)
    est = Se53State.from_parts(init.rot, init.vel, init.pos)
    rs = RiccatiState(P=np.diag(SE53_P0_DIAG), Q_gain=np.eye(3),
                      V_drive=1e-9 * np.eye(15))
    rec = _Recorder(n, dt)
    rec.mark(0, truth, est.rot, est.vel, est.pos)
    for k in range(n):
        arrivals = grouped.get(k + 1, [])
        if arrivals:
            meas = [_se53_from_aiding(m) for m in arrivals]
            c = np.vstack([se53_measurement_row(m) for m in meas])
            r_eff = block_diag(*[
                max(m.noise_cov[0, 0], 1e-6) * np.eye(len(np.atleast_1d(m.value)))
                for m in arrivals])
            s = c @ rs.P @ c.T + r_eff
            q = np.linalg.inv(s) / dt
            rs = RiccatiState(P=rs.P, Q_gain=0.5 * (q + q.T),
                              V_drive=rs.V_drive)
            for m, upd in zip(arrivals, meas):
                rec.note_innovation(m.kind, np.atleast_1d(se53_innovation(upd, est)))
        else:
            meas = []
        est, rs = se53_observer_step(est, rs, imu.sample(k, k * dt), meas, dt)
        sig = (0.0, float(np.sqrt(np.trace(rs.P[0:3, 0:3]))),
               float(np.sqrt(np.trace(rs.P[3:6, 3:6]))))
        rec.mark(k + 1, truth, est.rot, est.vel, est.pos, sig)
    return rec.finish()


def _run_sync(sc: Scenario, truth: TruthStream, imu: ImuStream,
              events) -> RunRecord:
    """Synchronizing-observer run with corrections at fix timestamps.

    Between fixes the pose follows the exact strapdown step and the
    internal model follows its own closed-form drift; each fix is folded
    in over the one interval it lands on, with gains large enough that a
    single interval closes an order-one fraction of the model gap.
    """
    n, dt = sc.steps, sc.dt
    fixes = {k: m for k, m in events
             if m.kind is AidingKind.GpsPosition and np.allclose(m.lever_arm, 0.0)}
    if len(fixes) == 0 or any(m.kind is not AidingKind.GpsPosition for _, m in events):
        raise ValueError("the synchronized observer needs position fixes only,"
                         " with zero lever arm")
    init = initial_estimate(sc, truth)
    st = SyncState(pose=init, psi=np.column_stack([init.vel, init.pos]),
                   l_gain=SYNC_L_GAIN, rho=SYNC_RHO)
    rec = _Recorder(n, dt)
    rec.mark(0, truth, init.rot, init.vel, init.pos)
    for k in range(n):
        sample = imu.sample(k, k * dt)
        meas = fixes.get(k + 1)
        if meas is not None:
            rec.note_innovation(meas.kind, meas.value - st.pose.pos)
            st = sync_observer_step(st, sample, meas.value, dt)
        else:
            pose = propagate_pose(st.pose, sample, BiasState.zero(), dt)
            psi = np.column_stack([
                st.psi[:, 0] + GRAVITY * dt,
                st.psi[:, 1] + st.psi[:, 0] * dt + 0.5 * GRAVITY * dt * dt,
            ])
            st = SyncState(pose=pose, psi=psi, l_gain=st.l_gain, rho=st.rho)
        rec.mark(k + 1, truth, st.pose.rot, st.pose.vel, st.pose.pos)
    return rec.finish()


def run_filter(sc: Scenario, filter_name: str) -> RunRecord:
    """Full prediction-correction run of one filter over one scenario."""
    if filter_name not in FILTER_NAMES:
        raise ValueError(f"unknown filter {filter_name!r}; choose from {FILTER_NAMES}")
    truth = generate_truth(sc)
    imu = corrupt(truth, sc.imu_noise, sc.seed)
    events = aiding_events(sc, truth, imu)
    if filter_name in ("invekf", "invekf_ext", "mekf"):
        return _run_kalman(sc, truth, imu, events, filter_name)
    if filter_name == "se53":
        return _run_se53(sc, truth, imu, events)
    return _run_sync(sc, truth, imu, events)


# --- Monte Carlo ----------------------------------------------------------


@dataclass(frozen=True)
class MonteCarloSummary:
    """Per-time quantiles over runs plus endpoint statistics."""

    t: np.ndarray
    quantiles: dict[str, dict[str, np.ndarray]]
    nees_mean: np.ndarray
    failure_count: int
    n_runs: int
    final_est_pos: np.ndarray
    final_truth_pos: np.ndarray


_QUANTS = (0.05, 0.5, 0.95)


def _mc_worker(args):
    sc, filter_name, r = args
    run_sc = replace(sc, seed=sc.seed + r)
    try:
        rec = run_filter(run_sc, filter_name)
    except (ValueError, np.linalg.LinAlgError) as exc:
        return r, None, repr(exc)
    return r, rec, None


def monte_carlo(sc: Scenario, filter_name: str, n_runs: int,
                jobs: int = 1) -> MonteCarloSummary:
    """Runs r = 0..n-1 with seed = scenario seed + r; deterministic fold."""
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    tasks = [(sc, filter_name, r) for r in range(n_runs)]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_mc_worker, tasks))
    else:
        results = [_mc_worker(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    records = [rec for _, rec, _ in results if rec is not None]
    failures = sum(1 for _, rec, _ in results if rec is None)
    if not records:
        raise ValueError("every Monte Carlo run failed")
    t = records[0].t
    quantiles = {}
    for name in ("err_att", "err_vel", "err_pos"):
        stack = np.stack([getattr(rec, name) for rec in records])
        quantiles[name] = {f"q{int(100 * q):02d}": np.quantile(stack, q, axis=0)
                           for q in _QUANTS}
    nees_mean = np.mean(np.stack([rec.nees for rec in records]), axis=0)
    final_est = np.stack([rec.est_pos[-1] for rec in records])
    return MonteCarloSummary(t, quantiles, nees_mean, failures, n_runs,
                             final_est, records[0].truth_pos[-1])


# --- dead-reckoning comparison and sampling studies ------------------------


def dead_reckoning_paths(sc: Scenario) -> dict[str, np.ndarray]:
    """Noise-free integration of the ideal IMU with the exact and the
    first-order increment, against truth."""
    truth = generate_truth(sc)
    out = {"t": truth.t, "truth": truth.pos.copy()}
    for label, classical in (("exact", False), ("classical", True)):
        x = truth.pose(0)
        path = np.zeros_like(truth.pos)
        path[0] = x.pos
        for k in range(truth.steps):
            x = propagate_pose(x, ImuSample(k * truth.dt, truth.gyro[k],
                                            truth.accel[k]),
                               BiasState.zero(), truth.dt, classical=classical)
            path[k + 1] = x.pos
        out[label] = path
    return out


def banana_samples(seed: int = 0, n: int = 230,
                   distances: tuple[float, ...] = (5.0, 10.0, 20.0),
                   yaw_std: float = np.deg2rad(10.0),
                   x_std: float = 0.8, y_std: float = 1.6) -> dict:
    """Pose clouds around means along the x axis under two conventions.

    The same tangent draws are mapped either additively (flat cloud) or
    through the group exponential acting on the mean (curved cloud whose
    bend grows with the distance from the origin).
    """
    rng = channel_rng(seed, 0)
    out = {}
    for d in distances:
        mean = ExtendedPose(np.eye(3), np.zeros(3), np.array([d, 0.0, 0.0]))
        draws = rng.standard_normal((n, 3)) * [yaw_std, x_std, y_std]
        flat = np.stack([d + draws[:, 1], draws[:, 2], draws[:, 0]], axis=1)
        curved = np.zeros((n, 3))
        for i, (yaw, dx, dy) in enumerate(draws):
            xi = np.zeros(9)
            xi[2] = yaw
            xi[6] = dx
            xi[7] = dy
            x = se23_compose(se23_exp(xi), mean)
            curved[i] = [x.pos[0], x.pos[1], _yaw(x.rot)]
        out[d] = {"flat": flat, "curved": curved}
    return out


# --- scenario presets -----------------------------------------------------


def scenario_circle_gps(seed: int = 0, with_mag: bool = False,
                        duration: float = 60.0) -> Scenario:
    """Circular GPS-aided scenario: 20 m radius at 3 m/s, IMU at 100 Hz,
    10 Hz position fixes (0.5 m/axis), optional 20 Hz field direction
    (std 0.05), 10 degree initial attitude error."""
    sensors = [SensorSpec(AidingKind.GpsPosition, 10.0, 0.5)]
    if with_mag:
        sensors.append(SensorSpec(AidingKind.Magnetometer, 20.0, 0.05,
                                  reference=MAG_FIELD))
    return Scenario(trajectory=CircularPlanar(20.0, 3.0), duration=duration,
                    imu_rate=100.0, sensors=tuple(sensors),
                    init_error=(10.0, 0.0, 0.0), seed=seed)


def scenario_constant_turn(seed: int = 0, duration: float = 60.0,
                           imu_rate: float = 10.0) -> Scenario:
    """Constant-input turn (0.4 rad/s, 12.5 m radius) at a coarse IMU rate
    where the first-order increment visibly drifts."""
    return Scenario(trajectory=ConstantInput([0.0, 0.0, 0.4], [0.0, 2.0, -9.81]),
                    duration=duration, imu_rate=imu_rate, sensors=(),
                    init_error=(0.0, 0.0, 0.0), seed=seed)


def scenario_dead_reckoning(seed: int = 0, duration: float = 60.0) -> Scenario:
    """Circle scenario without aiding, for endpoint-cloud studies."""
    return Scenario(trajectory=CircularPlanar(20.0, 3.0), duration=duration,
                    imu_rate=100.0, sensors=(), init_error=(0.0, 0.0, 0.0),
                    seed=seed)


# --- artifact serialization -----------------------------------------------

CSV_HEADER_TOKEN = "# navkit-run-v1"
_CSV_COLUMNS = ("t", "err_att_rad", "err_vel", "err_pos", "sig_att",
                "sig_vel", "sig_pos", "nees", "truth_x", "truth_y", "truth_z",
                "est_x", "est_y", "est_z", "truth_yaw", "est_yaw")


def write_run_csv(rec: RunRecord, path) -> None:
    """Lossless (17 significant digit) CSV with a versioned header."""
    cols = np.column_stack([
        rec.t, rec.err_att, rec.err_vel, rec.err_pos, rec.sig_att,
        rec.sig_vel, rec.sig_pos, rec.nees, rec.truth_pos, rec.est_pos,
        rec.truth_yaw, rec.est_yaw,
    ])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER_TOKEN + "\n")
        fh.write("# " + ",".join(_CSV_COLUMNS) + "\n")
        for row in cols:
            fh.write(",".join("%.17g" % v for v in row) + "\n")


def read_run_csv(path) -> dict[str, np.ndarray]:
    """Columns of a run CSV keyed by name."""
    data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    if data.shape[1] != len(_CSV_COLUMNS):
        raise ValueError("unexpected column count in run CSV")
    return {name: data[:, i] for i, name in enumerate(_CSV_COLUMNS)}
