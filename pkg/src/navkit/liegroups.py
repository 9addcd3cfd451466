"""Closed-form operations on SO(3) and the extended pose group.

All rotations are 3x3 proper orthogonal matrices. An extended pose packs
(rotation, velocity, position) and embeds as the 5x5 block matrix

    [ R  v  p ]
    [ 0  1  0 ]
    [ 0  0  1 ]

Tangent vectors are ordered (phi, nu, rho): attitude, velocity, position.
Every function here is pure and allocates its result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class AngleNearPi(ValueError):
    """Rotation angle within tolerance of pi: the logarithm is ill-conditioned."""


class SingularInput(ValueError):
    """Matrix input too close to singular for a stable decomposition."""


#: Branch switch for small-angle Taylor series of sin/cos coefficient ratios.
THETA_SMALL = 1e-4

#: Refusal margin around the cut locus at rotation angle pi.
TOL_PI = 1e-6

#: Gravity in the world frame (z down), m/s^2.
GRAVITY = np.array([0.0, 0.0, 9.81])

#: 2x2 nilpotent shift: couples velocity into position at the group level.
SHIFT2 = np.array([[0.0, 1.0], [0.0, 0.0]])

#: 5x5 embedding of SHIFT2 (bottom-right corner); squares to zero.
SHIFT5 = np.zeros((5, 5))
SHIFT5[3:, 3:] = SHIFT2

#: 9x9 tangent-space shift: maps (phi, nu, rho) to (0, 0, nu).
SHIFT9 = np.kron(np.outer(np.eye(3)[2], np.eye(3)[1]), np.eye(3))

#: Column selectors for the reduced (velocity, position) pair.
B_COL = np.array([[1.0], [0.0]])
C_COL = np.array([[0.0], [1.0]])


def proj(n: int, m: int) -> np.ndarray:
    """m x n selector [I_m 0] keeping the first m coordinates of n."""
    return np.hstack([np.eye(m), np.zeros((m, n - m))])


# ---------------------------------------------------------------------------
# scalar coefficient ratios
#
# Below THETA_SMALL the 4-term Taylor branch applies. The closed forms whose
# numerators cancel catastrophically for moderate angles get an extended
# series branch below THETA_MID; past that the direct formula is accurate.

THETA_MID = 0.25


def _coef_sinc(t: float) -> float:
    """sin(t)/t."""
    if t < THETA_SMALL:
        t2 = t * t
        return 1.0 - t2 / 6.0 + t2 * t2 / 120.0 - t2 * t2 * t2 / 5040.0
    return np.sin(t) / t


def _coef_one_minus_cos(t: float) -> float:
    """(1 - cos t)/t^2, computed as 2 sin(t/2)^2 / t^2 to avoid cancellation."""
    if t < THETA_SMALL:
        t2 = t * t
        return 0.5 - t2 / 24.0 + t2 * t2 / 720.0 - t2 * t2 * t2 / 40320.0
    s = np.sin(0.5 * t)
    return 2.0 * s * s / (t * t)


def _coef_t_minus_sin(t: float) -> float:
    """(t - sin t)/t^3."""
    t2 = t * t
    if t < THETA_SMALL:
        return 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2 * t2 * t2 / 362880.0
    if t < THETA_MID:
        return (1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2 * t2 * t2 / 362880.0
                + t2 * t2 * t2 * t2 / 39916800.0)
    return (t - np.sin(t)) / (t * t2)


def _coef_jinv(t: float) -> float:
    """1/t^2 - (1 + cos t)/(2 t sin t), the quadratic term of the inverse Jacobian."""
    t2 = t * t
    if t < THETA_SMALL:
        return 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0 + t2 * t2 * t2 / 1209600.0
    if t < THETA_MID:
        return (1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0 + t2 * t2 * t2 / 1209600.0
                + t2 * t2 * t2 * t2 / 47900160.0)
    return 1.0 / t2 - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t))


def _coef_q2(t: float) -> float:
    """(t^2 + 2 cos t - 2)/(2 t^4)."""
    t2 = t * t
    if t < THETA_SMALL:
        return 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0 - t2 * t2 * t2 / 3628800.0
    if t < THETA_MID:
        return (1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0 - t2 * t2 * t2 / 3628800.0
                + t2 * t2 * t2 * t2 / 479001600.0)
    return (t2 + 2.0 * np.cos(t) - 2.0) / (2.0 * t2 * t2)


def _coef_q3(t: float) -> float:
    """(2t - 3 sin t + t cos t)/(2 t^5)."""
    t2 = t * t
    if t < THETA_SMALL:
        return 1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0 - t2 * t2 * t2 / 9979200.0
    if t < THETA_MID:
        return (1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0 - t2 * t2 * t2 / 9979200.0
                + t2 * t2 * t2 * t2 / 778377600.0)
    return (2.0 * t - 3.0 * np.sin(t) + t * np.cos(t)) / (2.0 * t2 * t2 * t)


def _coef_t_over_sin(t: float) -> float:
    """t/sin(t)."""
    if t < THETA_SMALL:
        t2 = t * t
        return 1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0 + 31.0 * t2 * t2 * t2 / 15120.0
    return t / np.sin(t)


# ---------------------------------------------------------------------------
# SO(3)

def so3_hat(w) -> np.ndarray:
    """Skew matrix of a 3-vector: hat(w) @ u == cross(w, u)."""
    x, y, z = np.asarray(w, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_vee(m: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Inverse of so3_hat. Rejects matrices that are not skew-symmetric to tol."""
    m = np.asarray(m, dtype=float)
    if np.abs(m + m.T).max() > tol:
        raise ValueError("so3_vee: input is not skew-symmetric")
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(w) -> np.ndarray:
    """Rotation matrix exp(hat(w)) by the Rodrigues formula."""
    w = np.asarray(w, dtype=float)
    t = np.linalg.norm(w)
    wx = so3_hat(w)
    return np.eye(3) + _coef_sinc(t) * wx + _coef_one_minus_cos(t) * (wx @ wx)


def so3_log(r: np.ndarray) -> np.ndarray:
    """Rotation vector w with so3_exp(w) == r and ||w|| < pi.

    Raises AngleNearPi when the rotation angle is within TOL_PI of pi,
    where the logarithm loses its conditioning.
    """
    r = np.asarray(r, dtype=float)
    c = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    t = np.arccos(c)
    if t >= np.pi - TOL_PI:
        raise AngleNearPi(f"rotation angle {t:.9f} within {TOL_PI} of pi")
    axis_sin = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return _coef_t_over_sin(t) * axis_sin


def so3_left_jacobian(w) -> np.ndarray:
    """Left Jacobian J(w) with exp(hat(w)) == I + hat(w) @ J(w)."""
    w = np.asarray(w, dtype=float)
    t = np.linalg.norm(w)
    wx = so3_hat(w)
    return np.eye(3) + _coef_one_minus_cos(t) * wx + _coef_t_minus_sin(t) * (wx @ wx)


def so3_left_jacobian_inv(w) -> np.ndarray:
    """Inverse left Jacobian. Raises AngleNearPi at the sin(t) = 0 singularity."""
    w = np.asarray(w, dtype=float)
    t = np.linalg.norm(w)
    if t >= np.pi - TOL_PI:
        raise AngleNearPi(f"rotation angle {t:.9f} within {TOL_PI} of pi")
    wx = so3_hat(w)
    return np.eye(3) - 0.5 * wx + _coef_jinv(t) * (wx @ wx)


def so3_Q(w) -> np.ndarray:
    """Second-order left Jacobian: the double integral of exp(hat(w) s).

    Satisfies  int_0^D int_0^u exp(hat(w) s) ds du == so3_Q(w * D) * D^2.
    """
    w = np.asarray(w, dtype=float)
    t = np.linalg.norm(w)
    wx = so3_hat(w)
    return 0.5 * np.eye(3) + _coef_t_minus_sin(t) * wx + _coef_q2(t) * (wx @ wx)


def _Q_coupling(phi: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """Cross-coupling block of the 9x9 left Jacobian for tangent pair (phi, nu)."""
    t = np.linalg.norm(phi)
    px = so3_hat(phi)
    nx = so3_hat(nu)
    pxnx = px @ nx
    nxpx = nx @ px
    pxnxpx = pxnx @ px
    q = 0.5 * nx
    q = q + _coef_t_minus_sin(t) * (pxnx + nxpx + pxnxpx)
    q = q + _coef_q2(t) * (px @ pxnx + nxpx @ px - 3.0 * pxnxpx)
    q = q + _coef_q3(t) * (pxnxpx @ px + px @ pxnxpx)
    return q


# ---------------------------------------------------------------------------
# extended pose group

@dataclass(frozen=True)
class ExtendedPose:
    """Value type for (rotation, velocity, position). Treat fields as read-only."""

    rot: np.ndarray
    vel: np.ndarray
    pos: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rot", np.asarray(self.rot, dtype=float))
        object.__setattr__(self, "vel", np.asarray(self.vel, dtype=float).reshape(3))
        object.__setattr__(self, "pos", np.asarray(self.pos, dtype=float).reshape(3))

    @staticmethod
    def identity() -> "ExtendedPose":
        return ExtendedPose(np.eye(3), np.zeros(3), np.zeros(3))

    def as_matrix(self) -> np.ndarray:
        m = np.eye(5)
        m[:3, :3] = self.rot
        m[:3, 3] = self.vel
        m[:3, 4] = self.pos
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "ExtendedPose":
        m = np.asarray(m, dtype=float)
        if m.shape != (5, 5):
            raise ValueError("expected a 5x5 embedding")
        if np.abs(m[3:, :3]).max() > 1e-9 or np.abs(m[3:, 3:] - np.eye(2)).max() > 1e-9:
            raise ValueError("bottom rows are not the identity padding")
        return ExtendedPose(m[:3, :3], m[:3, 3], m[:3, 4])

    def validate(self, tol: float = 1e-9) -> "ExtendedPose":
        """Check the rotation invariants; returns self for chaining."""
        r = self.rot
        if np.abs(r.T @ r - np.eye(3)).max() > tol:
            raise ValueError("rotation block is not orthogonal")
        if abs(np.linalg.det(r) - 1.0) > tol:
            raise ValueError("rotation block has determinant != 1")
        if not (np.isfinite(self.vel).all() and np.isfinite(self.pos).all()):
            raise ValueError("non-finite velocity or position")
        return self


def se23_compose(x1: ExtendedPose, x2: ExtendedPose) -> ExtendedPose:
    return ExtendedPose(
        x1.rot @ x2.rot,
        x1.vel + x1.rot @ x2.vel,
        x1.pos + x1.rot @ x2.pos,
    )


def se23_inverse(x: ExtendedPose) -> ExtendedPose:
    rt = x.rot.T
    return ExtendedPose(rt, -(rt @ x.vel), -(rt @ x.pos))


def se23_hat(xi) -> np.ndarray:
    """9-vector (phi, nu, rho) to its 5x5 algebra matrix."""
    xi = np.asarray(xi, dtype=float).reshape(9)
    m = np.zeros((5, 5))
    m[:3, :3] = so3_hat(xi[:3])
    m[:3, 3] = xi[3:6]
    m[:3, 4] = xi[6:9]
    return m


def se23_vee(m: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if np.abs(m[3:, :]).max() > tol:
        raise ValueError("se23_vee: bottom rows are not zero")
    return np.concatenate([so3_vee(m[:3, :3], tol), m[:3, 3], m[:3, 4]])


def se23_exp(xi) -> ExtendedPose:
    """Group exponential: Gamma(exp(phi), J(phi) nu, J(phi) rho)."""
    xi = np.asarray(xi, dtype=float).reshape(9)
    j = so3_left_jacobian(xi[:3])
    return ExtendedPose(so3_exp(xi[:3]), j @ xi[3:6], j @ xi[6:9])


def se23_log(x: ExtendedPose) -> np.ndarray:
    """Inverse of se23_exp. Propagates AngleNearPi near the cut locus."""
    phi = so3_log(x.rot)
    jinv = so3_left_jacobian_inv(phi)
    return np.concatenate([phi, jinv @ x.vel, jinv @ x.pos])


def se23_adjoint(x: ExtendedPose) -> np.ndarray:
    """9x9 adjoint: Ad_X @ eta == vee(X @ hat(eta) @ X^-1)."""
    ad = np.zeros((9, 9))
    r = x.rot
    ad[:3, :3] = r
    ad[3:6, 3:6] = r
    ad[6:9, 6:9] = r
    ad[3:6, :3] = so3_hat(x.vel) @ r
    ad[6:9, :3] = so3_hat(x.pos) @ r
    return ad


def se23_small_adjoint(xi) -> np.ndarray:
    """9x9 algebra adjoint ad_xi: ad_xi @ eta == bracket(xi, eta)."""
    xi = np.asarray(xi, dtype=float).reshape(9)
    px = so3_hat(xi[:3])
    ad = np.zeros((9, 9))
    ad[:3, :3] = px
    ad[3:6, 3:6] = px
    ad[6:9, 6:9] = px
    ad[3:6, :3] = so3_hat(xi[3:6])
    ad[6:9, :3] = so3_hat(xi[6:9])
    return ad


def se23_left_jacobian(xi) -> np.ndarray:
    """9x9 left Jacobian in closed form (block lower triangular)."""
    xi = np.asarray(xi, dtype=float).reshape(9)
    phi, nu, rho = xi[:3], xi[3:6], xi[6:9]
    j = so3_left_jacobian(phi)
    out = np.zeros((9, 9))
    out[:3, :3] = j
    out[3:6, 3:6] = j
    out[6:9, 6:9] = j
    out[3:6, :3] = _Q_coupling(phi, nu)
    out[6:9, :3] = _Q_coupling(phi, rho)
    return out


def se23_left_jacobian_inv(xi) -> np.ndarray:
    """Inverse of the 9x9 left Jacobian. Raises AngleNearPi past the cut locus."""
    xi = np.asarray(xi, dtype=float).reshape(9)
    phi, nu, rho = xi[:3], xi[3:6], xi[6:9]
    jinv = so3_left_jacobian_inv(phi)
    out = np.zeros((9, 9))
    out[:3, :3] = jinv
    out[3:6, 3:6] = jinv
    out[6:9, 6:9] = jinv
    out[3:6, :3] = -jinv @ _Q_coupling(phi, nu) @ jinv
    out[6:9, :3] = -jinv @ _Q_coupling(phi, rho) @ jinv
    return out


# ---------------------------------------------------------------------------
# generic matrix Jacobian

def matrix_J(a: np.ndarray) -> np.ndarray:
    """J(A) = integral of exp(s A) for s in [0, 1], so exp(A) = I + A @ J(A).

    Series with argument halving: J(2B) = J(B) @ (I + exp(B)) / 2 keeps the
    power series in its fast-converging regime for any input norm.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    norm = np.linalg.norm(a, 1)
    halvings = 0
    while norm > 0.5:
        norm /= 2.0
        halvings += 1
    b = a / (2.0 ** halvings)

    # power series of J(B); terms drop below machine epsilon within ~20 terms
    term = np.eye(n)
    j = np.eye(n)
    for k in range(2, 60):
        term = term @ b / k
        j = j + term
        if np.abs(term).max() < 1e-18 * max(1.0, np.abs(j).max()):
            break

    e = np.eye(n) + b @ j
    for _ in range(halvings):
        j = j @ (np.eye(n) + e) / 2.0
        e = e @ e
    return j


def homogeneous_exp_jacobian(xi) -> np.ndarray:
    """5x5 closed form of matrix_J evaluated at the algebra matrix of xi."""
    xi = np.asarray(xi, dtype=float).reshape(9)
    phi = xi[:3]
    q = so3_Q(phi)
    m = np.eye(5)
    m[:3, :3] = so3_left_jacobian(phi)
    m[:3, 3] = q @ xi[3:6]
    m[:3, 4] = q @ xi[6:9]
    return m


def rotation_project(m: np.ndarray) -> np.ndarray:
    """Nearest rotation in the Frobenius sense, via SVD with sign correction."""
    m = np.asarray(m, dtype=float)
    u, s, vt = np.linalg.svd(m)
    if s[-1] < 1e-12:
        raise SingularInput("smallest singular value below 1e-12")
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt
