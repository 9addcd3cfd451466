"""Linearized observability analysis for the aided navigation error state.

The error state is only corrected along directions the aiding rows can see
through the autonomous error transition. Stacking the rows against powers of
the transition and extracting the numerical null space exposes which
attitude/velocity/position perturbations a sensor configuration leaves
uncorrected. Canned reports cover the landmark, position-fix, compass, and
body-velocity configurations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .liegroups import GRAVITY, so3_hat
from .strapdown import error_transition

DEFAULT_HORIZON = 6
DEFAULT_TOL = 1e-8

_Z3 = np.zeros((3, 3))
_I3 = np.eye(3)


@dataclass(frozen=True)
class ObservabilityReport:
    """Numerical rank/null-space summary of a stacked observability matrix.

    ``null_basis`` rows are orthonormal vectors spanning the unobservable
    subspace; ``rank + null_basis.shape[0]`` equals the state dimension.
    """

    rank: int
    null_basis: np.ndarray
    singular_values: np.ndarray
    horizon: int
    name: str = ""

    def __post_init__(self):
        basis = np.asarray(self.null_basis, dtype=float)
        if basis.size == 0:
            basis = basis.reshape(0, basis.shape[-1] if basis.ndim == 2 else 0)
        basis = np.atleast_2d(basis)
        sv = np.asarray(self.singular_values, dtype=float)
        object.__setattr__(self, "null_basis", basis)
        object.__setattr__(self, "singular_values", sv)
        if basis.shape[0]:
            gram = basis @ basis.T
            if not np.allclose(gram, np.eye(basis.shape[0]), atol=1e-10):
                raise ValueError("null_basis rows must be orthonormal")
        if self.rank < 0 or self.horizon < 0:
            raise ValueError("rank and horizon must be non-negative")


def observability_matrix(h_seq, a: np.ndarray, horizon: int) -> np.ndarray:
    """Stack the rows ``H_k @ A^k`` for ``k = 0 .. horizon - 1``.

    ``h_seq`` is either a single measurement Jacobian reused at every step or
    a sequence of per-step Jacobians of length ``horizon`` (rows per step may
    differ when sensors are stacked).
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("a must be a square matrix")
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    seq = [np.asarray(h, dtype=float) for h in h_seq]
    if len(seq) == 1:
        seq = seq * horizon
    if len(seq) != horizon:
        raise ValueError("h_seq must contain one Jacobian or one per step")
    blocks = []
    a_pow = np.eye(a.shape[0])
    for h in seq:
        if h.ndim != 2 or h.shape[1] != a.shape[0]:
            raise ValueError("each Jacobian must have as many columns as a")
        blocks.append(h @ a_pow)
        a_pow = a_pow @ a
    return np.vstack(blocks)


def null_space(matrix: np.ndarray, tol: float = DEFAULT_TOL, horizon: int = 1,
               name: str = "") -> ObservabilityReport:
    """Rank and orthonormal null-space basis of ``matrix`` by SVD.

    ``tol`` is relative to the largest singular value; directions whose
    singular value falls below ``tol * s_max`` count as unobservable.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    _, s, vt = np.linalg.svd(m)
    cutoff = tol * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > cutoff))
    return ObservabilityReport(
        rank=rank,
        null_basis=vt[rank:],
        singular_values=s,
        horizon=horizon,
        name=name,
    )


def landmark_row(position) -> np.ndarray:
    """Aiding row for a body-frame sighting of a known fixed point.

    The same row shape serves position fixes, where ``position`` is the
    measured fix instead of a constant (making the row time-varying).
    """
    p = np.asarray(position, dtype=float).reshape(3)
    return np.hstack([-so3_hat(p), _Z3, _I3])


def compass_row(field_dir) -> np.ndarray:
    """Aiding row for a body-frame sighting of a known fixed direction."""
    r = np.asarray(field_dir, dtype=float).reshape(3)
    return np.hstack([-so3_hat(r), _Z3, _Z3])


def body_velocity_row() -> np.ndarray:
    """Aiding row for a body-frame velocity sensor."""
    return np.hstack([_Z3, -_I3, _Z3])


def _report(name: str, h_seq, horizon: int = DEFAULT_HORIZON,
            dt: float = 1.0) -> ObservabilityReport:
    m = observability_matrix(h_seq, error_transition(dt), horizon)
    return null_space(m, horizon=horizon, name=name)


def scenario_reports() -> list[ObservabilityReport]:
    """Canned rank/null-space reports for the standard aiding configurations.

    Covers: a single landmark (one yaw-coupled null direction), a vertically
    aligned landmark pair (still degenerate), three non-collinear landmarks
    (fully observable), a body-velocity sensor (odometric, global position
    and yaw unseen), a static position fix (yaw about gravity unseen), a fix
    sequence that dwells then shifts laterally (fully observable), a fix
    sequence climbing a vertical line (yaw still unseen), and a static fix
    plus compass (instantaneously fully observable).
    """
    p_single = np.array([2.0, -1.0, 3.0])
    p_low = np.array([1.0, 2.0, 0.5])
    p_high = p_low + np.array([0.0, 0.0, 2.0])
    triangle = [np.array([2.0, 0.0, 0.0]),
                np.array([0.0, 3.0, 0.0]),
                np.array([0.0, 0.0, 1.5])]
    fix = np.array([5.0, 2.0, 0.0])
    fix_shifted = fix + np.array([4.0, 1.0, 0.0])
    field = np.array([1.0, 0.0, 0.0])

    dwell_shift = [landmark_row(fix)] * 3 + [landmark_row(fix_shifted)] * 3
    climb = [landmark_row(fix + k * np.array([0.0, 0.0, 1.5]))
             for k in range(DEFAULT_HORIZON)]
    fix_with_compass = np.vstack([landmark_row(fix), compass_row(field)])

    return [
        _report("single-landmark", [landmark_row(p_single)]),
        _report("vertical-landmark-pair",
                [np.vstack([landmark_row(p_low), landmark_row(p_high)])]),
        _report("landmark-triangle",
                [np.vstack([landmark_row(p) for p in triangle])]),
        _report("body-velocity", [body_velocity_row()]),
        _report("position-fix-static", [landmark_row(fix)]),
        _report("position-fix-lateral", dwell_shift),
        _report("position-fix-vertical", climb),
        _report("position-fix-compass", [fix_with_compass]),
    ]


def yaw_null_direction(position) -> np.ndarray:
    """Unit vector spanning the null space left by a single fixed point.

    A rotation about gravity with the matching position shift: the sensor
    cannot distinguish the true state from one yawed about the vertical
    through the reference point.
    """
    p = np.asarray(position, dtype=float).reshape(3)
    v = np.concatenate([GRAVITY, np.zeros(3), np.cross(p, GRAVITY)])
    return v / np.linalg.norm(v)
