"""Second-order transport on single endpoint pairs.

A phase point is a position together with a velocity. The functions here
work on plain arrays: a trailing axis of size ``d`` holds the vector, and
any leading axes are treated as a batch of independent pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=np.float64))
        v = np.atleast_1d(np.asarray(self.v, dtype=np.float64))
        if x.shape != v.shape:
            raise ValueError(f"position {x.shape} and velocity {v.shape} dimensions differ")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise ValueError("phase point entries must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)


@dataclass(frozen=True)
class CubicPath:
    """Coordinate-wise cubic ``x(t) = x0 + v0 t + b t^2 + c t^3``."""

    x0: np.ndarray
    v0: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def position(self, t):
        t = np.asarray(t, dtype=np.float64)[..., None]
        return self.x0 + self.v0 * t + self.b * t**2 + self.c * t**3

    def velocity(self, t):
        t = np.asarray(t, dtype=np.float64)[..., None]
        return self.v0 + 2.0 * self.b * t + 3.0 * self.c * t**2

    def acceleration(self, t):
        t = np.asarray(t, dtype=np.float64)[..., None]
        return 2.0 * self.b + 6.0 * self.c * t


@dataclass(frozen=True)
class AccelSplit:
    a_par: np.ndarray
    a_perp: np.ndarray


def _sqnorm(a):
    return np.sum(a * a, axis=-1)


def oat_cost(z0: PhasePoint, z1: PhasePoint, T: float = 1.0):
    """Squared acceleration cost ``12|dx/T - (v0+v1)/2|^2 + |v1-v0|^2``."""
    if T <= 0:
        raise ValueError("time horizon T must be positive")
    if z0.x.shape[-1] != z1.x.shape[-1]:
        raise ValueError("endpoint dimensions differ")
    return oat_cost_arrays(z0.x, z0.v, z1.x, z1.v, T)


def oat_cost_arrays(x0, v0, x1, v1, T: float = 1.0):
    if T <= 0:
        raise ValueError("time horizon T must be positive")
    align = (np.asarray(x1) - x0) / T - 0.5 * (np.asarray(v0) + v1)
    return 12.0 * _sqnorm(align) + _sqnorm(np.asarray(v1) - v0)


def cubic_minimizer(z0: PhasePoint, z1: PhasePoint) -> CubicPath:
    if z0.x.shape != z1.x.shape:
        raise ValueError("endpoint dimensions differ")
    u = z1.x - z0.x
    b = 3.0 * u - 2.0 * z0.v - z1.v
    c = z0.v + z1.v - 2.0 * u
    return CubicPath(z0.x, z0.v, b, c)


def accel_energy(path: CubicPath):
    """Closed form of the integral of |x''(t)|^2 over [0, 1]."""
    b, c = path.b, path.c
    return 4.0 * _sqnorm(b) + 12.0 * np.sum(b * c, axis=-1) + 12.0 * _sqnorm(c)


def split_acceleration(v, a) -> AccelSplit:
    v = np.asarray(v, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    vv = _sqnorm(v)
    if np.any(vv == 0.0):
        raise ValueError("velocity is zero; tangential direction undefined")
    a_par = (np.sum(v * a, axis=-1) / vv)[..., None] * v
    return AccelSplit(a_par, a - a_par)


def _perp_norm(w, e):
    # e is a unit vector
    return np.linalg.norm(w - np.dot(w, e) * e)


def is_straight_pair(z0: PhasePoint, z1: PhasePoint, tol: float = 1e-9) -> bool:
    """True when both endpoint velocities are collinear with the displacement."""
    if tol < 0:
        raise ValueError("tol must be non-negative")
    u = z1.x - z0.x
    un = float(np.linalg.norm(u))
    if un > 0:
        e = u / un
        bound = tol * (1.0 + un)
        return bool(_perp_norm(z0.v, e) <= bound and _perp_norm(z1.v, e) <= bound)
    # no displacement: the path stays on the line spanned by the velocities
    n0, n1 = np.linalg.norm(z0.v), np.linalg.norm(z1.v)
    if n0 == 0 or n1 == 0:
        return True
    e = z0.v / n0
    return bool(_perp_norm(z1.v, e) <= tol * (1.0 + n1))


def pair_loss(z0: PhasePoint, z1: PhasePoint, v_t, alpha: float):
    """Per-pair refinement loss with both difference quotients replaced by ``x1 - x0``."""
    return pair_loss_arrays(z0.x, z1.x, z0.v, z1.v, np.asarray(v_t, dtype=np.float64), alpha)


def pair_loss_arrays(x0, x1, v0, v1, v_t, alpha: float):
    """Batched :func:`pair_loss`; leading axes index independent pairs."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    u = np.asarray(x1, dtype=np.float64) - x0
    return (
        alpha * _sqnorm(u - 0.5 * (v0 + v_t))
        + (1.0 - alpha) * _sqnorm(v_t - v0)
        + alpha * _sqnorm(u - 0.5 * (v_t + v1))
        + (1.0 - alpha) * _sqnorm(v1 - v_t)
    )


def optimal_vt(u, v_bar, alpha: float):
    """Minimiser of :func:`pair_loss` over the midpoint velocity, given ``u = x1-x0`` and ``v_bar = (v0+v1)/2``."""
    if not 0.0 <= alpha < 4.0 / 3.0:
        raise ValueError("alpha must lie in [0, 4/3)")
    denom = 4.0 - 3.0 * alpha
    return (2.0 * alpha / denom) * np.asarray(u, dtype=np.float64) + ((4.0 - 5.0 * alpha) / denom) * np.asarray(v_bar)


def bound_constant(alpha):
    """Largest c with ``min_vt pair_loss >= c * oat_cost`` for the given alpha."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < 0) or np.any(alpha > 1):
        raise ValueError("alpha must lie in [0, 1]")
    out = np.minimum(alpha * (1.0 - alpha) / (6.0 - 4.5 * alpha), 0.5 - 0.375 * alpha)
    return float(out) if out.ndim == 0 else out
