"""Fixed-step Euler/RK4 and adaptive Dormand-Prince integration of ``dx/dt = v(x, t)`` on [0, 1]."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class IntegrationError(RuntimeError):
    def __init__(self, msg: str, step: int | None = None):
        super().__init__(msg if step is None else f"{msg} (step {step})")
        self.step = step


@dataclass(frozen=True)
class Trajectory:
    """States (and optionally field velocities) of a batch on a time grid.

    ``states`` and ``velocities`` have shape ``(len(times), B, d)``.
    """

    times: np.ndarray
    states: np.ndarray
    velocities: np.ndarray | None = None
    nfe: int = 0

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def _eval(field, x, t, counter):
    counter[0] += 1
    return np.asarray(field(x, t), dtype=np.float64).reshape(x.shape)


def _check_state(x, step):
    if not np.all(np.isfinite(x)):
        raise IntegrationError("non-finite state", step)


def integrate_euler(field, X0, n_steps: int, record_velocities: bool = True) -> Trajectory:
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    x = np.array(X0, dtype=np.float64, ndmin=2)
    times = np.linspace(0.0, 1.0, n_steps + 1)
    dt = 1.0 / n_steps
    nfe = [0]
    states = [x]
    vels = []
    for k in range(n_steps):
        v = _eval(field, x, times[k], nfe)
        vels.append(v)
        x = x + dt * v
        _check_state(x, k + 1)
        states.append(x)
    if record_velocities:
        vels.append(_eval(field, x, 1.0, nfe))
    return Trajectory(times, np.stack(states), np.stack(vels) if record_velocities else None, nfe[0])


def integrate_rk4(field, X0, n_steps: int, record_velocities: bool = True) -> Trajectory:
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    x = np.array(X0, dtype=np.float64, ndmin=2)
    times = np.linspace(0.0, 1.0, n_steps + 1)
    h = 1.0 / n_steps
    nfe = [0]
    states = [x]
    vels = []
    for k in range(n_steps):
        t = times[k]
        k1 = _eval(field, x, t, nfe)
        k2 = _eval(field, x + 0.5 * h * k1, t + 0.5 * h, nfe)
        k3 = _eval(field, x + 0.5 * h * k2, t + 0.5 * h, nfe)
        k4 = _eval(field, x + h * k3, times[k + 1], nfe)
        vels.append(k1)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check_state(x, k + 1)
        states.append(x)
    if record_velocities:
        vels.append(_eval(field, x, 1.0, nfe))
    return Trajectory(times, np.stack(states), np.stack(vels) if record_velocities else None, nfe[0])


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4
# continuous extension (Shampine): y(t0 + s h) = y0 + h * K^T (P @ [s, s^2, s^3, s^4])
_P = np.array(
    [
        [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0, 0, 0, 0],
        [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_PI_ALPHA = 0.7 / 5.0
_PI_BETA = 0.4 / 5.0


def _error_norm(err, y, y_new, atol, rtol):
    scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def integrate_dopri5(
    field,
    X0,
    atol: float = 1e-6,
    rtol: float = 1e-6,
    t_eval=None,
    h0: float | None = None,
    max_steps: int = 100_000,
    record_velocities: bool = True,
) -> Trajectory:
    """Adaptive Dormand-Prince 5(4) with a PI step-size controller and dense output.

    States are reported on ``t_eval`` (default: 101 uniform points on [0, 1]).
    ``nfe`` counts field evaluations used for stepping only.
    """
    if atol <= 0 or rtol <= 0:
        raise ValueError("atol and rtol must be positive")
    t_eval = np.linspace(0.0, 1.0, 101) if t_eval is None else np.asarray(t_eval, dtype=np.float64)
    if t_eval[0] != 0.0 or t_eval[-1] != 1.0 or np.any(np.diff(t_eval) <= 0):
        raise ValueError("t_eval must increase strictly from 0 to 1")
    y = np.array(X0, dtype=np.float64, ndmin=2)
    nfe = [0]
    f = _eval(field, y, 0.0, nfe)
    if h0 is None:
        scale = atol + rtol * np.abs(y)
        d0 = np.sqrt(np.mean((y / scale) ** 2))
        d1 = np.sqrt(np.mean((f / scale) ** 2))
        h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
        h0 = min(h0, 1.0)
    h = h0
    t = 0.0
    out = [y]
    next_idx = 1
    err_prev = 1e-4
    n_steps = 0
    K = np.empty((7, *y.shape))
    while t < 1.0:
        if n_steps >= max_steps:
            raise IntegrationError("maximum number of steps exceeded", n_steps)
        h = min(h, 1.0 - t)
        if h < 1e-12:
            raise IntegrationError(f"step size underflow at t={t:.6g}", n_steps)
        K[0] = f
        for s in range(1, 7):
            dy = sum(a * K[j] for j, a in enumerate(_A[s]) if a != 0.0)
            K[s] = _eval(field, y + h * dy, t + _C[s] * h, nfe)
        y_new = y + h * np.tensordot(_B5, K, axes=1)
        err = _error_norm(h * np.tensordot(_E, K, axes=1), y, y_new, atol, rtol)
        if err <= 1.0:
            t_new = 1.0 if t + h >= 1.0 - 1e-15 else t + h
            if not np.all(np.isfinite(y_new)):
                raise IntegrationError("non-finite state", n_steps)
            Q = np.tensordot(_P.T, K, axes=1)  # (4, B, d)
            while next_idx < t_eval.size and t_eval[next_idx] <= t_new:
                s = (t_eval[next_idx] - t) / h
                if t_eval[next_idx] == t_new:
                    out.append(y_new)
                else:
                    powers = np.array([s, s**2, s**3, s**4])
                    out.append(y + h * np.tensordot(powers, Q, axes=1))
                next_idx += 1
            if err == 0.0:
                factor = _MAX_FACTOR
            else:
                factor = _SAFETY * err**-_PI_ALPHA * err_prev**_PI_BETA
                factor = min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
            err_prev = max(err, 1e-4)
            t, y, f = t_new, y_new, K[6].copy()
            h *= factor
        else:
            h *= max(_MIN_FACTOR, _SAFETY * err**-0.2)
        n_steps += 1
    states = np.stack(out)
    vels = None
    if record_velocities:
        vels = np.stack([np.asarray(field(s, tk), dtype=np.float64).reshape(s.shape) for s, tk in zip(states, t_eval)])
    return Trajectory(t_eval, states, vels, nfe[0])


def path_energy(traj: Trajectory) -> float:
    """Trapezoidal time integral of the batch-mean squared speed."""
    if traj.velocities is None:
        raise ValueError("trajectory carries no velocities")
    speed2 = np.mean(np.sum(traj.velocities**2, axis=-1), axis=-1)
    return float(np.trapezoid(speed2, traj.times))


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """One row per (sample, time): ``sample_id, t, x_1, ..., x_d``."""
    n_t, B, d = traj.states.shape
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "t", *[f"x_{k + 1}" for k in range(d)]])
        for b in range(B):
            for k in range(n_t):
                w.writerow([b, repr(float(traj.times[k])), *[repr(float(c)) for c in traj.states[k, b]]])


def read_trajectory_csv(path) -> Trajectory:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    body = np.array([[float(c) for c in r] for r in rows[1:]])
    ids = body[:, 0].astype(int)
    B = ids.max() + 1
    n_t = body.shape[0] // B
    times = body[:n_t, 1]
    states = body[:, 2:].reshape(B, n_t, -1).transpose(1, 0, 2)
    return Trajectory(times, states)
