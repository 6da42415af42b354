"""Phase-1 conditional flow matching: FM, I-CFM, VP-CFM and OT-CFM."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .model import VelocityField, forward, forward_traced, init
from .otcore import cost_matrix, solve_exact

METHODS = ("fm", "icfm", "vpcfm", "otcfm")
FM_T_MAX = 1.0 - 1e-5

Sampler = Callable[[int, np.random.Generator], np.ndarray]


@dataclass(frozen=True)
class PathSample:
    """A batch of points on conditional paths and their target velocities."""

    x_t: np.ndarray
    u_t: np.ndarray
    t: np.ndarray
    x0: np.ndarray
    x1: np.ndarray


@dataclass(frozen=True)
class Phase1Config:
    method: str = "icfm"
    sigma: float = 0.0
    batch_size: int = 256
    n_batches: int = 20_000
    lr: float = 1e-3
    seed: int = 0
    d: int = 2
    grad_clip_norm: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown phase-1 method {self.method!r}; expected one of {METHODS}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.batch_size < 1 or (self.method == "otcfm" and self.batch_size < 2):
            raise ValueError("batch_size must be >= 1 (>= 2 for otcfm)")
        if self.n_batches < 0:
            raise ValueError("n_batches must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def draw_path_sample(method: str, x0, x1, t, sigma: float, rng: np.random.Generator) -> PathSample:
    """Sample ``x_t`` on the method's conditional path and its target velocity ``u_t``.

    ``x0``, ``x1`` are (B, d) or (d,) arrays; ``t`` is a scalar or a length-B vector.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    single = x0.ndim == 1
    x0, x1 = np.atleast_2d(x0), np.atleast_2d(x1)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x0.shape[0],)).copy()
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    tc = t[:, None]
    if method == "fm":
        denom = 1.0 - (1.0 - sigma) * tc
        if np.any(denom == 0):
            raise ValueError("FM target velocity is singular at t=1 with sigma=0")
        # Gaussian path N(t x1, (1 - (1 - sigma) t)^2 I); the source batch is not used
        eps = rng.standard_normal(x1.shape)
        x_t = tc * x1 + denom * eps
        u_t = (x1 - (1.0 - sigma) * x_t) / denom
    elif method in ("icfm", "otcfm"):
        x_t = (1.0 - tc) * x0 + tc * x1
        if sigma > 0:
            x_t = x_t + sigma * rng.standard_normal(x_t.shape)
        u_t = x1 - x0
    elif method == "vpcfm":
        c, s = np.cos(0.5 * np.pi * tc), np.sin(0.5 * np.pi * tc)
        x_t = c * x0 + s * x1
        u_t = 0.5 * np.pi * (c * x1 - s * x0)
    else:
        raise ValueError(f"unknown method {method!r}")
    if single:
        return PathSample(x_t[0], u_t[0], t[0], x0[0], x1[0])
    return PathSample(x_t, u_t, t, x0, x1)


def cfm_loss(field: VelocityField, samples: PathSample) -> float:
    """Mean over the batch of the squared error between the field and the target velocities."""
    v = np.atleast_2d(forward(field, samples.x_t, samples.t))
    return float(np.mean(np.sum((v - np.atleast_2d(samples.u_t)) ** 2, axis=1)))


def cfm_loss_traced(flat: dc.Tensor, layout, d: int, samples: PathSample) -> dc.Tensor:
    v = forward_traced(flat, layout, d, samples.x_t, samples.t)
    return dc.mean(dc.sum(dc.square(v - np.atleast_2d(samples.u_t)), axis=1))


def ot_pair_batch(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    """Reorder ``x0`` so that ``(x0[i], x1[i])`` follows the exact squared-distance assignment."""
    perm = solve_exact(cost_matrix(x0, x1), tie_break=False).perm
    return x0[perm]


def sample_times(method: str, n: int, rng: np.random.Generator) -> np.ndarray:
    hi = FM_T_MAX if method == "fm" else 1.0
    return rng.uniform(0.0, hi, size=n)


def train_phase1(
    config: Phase1Config,
    source_sampler: Sampler,
    target_sampler: Sampler,
    field: VelocityField | None = None,
    snapshots=(),
    callback=None,
):
    """Train a velocity field by conditional flow matching.

    ``field`` defaults to ``init(config.d, config.seed)``. ``snapshots`` lists step
    counts at which to keep a copy of the field; when given, the return value is
    ``(field, {step: field})``. ``callback(record)`` receives one dict per step.
    """
    if field is None:
        field = init(config.d, config.seed)
    rng = np.random.default_rng(config.seed)
    params = field.params.data.copy()
    layout = field.params.layout
    state = dc.AdamState.zeros(params.size)
    wanted = set(int(s) for s in snapshots)
    kept = {}
    if 0 in wanted:
        kept[0] = field
    B = config.batch_size
    for step in range(1, config.n_batches + 1):
        x0 = source_sampler(B, rng)
        x1 = target_sampler(B, rng)
        if config.method == "otcfm":
            x0 = ot_pair_batch(x0, x1)
        t = sample_times(config.method, B, rng)
        batch = draw_path_sample(config.method, x0, x1, t, config.sigma, rng)
        loss, g = dc.value_and_grad(lambda flat: cfm_loss_traced(flat, layout, config.d, batch), params)
        gnorm = float(np.linalg.norm(g))
        if config.grad_clip_norm is not None:
            g = dc.clip_grad_norm(g, config.grad_clip_norm)
        params, state = dc.adam_step(params, g, state, config.lr)
        if callback is not None:
            callback({"step": step, "loss": loss, "grad_norm": gnorm})
        if step in wanted:
            kept[step] = field.with_params(params)
    out = field.with_params(params) if config.n_batches > 0 else field
    if snapshots:
        return out, kept
    return out
