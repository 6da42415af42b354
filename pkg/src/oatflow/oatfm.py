"""Phase-2 refinement by optimal acceleration transport flow matching.

Each step pairs a source batch with a target batch using the velocity-aware
cost built from the target network's boundary velocities, then regresses the
online field at chord points towards the acceleration-transport loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .flows import Sampler
from .geometry import pair_loss_arrays
from .model import TargetField, VelocityField, forward_traced, update_target
from .otcore import cost_matrix, sample_pairs, solve_exact, solve_sinkhorn


@dataclass(frozen=True)
class RefineConfig:
    alpha: float = 2.0 / 3.0
    batch_size: int = 256
    n_batches: int = 20_000
    lr: float = 1e-3
    grad_clip_norm: float | None = 1.0
    target_policy: str = "hard_copy"
    target_period: int = 500
    ema_decay: float = 0.999
    coupling: str = "exact"
    sinkhorn_epsilon: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.n_batches < 0:
            raise ValueError("n_batches must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.coupling not in ("exact", "sinkhorn"):
            raise ValueError(f"unknown coupling solver {self.coupling!r}")
        if self.target_policy not in ("ema", "hard_copy"):
            raise ValueError(f"unknown target policy {self.target_policy!r}")

    def make_target(self, online: VelocityField) -> TargetField:
        return TargetField.from_online(
            online, policy=self.target_policy, decay=self.ema_decay, period=self.target_period
        )


@dataclass(frozen=True)
class RefineState:
    online: VelocityField
    target: TargetField
    adam: dc.AdamState
    step: int = 0


def boundary_velocities(target: TargetField, X0, X1) -> tuple[np.ndarray, np.ndarray]:
    """Target-network velocities ``v(X0, 0)`` and ``v(X1, 1)`` as plain (detached) arrays."""
    return target(X0, 0.0), target(X1, 1.0)


def oat_loss_traced(flat: dc.Tensor, layout, d: int, x0, x1, v0, v1, t, alpha: float) -> dc.Tensor:
    """Mean pair loss on chord points, recorded on the tape (only the online field is traced)."""
    tc = t[:, None]
    x_t = (1.0 - tc) * x0 + tc * x1
    v_t = forward_traced(flat, layout, d, x_t, t)
    u = x1 - x0
    half = v_t * -0.5
    terms = [
        (alpha, dc.square(half + (u - 0.5 * v0))),
        (1.0 - alpha, dc.square(v_t - v0)),
        (alpha, dc.square(half + (u - 0.5 * v1))),
        (1.0 - alpha, dc.square(v_t - v1)),
    ]
    total = None
    for w, sq in terms:
        if w == 0.0:
            continue
        s = dc.sum(sq, axis=1) * w
        total = s if total is None else total + s
    return dc.mean(total)


def oat_loss(field: VelocityField, x0, x1, v0, v1, t, alpha: float) -> float:
    """Untraced value of :func:`oat_loss_traced`, evaluated through the geometry pair loss."""
    tc = np.asarray(t)[:, None]
    x_t = (1.0 - tc) * x0 + tc * x1
    return float(np.mean(pair_loss_arrays(x0, x1, v0, v1, field(x_t, t), alpha)))


def couple(X0, X1, V0, V1, config: RefineConfig, rng: np.random.Generator):
    """Pair indices ``(i1, i0)`` and the coupling cost for one batch."""
    C = cost_matrix(X0, X1, V0, V1, mode="oat_reduced")
    B = X0.shape[0]
    if config.coupling == "exact":
        plan = solve_exact(C, tie_break=False)
        cost = plan.cost(C) / B
    else:
        plan = solve_sinkhorn(C, config.sinkhorn_epsilon, max_iters=2000, tol=1e-6)
        cost = plan.cost(C)
    pairs = np.asarray(sample_pairs(plan, B, rng), dtype=np.int64)
    return pairs[:, 0], pairs[:, 1], cost


def refine_step(state: RefineState, X0, X1, config: RefineConfig, rng: np.random.Generator):
    """One refinement update. Returns ``(new_state, record)``; ``record`` holds step, loss, coupling cost, grad norm."""
    online, target = state.online, state.target
    V0, V1 = boundary_velocities(target, X0, X1)
    i1, i0, coupling_cost = couple(X0, X1, V0, V1, config, rng)
    x0, x1, v0, v1 = X0[i0], X1[i1], V0[i0], V1[i1]
    t = rng.uniform(0.0, 1.0, size=x0.shape[0])
    layout, d = online.params.layout, online.d
    try:
        loss, g = dc.value_and_grad(
            lambda flat: oat_loss_traced(flat, layout, d, x0, x1, v0, v1, t, config.alpha),
            online.params.data,
        )
    except dc.NonFiniteError as e:
        raise dc.NonFiniteError(f"refine step {state.step + 1}: {e.op}") from e
    gnorm = float(np.linalg.norm(g))
    if config.grad_clip_norm is not None:
        g = dc.clip_grad_norm(g, config.grad_clip_norm)
    new_params, adam = dc.adam_step(online.params.data, g, state.adam, config.lr)
    step = state.step + 1
    new_online = online.with_params(new_params)
    new_target = update_target(target, new_online, step)
    record = {"step": step, "loss": loss, "coupling_cost": coupling_cost, "grad_norm": gnorm}
    return RefineState(new_online, new_target, adam, step), record


def init_state(field: VelocityField, config: RefineConfig) -> RefineState:
    return RefineState(field, config.make_target(field), dc.AdamState.zeros(len(field.params)))


def refine(
    phase1_field: VelocityField,
    config: RefineConfig,
    source_sampler: Sampler,
    target_sampler: Sampler,
    callback=None,
) -> VelocityField:
    """Run ``config.n_batches`` refinement steps starting from a phase-1 field.

    The online field starts from ``phase1_field`` and the target network from a
    copy of it. ``callback(record)`` receives one dict per step.
    """
    if config.n_batches == 0:
        return phase1_field
    rng = np.random.default_rng(config.seed)
    state = init_state(phase1_field, config)
    B = config.batch_size
    for _ in range(config.n_batches):
        X0 = source_sampler(B, rng)
        X1 = target_sampler(B, rng)
        state, record = refine_step(state, X0, X1, config, rng)
        if callback is not None:
            callback(record)
    return state.online
