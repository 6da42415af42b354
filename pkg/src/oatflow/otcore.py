"""Mini-batch couplings: cost matrices, exact and entropic solvers, pair sampling, empirical W2."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import oat_cost_arrays

COST_MODES = ("squared_euclidean", "oat_reduced", "oat_full")


@dataclass(frozen=True)
class CostMatrix:
    values: np.ndarray
    mode: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"cost matrix must be square, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("cost matrix has non-finite entries")
        if self.mode not in COST_MODES:
            raise ValueError(f"unknown cost mode {self.mode!r}")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class Assignment:
    """Row ``i`` is matched to column ``perm[i]``."""

    perm: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.perm, dtype=np.int64)
        if sorted(p.tolist()) != list(range(p.size)):
            raise ValueError("assignment is not a permutation")
        object.__setattr__(self, "perm", p)

    def cost(self, C) -> float:
        C = _values(C)
        return float(C[np.arange(self.perm.size), self.perm].sum())


@dataclass(frozen=True)
class SoftPlan:
    plan: np.ndarray
    converged: bool
    n_iters: int
    marginal_error: float

    def cost(self, C) -> float:
        return float(np.sum(_values(C) * self.plan))


def _values(C) -> np.ndarray:
    return C.values if isinstance(C, CostMatrix) else np.asarray(C, dtype=np.float64)


def cost_matrix(X0, X1, V0=None, V1=None, mode: str = "squared_euclidean") -> CostMatrix:
    """Pairwise cost with rows indexing ``X1`` and columns indexing ``X0``."""
    X0 = np.asarray(X0, dtype=np.float64)
    X1 = np.asarray(X1, dtype=np.float64)
    if X0.ndim != 2 or X0.shape != X1.shape:
        raise ValueError(f"X0 {X0.shape} and X1 {X1.shape} must be matching B x d arrays")
    if mode not in COST_MODES:
        raise ValueError(f"unknown cost mode {mode!r}")
    diff = X1[:, None, :] - X0[None, :, :]
    if mode == "squared_euclidean":
        return CostMatrix(np.sum(diff * diff, axis=-1), mode)
    if V0 is None or V1 is None:
        raise ValueError(f"mode {mode!r} requires both V0 and V1")
    V0 = np.asarray(V0, dtype=np.float64)
    V1 = np.asarray(V1, dtype=np.float64)
    if V0.shape != X0.shape or V1.shape != X1.shape:
        raise ValueError("velocity arrays must match position arrays")
    if mode == "oat_reduced":
        vbar = V1[:, None, :] + V0[None, :, :]
        return CostMatrix(np.sum(diff * diff, axis=-1) - np.sum(diff * vbar, axis=-1), mode)
    return CostMatrix(oat_cost_arrays(X0[None, :, :], V0[None, :, :], X1[:, None, :], V1[:, None, :]), mode)


def _dual_potentials(C: np.ndarray, perm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Recover optimal duals ``u, v`` (``C - u - v >= 0``, tight on ``perm``) by Bellman-Ford.

    Column distances use the residual edges "row i leaves column perm[i] for column j",
    of weight ``C[i, j] - C[i, perm[i]]``; optimality of ``perm`` rules out negative cycles.
    """
    n = C.shape[0]
    rows = np.arange(n)
    W = C - C[rows, perm][:, None]
    d = np.zeros(n)
    for _ in range(n + 1):
        cand = (d[perm][:, None] + W).min(axis=0)
        new = np.minimum(d, cand)
        if np.array_equal(new, d):
            break
        d = new
    v = d
    u = C[rows, perm] - v[perm]
    return u, v


def _lexicographic_refine(tight: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching inside the tight-edge graph."""
    n = perm.size
    perm = perm.copy()
    owner = np.empty(n, dtype=np.int64)
    owner[perm] = np.arange(n)
    adj = [np.flatnonzero(tight[i]) for i in range(n)]
    for i in range(n):
        for j in adj[i]:
            if j >= perm[i]:
                break
            r = owner[j]
            if r < i:
                continue
            # alternating path among free rows (> i) from row r back to column perm[i]
            target = perm[i]
            parent = {r: -1}
            queue = [r]
            found = -1
            while queue and found < 0:
                nxt = []
                for row in queue:
                    for col in adj[row]:
                        if col == perm[row]:
                            continue
                        if col == target:
                            found = row
                            break
                        r2 = owner[col]
                        if r2 > i and r2 not in parent:
                            parent[r2] = row
                            nxt.append(r2)
                    if found >= 0:
                        break
                queue = nxt
            if found < 0:
                continue
            # rotate: found takes target, each row on the path takes its child's old column
            col = target
            row = found
            while row != -1:
                old = perm[row]
                perm[row] = col
                owner[col] = row
                col = old
                row = parent[row]
            perm[i] = j
            owner[j] = i
            break
    return perm


def solve_exact(C, tie_break: bool = True, tie_tol: float = 1e-9) -> Assignment:
    """Exact assignment minimising ``sum_i C[i, perm[i]]``.

    With ``tie_break`` the lexicographically smallest optimal permutation is
    returned; edges with reduced cost below ``tie_tol * max(1, max|C|)`` count
    as tight.
    """
    C = _values(C)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError("cost matrix must be square")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    n = C.shape[0]
    if n == 0:
        return Assignment(np.zeros(0, dtype=np.int64))
    _, perm = linear_sum_assignment(C)
    perm = perm.astype(np.int64)
    if not tie_break or n == 1:
        return Assignment(perm)
    u, v = _dual_potentials(C, perm)
    tol = tie_tol * max(1.0, float(np.abs(C).max()))
    tight = (C - u[:, None] - v[None, :]) <= tol
    if np.count_nonzero(tight) == n:
        return Assignment(perm)
    return Assignment(_lexicographic_refine(tight, perm))


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return np.log(np.exp(a - m).sum(axis=axis)) + np.squeeze(m, axis=axis)


def solve_sinkhorn(
    C,
    epsilon: float,
    max_iters: int = 10_000,
    tol: float = 1e-9,
    history: list | None = None,
    eps_scaling: float | None = None,
) -> SoftPlan:
    """Log-domain Sinkhorn with uniform marginals ``1/B``.

    With ``eps_scaling = s`` in (0, 1) the regularisation starts at the cost
    range and shrinks by ``s`` per iteration down to ``epsilon``, warm-starting
    the potentials; this speeds up small-``epsilon`` solves considerably.
    If ``history`` is a list, the L1 row-marginal violation after each
    iteration is appended (``inf`` while still annealing).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if eps_scaling is not None and not 0.0 < eps_scaling < 1.0:
        raise ValueError("eps_scaling must lie in (0, 1)")
    C = _values(C)
    n = C.shape[0]
    log_a = np.full(n, -np.log(n))
    f = np.zeros(n)
    g = np.zeros(n)
    eps = epsilon
    if eps_scaling is not None:
        eps = max(epsilon, float(C.max() - C.min()))
    err = np.inf
    it = 0
    row_lse = _lse(-C / eps, axis=1)
    for it in range(1, max_iters + 1):
        f = eps * (log_a - row_lse)
        g = eps * (log_a - _lse((f[:, None] - C) / eps, axis=0))
        if eps > epsilon:
            eps = max(epsilon, eps * eps_scaling)
        # columns are exact after the g-update; the row sums double as the next f-update's reduction
        row_lse = _lse((g[None, :] - C) / eps, axis=1)
        err = float(np.abs(np.exp(f / eps + row_lse) - 1.0 / n).sum()) if eps == epsilon else np.inf
        if history is not None:
            history.append(err)
        if err < tol:
            break
    plan = np.exp((f[:, None] + g[None, :] - C) / epsilon)
    return SoftPlan(plan, bool(err < tol), it, err)


def sample_pairs(plan, K: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Index pairs ``(row, col)`` drawn from a coupling.

    An :class:`Assignment` yields every matched pair once and ignores ``K``.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    if isinstance(plan, Assignment):
        return [(i, int(j)) for i, j in enumerate(plan.perm)]
    P = plan.plan if isinstance(plan, SoftPlan) else np.asarray(plan, dtype=np.float64)
    n, m = P.shape
    probs = P.ravel() / P.sum()
    idx = rng.choice(n * m, size=K, p=probs)
    return [(int(k // m), int(k % m)) for k in idx]


def empirical_w2(X, Y) -> float:
    """Squared 2-Wasserstein distance between two equally sized uniform point clouds."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape:
        raise ValueError(f"point clouds must have equal shapes, got {X.shape} and {Y.shape}")
    C = cost_matrix(Y, X).values
    # the optimal cost does not depend on tie-breaking
    return solve_exact(C, tie_break=False).cost(C) / X.shape[0]
