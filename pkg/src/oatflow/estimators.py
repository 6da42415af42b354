"""scikit-learn style wrappers around the two training phases.

Both estimators are fitted on a pair of point clouds: ``X`` drawn from the
source distribution and ``y`` from the target. Minibatches are resampled with
replacement from the given arrays, so the two clouds may differ in size.
``transform`` pushes source points through the learned flow with RK4.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted

from .flows import Phase1Config, train_phase1
from .model import VelocityField
from .oatfm import RefineConfig, refine
from .ode import Trajectory, integrate_rk4, path_energy


def _array_sampler(data: np.ndarray):
    def draw(n, rng):
        return data[rng.integers(0, data.shape[0], size=n)]

    return draw


def _check_pair(X, y):
    X = check_array(X, dtype=np.float64, ensure_min_samples=2)
    if y is None:
        raise ValueError("target samples y are required")
    y = check_array(y, dtype=np.float64, ensure_min_samples=2)
    if X.shape[1] != y.shape[1]:
        raise ValueError(f"source has {X.shape[1]} features but target has {y.shape[1]}")
    return X, y


class _FlowTransformMixin(TransformerMixin):
    def _check_input(self, X):
        check_is_fitted(self, "field_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def transform(self, X):
        """Endpoints at t = 1 of the flow started from ``X``."""
        return self.trajectory(X, record_velocities=False).final

    def trajectory(self, X, record_velocities: bool = True) -> Trajectory:
        X = self._check_input(X)
        return integrate_rk4(self.field_, X, self.n_steps, record_velocities=record_velocities)

    def path_energy(self, X) -> float:
        return path_energy(self.trajectory(X))

    def fit_transform(self, X, y=None, **fit_params):
        # a flow is fitted on (source, target) but transforms the source only
        return self.fit(X, y, **fit_params).transform(X)


class FlowMatching(_FlowTransformMixin, BaseEstimator):
    """Phase-1 conditional flow matching.

    Parameters
    ----------
    method : {"fm", "icfm", "vpcfm", "otcfm"}
    n_batches, batch_size, lr, sigma : training settings
    n_steps : RK4 steps used by ``transform``
    random_state : int seed
    """

    def __init__(
        self,
        method: str = "icfm",
        n_batches: int = 20_000,
        batch_size: int = 256,
        lr: float = 1e-3,
        sigma: float = 0.0,
        n_steps: int = 100,
        random_state: int = 0,
    ):
        self.method = method
        self.n_batches = n_batches
        self.batch_size = batch_size
        self.lr = lr
        self.sigma = sigma
        self.n_steps = n_steps
        self.random_state = random_state

    def fit(self, X, y=None):
        X, y = _check_pair(X, y)
        config = Phase1Config(
            method=self.method,
            sigma=self.sigma,
            batch_size=self.batch_size,
            n_batches=self.n_batches,
            lr=self.lr,
            seed=int(self.random_state),
            d=X.shape[1],
        )
        self.loss_curve_ = []
        self.field_: VelocityField = train_phase1(
            config, _array_sampler(X), _array_sampler(y), callback=lambda r: self.loss_curve_.append(r["loss"])
        )
        self.n_features_in_ = X.shape[1]
        return self


class OATFlowRefiner(_FlowTransformMixin, BaseEstimator):
    """Phase-2 refinement of a flow-matching estimator.

    A fitted ``base`` is refined as is; an unfitted one is cloned and fitted on
    the same data first. ``base`` itself is never modified.
    """

    def __init__(
        self,
        base=None,
        alpha: float = 2.0 / 3.0,
        n_batches: int = 20_000,
        batch_size: int = 256,
        lr: float = 1e-3,
        grad_clip_norm: float | None = 1.0,
        target_policy: str = "hard_copy",
        target_period: int = 500,
        coupling: str = "exact",
        n_steps: int = 100,
        random_state: int = 0,
    ):
        self.base = base
        self.alpha = alpha
        self.n_batches = n_batches
        self.batch_size = batch_size
        self.lr = lr
        self.grad_clip_norm = grad_clip_norm
        self.target_policy = target_policy
        self.target_period = target_period
        self.coupling = coupling
        self.n_steps = n_steps
        self.random_state = random_state

    def fit(self, X, y=None):
        X, y = _check_pair(X, y)
        base = FlowMatching(random_state=self.random_state) if self.base is None else self.base
        if hasattr(base, "field_"):
            self.base_ = base
        else:
            self.base_ = clone(base).fit(X, y)
        if self.base_.field_.d != X.shape[1]:
            raise ValueError("base estimator was fitted on a different dimension")
        config = RefineConfig(
            alpha=self.alpha,
            batch_size=self.batch_size,
            n_batches=self.n_batches,
            lr=self.lr,
            grad_clip_norm=self.grad_clip_norm,
            target_policy=self.target_policy,
            target_period=self.target_period,
            coupling=self.coupling,
            seed=int(self.random_state),
        )
        self.loss_curve_ = []
        self.field_: VelocityField = refine(
            self.base_.field_,
            config,
            _array_sampler(X),
            _array_sampler(y),
            callback=lambda r: self.loss_curve_.append(r["loss"]),
        )
        self.n_features_in_ = X.shape[1]
        return self
