"""Estimator wrappers giving the three model families one fit/predict API.

Estimators follow the scikit-learn protocol: constructor arguments are stored
verbatim (so ``get_params``/``set_params``/``clone`` work), fitting happens
only in ``fit``, and fitted state lives in trailing-underscore attributes.

``fit`` accepts either a full train/dev/test split or a single trajectory
(split into thirds internally).  Normalization statistics always come from
the train third and are reused everywhere else.  ``predict`` returns a
denormalized output matrix aligned row-for-row with the given trajectory:
the first ``forecast_start_`` rows echo the measurements (they anchor the
initial state) and every later row is an open-loop model prediction.
``mse`` scores exactly the predicted rows; ``score`` is its negative so that
larger is better, as scikit-learn expects.
"""

from __future__ import annotations

import time

import numpy as np
from sklearn.base import BaseEstimator

from . import node as node_mod
from . import nssm as nssm_mod
from . import subspace as subspace_mod
from .solvers import SolverConfig
from .trajectory import (
    DatasetSplit,
    Trajectory,
    denormalize_outputs,
    normalize,
    normalize_split,
    split_thirds,
)


def as_split(data) -> DatasetSplit:
    if isinstance(data, DatasetSplit):
        return data
    if isinstance(data, Trajectory):
        return split_thirds(data)
    raise TypeError(f"expected Trajectory or DatasetSplit, got {type(data).__name__}")


class BaseForecaster(BaseEstimator):
    """Shared fit/predict/score plumbing; subclasses fit the actual model."""

    def fit(self, data):
        split = as_split(data)
        normalized, stats = normalize_split(split)
        self.n_u_ = split.train.n_u
        self.n_y_ = split.train.n_y
        self.norm_stats_ = stats
        t0 = time.perf_counter()
        self._fit_normalized(normalized)
        self.fit_time_ = time.perf_counter() - t0
        return self

    def _fit_normalized(self, split: DatasetSplit):
        raise NotImplementedError

    def _forecast_normalized(self, traj: Trajectory) -> np.ndarray:
        raise NotImplementedError

    def _check_ready(self, traj: Trajectory):
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit() first")
        if traj.n_u != self.n_u_ or traj.n_y != self.n_y_:
            raise ValueError(
                f"trajectory has {traj.n_u} inputs / {traj.n_y} outputs, "
                f"model was fitted for {self.n_u_} / {self.n_y_}"
            )
        if traj.n_samples <= self.forecast_start_:
            raise ValueError(
                f"trajectory too short: {traj.n_samples} rows, anchor needs "
                f"{self.forecast_start_} and at least one row to predict"
            )

    def predict(self, traj: Trajectory) -> np.ndarray:
        """Row-aligned forecast; anchor rows echo the measurements."""
        self._check_ready(traj)
        norm, _ = normalize(traj, self.norm_stats_)
        y_hat = self._forecast_normalized(norm)
        out = denormalize_outputs(y_hat, self.norm_stats_)
        start = self.forecast_start_
        out[:start] = traj.outputs[:start]
        return out

    def mse(self, traj: Trajectory) -> float:
        """Mean squared error over the forecast rows, in original units."""
        y_hat = self.predict(traj)
        start = self.forecast_start_
        return float(np.mean((y_hat[start:] - traj.outputs[start:]) ** 2))

    def score(self, traj: Trajectory, y=None) -> float:
        return -self.mse(traj)


class NodeForecaster(BaseForecaster):
    """Continuous-time latent model behind the estimator API."""

    def __init__(
        self,
        latent_multiplier=5,
        field_hidden=64,
        encoder_hidden=64,
        lr=0.01,
        epochs=2000,
        gradient_method="adjoint",
        solver_method="dopri5",
        rtol=1e-6,
        atol=1e-8,
        h_init=None,
        dev_every=1,
        dev_horizon=None,
        max_windows=None,
        seed=0,
    ):
        self.latent_multiplier = latent_multiplier
        self.field_hidden = field_hidden
        self.encoder_hidden = encoder_hidden
        self.lr = lr
        self.epochs = epochs
        self.gradient_method = gradient_method
        self.solver_method = solver_method
        self.rtol = rtol
        self.atol = atol
        self.h_init = h_init
        self.dev_every = dev_every
        self.dev_horizon = dev_horizon
        self.max_windows = max_windows
        self.seed = seed

    @property
    def forecast_start_(self) -> int:
        return 1

    def _solver(self) -> SolverConfig:
        return SolverConfig(
            method=self.solver_method, rtol=self.rtol, atol=self.atol, h_init=self.h_init
        )

    def _fit_normalized(self, split):
        cfg = node_mod.NodeTrainConfig(
            latent_multiplier=self.latent_multiplier,
            field_hidden=self.field_hidden,
            encoder_hidden=self.encoder_hidden,
            lr=self.lr,
            epochs=self.epochs,
            gradient_method=self.gradient_method,
            solver=self._solver(),
            dev_every=self.dev_every,
            dev_horizon=self.dev_horizon,
            max_windows=self.max_windows,
            seed=self.seed,
        )
        self.model_, self.history_ = node_mod.train_node(split, cfg)

    def _forecast_normalized(self, traj):
        return node_mod.forecast(
            self.model_, traj.times, traj.inputs, traj.outputs[0], self._solver()
        )


class NssmForecaster(BaseForecaster):
    """Discrete-time block model behind the estimator API."""

    def __init__(
        self,
        latent_multiplier=10,
        n_steps=1,
        block="linear",
        linear_map_kind="plain",
        hidden=64,
        lr=0.003,
        weight_decay=0.01,
        epochs=5000,
        smoothing_weight=0.0,
        use_output_bounds=False,
        dev_every=1,
        dev_horizon=None,
        max_windows=None,
        seed=0,
    ):
        self.latent_multiplier = latent_multiplier
        self.n_steps = n_steps
        self.block = block
        self.linear_map_kind = linear_map_kind
        self.hidden = hidden
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.smoothing_weight = smoothing_weight
        self.use_output_bounds = use_output_bounds
        self.dev_every = dev_every
        self.dev_horizon = dev_horizon
        self.max_windows = max_windows
        self.seed = seed

    @property
    def forecast_start_(self) -> int:
        return self.n_steps  # history length is tied to the rollout horizon

    def _fit_normalized(self, split):
        bounds_min = bounds_max = None
        if self.use_output_bounds:
            y = split.train.outputs
            span = y.max(axis=0) - y.min(axis=0)
            bounds_min = tuple(y.min(axis=0) - 0.1 * span)
            bounds_max = tuple(y.max(axis=0) + 0.1 * span)
        cfg = nssm_mod.NssmTrainConfig(
            latent_multiplier=self.latent_multiplier,
            n_steps=self.n_steps,
            block=self.block,
            linear_map_kind=self.linear_map_kind,
            hidden=self.hidden,
            lr=self.lr,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            smoothing_weight=self.smoothing_weight,
            bounds_min=bounds_min,
            bounds_max=bounds_max,
            dev_every=self.dev_every,
            dev_horizon=self.dev_horizon,
            max_windows=self.max_windows,
            seed=self.seed,
        )
        self.model_, self.history_ = nssm_mod.train_nssm(split, cfg)

    def _forecast_normalized(self, traj):
        p = self.model_.n_past
        return nssm_mod.forecast(self.model_, traj.inputs, traj.outputs[:p])


class SubspaceForecaster(BaseForecaster):
    """Classical linear identification behind the estimator API.

    The anchor window used to estimate the initial state spans
    ``max(state_dim, horizon)`` rows, so it is fixed by the hyperparameters
    even when the identified order gets reduced.
    """

    def __init__(self, method="n4sid", state_dim=10, horizon=10):
        self.method = method
        self.state_dim = state_dim
        self.horizon = horizon

    @property
    def forecast_start_(self) -> int:
        return max(self.state_dim, self.horizon)

    def _fit_normalized(self, split):
        cfg = subspace_mod.SubspaceConfig(
            method=self.method, n_x=self.state_dim, horizon=self.horizon
        )
        t0 = time.perf_counter()
        train = split.train
        self.model_ = subspace_mod.identify(train.inputs, train.outputs, cfg)
        self.history_ = {
            "singular_values": self.model_.singular_values.tolist(),
            "state_dim_effective": self.model_.n_x,
            "fit_seconds": time.perf_counter() - t0,
        }

    def _forecast_normalized(self, traj):
        start = self.forecast_start_
        x0 = subspace_mod.estimate_x0(
            self.model_, traj.inputs[:start], traj.outputs[:start]
        )
        return subspace_mod.lssm_simulate(self.model_, x0, traj.inputs)
