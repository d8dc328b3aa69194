"""Explicit ODE steppers and a grid-landing integrator.

Three methods: forward Euler, the classical 4th-order Runge-Kutta step, and
the Dormand-Prince 5(4) pair with embedded error control.  ``integrate`` walks
a caller-supplied time grid and lands on every grid point exactly (states are
reported at the grid times, no dense interpolation).

States may have any array shape; the vector field must return the same shape.
A trailing batch works too: adaptive error control then couples the batch
through one shared RMS error norm, which is the usual choice when training
batched neural ODEs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .exceptions import DivergenceError, NonConvergenceError

VectorField = Callable[[np.ndarray, float], np.ndarray]

METHODS = ("euler", "rk4", "dopri5")

# step-size controller bounds
SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0

# Dormand-Prince 5(4) tableau
C2, C3, C4, C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
A21 = 1 / 5
A31, A32 = 3 / 40, 9 / 40
A41, A42, A43 = 44 / 45, -56 / 15, 32 / 9
A51, A52, A53, A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
A61, A62, A63, A64, A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
# 5th-order solution weights (also the a7j row)
B1, B3, B4, B5, B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
# embedded 4th-order weights
E1, E3, E4, E5, E6, E7 = (
    5179 / 57600,
    7571 / 16695,
    393 / 640,
    -92097 / 339200,
    187 / 2100,
    1 / 40,
)


@dataclass(frozen=True)
class SolverConfig:
    """Integrator settings.

    ``h_init``, ``h_min`` and ``h_max`` default (when ``None``) to
    ``(t1 - t0) / 100``, ``1e-10 * (t_end - t_start)`` and the full span,
    resolved against the grid actually passed to :func:`integrate`.
    For the fixed-step methods ``h_init`` is the target step; each grid
    interval is covered by equal substeps no longer than it.
    """

    method: str = "dopri5"
    rtol: float = 1e-6
    atol: float = 1e-8
    h_init: float | None = None
    h_min: float | None = None
    h_max: float | None = None
    max_steps: int = 100_000

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "rtol": self.rtol,
            "atol": self.atol,
            "h_init": self.h_init,
            "h_min": self.h_min,
            "h_max": self.h_max,
            "max_steps": self.max_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        return cls(**d)


def _check_finite(x: np.ndarray, t: float) -> None:
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite state at t={t!r}")


def step_euler(f: VectorField, x: np.ndarray, t: float, h: float) -> np.ndarray:
    out = x + h * f(x, t)
    _check_finite(out, t + h)
    return out


def step_rk4(f: VectorField, x: np.ndarray, t: float, h: float) -> np.ndarray:
    k1 = f(x, t)
    k2 = f(x + 0.5 * h * k1, t + 0.5 * h)
    k3 = f(x + 0.5 * h * k2, t + 0.5 * h)
    k4 = f(x + h * k3, t + h)
    out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    _check_finite(out, t + h)
    return out


def step_dopri5(
    f: VectorField,
    x: np.ndarray,
    t: float,
    h: float,
    rtol: float,
    atol: float,
):
    """One Dormand-Prince 5(4) trial step.

    Returns ``(x5, err_est, h_next)``: the 5th-order solution, the weighted
    RMS error estimate (accept iff <= 1), and the controller's proposal for
    the next step size.
    """
    k1 = f(x, t)
    k2 = f(x + h * (A21 * k1), t + C2 * h)
    k3 = f(x + h * (A31 * k1 + A32 * k2), t + C3 * h)
    k4 = f(x + h * (A41 * k1 + A42 * k2 + A43 * k3), t + C4 * h)
    k5 = f(x + h * (A51 * k1 + A52 * k2 + A53 * k3 + A54 * k4), t + C5 * h)
    k6 = f(
        x + h * (A61 * k1 + A62 * k2 + A63 * k3 + A64 * k4 + A65 * k5),
        t + h,
    )
    x5 = x + h * (B1 * k1 + B3 * k3 + B4 * k4 + B5 * k5 + B6 * k6)
    k7 = f(x5, t + h)
    x4 = x + h * (E1 * k1 + E3 * k3 + E4 * k4 + E5 * k5 + E6 * k6 + E7 * k7)
    _check_finite(x5, t + h)

    scale = atol + rtol * np.maximum(np.abs(x), np.abs(x5))
    err_est = float(np.sqrt(np.mean(np.square((x5 - x4) / scale))))
    if err_est == 0.0:
        factor = MAX_FACTOR
    else:
        factor = min(MAX_FACTOR, max(MIN_FACTOR, SAFETY * err_est ** (-0.2)))
    return x5, err_est, h * factor


def _resolved(cfg: SolverConfig, t_grid: np.ndarray):
    span = float(t_grid[-1] - t_grid[0])
    h_init = cfg.h_init if cfg.h_init is not None else float(t_grid[1] - t_grid[0]) / 100.0
    h_min = cfg.h_min if cfg.h_min is not None else 1e-10 * span
    h_max = cfg.h_max if cfg.h_max is not None else span
    return h_init, h_min, h_max


def integrate(
    f: VectorField,
    x0: np.ndarray,
    t_grid,
    cfg: SolverConfig | None = None,
) -> np.ndarray:
    """Integrate ``dx/dt = f(x, t)`` and report states at every grid time.

    Parameters
    ----------
    f : callable
        Vector field ``f(x, t) -> dx/dt`` with ``x``-shaped return.
    x0 : ndarray
        State at ``t_grid[0]``; any shape.
    t_grid : array-like, shape (T,)
        Strictly increasing times, ``T >= 2``.
    cfg : SolverConfig, optional

    Returns
    -------
    ndarray, shape (T, \\*x0.shape)
        ``out[0]`` is ``x0`` itself.
    """
    cfg = cfg or SolverConfig()
    t_grid = np.asarray(t_grid, dtype=float).reshape(-1)
    if t_grid.shape[0] < 2:
        raise ValueError("t_grid needs at least 2 points")
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be strictly increasing")
    x = np.asarray(x0, dtype=float)
    out = np.empty((t_grid.shape[0],) + x.shape, dtype=float)
    out[0] = x
    h_init, h_min, h_max = _resolved(cfg, t_grid)

    if cfg.method in ("euler", "rk4"):
        stepper = step_euler if cfg.method == "euler" else step_rk4
        nsteps = 0
        for i in range(1, t_grid.shape[0]):
            t0, t1 = float(t_grid[i - 1]), float(t_grid[i])
            n_sub = max(1, math.ceil((t1 - t0) / h_init - 1e-12))
            h = (t1 - t0) / n_sub
            for j in range(n_sub):
                nsteps += 1
                if nsteps > cfg.max_steps:
                    raise NonConvergenceError(
                        f"exceeded max_steps={cfg.max_steps}", last_t=t0 + j * h
                    )
                x = stepper(f, x, t0 + j * h, h)
            out[i] = x
        return out

    # dopri5: adaptive with exact grid landing
    t = float(t_grid[0])
    h = min(h_init, h_max)
    nsteps = 0
    for i in range(1, t_grid.shape[0]):
        target = float(t_grid[i])
        while t < target:
            truncated = h > target - t
            h_try = min(h, target - t)
            nsteps += 1
            if nsteps > cfg.max_steps:
                raise NonConvergenceError(f"exceeded max_steps={cfg.max_steps}", last_t=t)
            x_new, err_est, h_prop = step_dopri5(f, x, t, h_try, cfg.rtol, cfg.atol)
            if err_est <= 1.0:
                assert err_est <= 1.0  # accepted steps always satisfy the tolerance
                x = x_new
                t = target if truncated and h_try == target - t else t + h_try
                # a landing-truncated step must not collapse the running step size
                h = max(h_prop, h) if truncated else h_prop
            else:
                h = h_prop
            h = min(h, h_max)
            if h < h_min:
                raise NonConvergenceError(
                    f"step size underflow (h={h!r} < h_min={h_min!r})", last_t=t
                )
        t = target
        out[i] = x
    return out


def with_method(cfg: SolverConfig, method: str) -> SolverConfig:
    return replace(cfg, method=method)
