"""Evaluation metrics: open-loop error, grid sensitivity, inference timing."""

from __future__ import annotations

import time

import numpy as np

from ..trajectory import Trajectory

MIN_TIMING_REPEATS = 3
# timer resolution coarser than 1% of the measured interval is flagged
TIMER_RESOLUTION_FRACTION = 0.01


def open_loop_mse(y_hat: np.ndarray, y: np.ndarray) -> float:
    """Mean of all squared residuals between two equally shaped output arrays."""
    y_hat = np.asarray(y_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    if y_hat.shape != y.shape:
        raise ValueError(f"shape mismatch: {y_hat.shape} vs {y.shape}")
    return float(np.mean((y_hat - y) ** 2))


def sensitivity(mses) -> dict:
    """Mean and population std of the finite test errors across one grid.

    Divergent trials arrive as non-finite entries (or ``None``) and are
    counted separately rather than polluting the moments.  With fewer than
    two finite values the std is undefined and flagged as such.
    """
    values = np.array(
        [float(m) for m in mses if m is not None], dtype=float
    )
    finite = values[np.isfinite(values)]
    n_divergent = len(list(mses)) - finite.size
    out = {
        "n_finite": int(finite.size),
        "n_divergent": int(n_divergent),
        "std_undefined": finite.size < 2,
    }
    out["mean"] = float(finite.mean()) if finite.size else None
    out["std"] = float(finite.std()) if finite.size >= 2 else None
    return out


def measure_inference(predict, test: Trajectory, repeats: int = 3) -> dict:
    """Median seconds per sample for one full open-loop forecast of ``test``.

    ``predict`` is called once to warm up (excluded), then ``repeats`` times
    under the wall clock.  The result is flagged unreliable when the timer
    resolution is coarser than 1% of the measured interval.
    """
    if repeats < MIN_TIMING_REPEATS:
        raise ValueError(f"repeats must be >= {MIN_TIMING_REPEATS}, got {repeats}")
    predict(test)
    elapsed = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        predict(test)
        elapsed.append(time.perf_counter() - t0)
    median = float(np.median(elapsed))
    resolution = time.get_clock_info("perf_counter").resolution
    return {
        "seconds_per_sample": median / test.n_samples,
        "seconds_total": median,
        "repeats": repeats,
        "n_samples": test.n_samples,
        "unreliable_timing": bool(median <= 0.0)
        or resolution > TIMER_RESOLUTION_FRACTION * median,
    }
