"""Benchmark orchestration: grids, metrics, sweep runner, reporting."""

from .grids import (
    FAMILIES,
    PROFILES,
    grid_axes,
    grid_cardinalities,
    grid_points,
    grid_size,
    training_defaults,
)
from .metrics import measure_inference, open_loop_mse, sensitivity
from .report import build_summary, select_best, summary_bytes, write_report
from .runner import (
    BenchConfig,
    SystemJob,
    build_dataset,
    enumerate_trials,
    load_config,
    run_benchmark,
    run_timing,
    run_trial,
    trial_key,
    trial_seed,
)

__all__ = [
    "FAMILIES",
    "PROFILES",
    "BenchConfig",
    "SystemJob",
    "build_dataset",
    "build_summary",
    "enumerate_trials",
    "grid_axes",
    "grid_cardinalities",
    "grid_points",
    "grid_size",
    "load_config",
    "measure_inference",
    "open_loop_mse",
    "run_benchmark",
    "run_timing",
    "run_trial",
    "select_best",
    "sensitivity",
    "summary_bytes",
    "training_defaults",
    "trial_key",
    "trial_seed",
    "write_report",
]
