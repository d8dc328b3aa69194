"""Benchmark orchestration: enumerate trials, run them, persist everything.

A sweep walks systems x families x grid cells x seeds.  Every trial appends
one JSON line to ``trials.jsonl`` and saves its fitted model under
``checkpoints/``; a later run with ``resume=True`` skips keys already on
disk, so a killed sweep continues where it stopped.  Trial failures are
recorded with their reason and never abort the sweep; only configuration
errors do, before any work starts.

Inference timing runs as a separate strictly serial pass over the saved
checkpoints (``timing.jsonl``), so wall-clock measurements are never taken
inside a worker pool.

Determinism: each trial's training seed is a stable hash of the base seed
and the trial key, so results do not depend on execution order or worker
count.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field

import yaml

from ..base import NodeForecaster, NssmForecaster, SubspaceForecaster
from ..checkpoint import load_forecaster, save_forecaster
from ..systems import builtin, generate, system_names
from ..trajectory import DatasetSplit, downsample, save_csv, split_thirds
from .grids import FAMILIES, PROFILES, grid_cardinalities, grid_points, training_defaults
from .metrics import measure_inference

# the two slow-transient datasets are decimated for the discrete-time family
# only; the continuous-time family always sees the raw sampling rate
NSSM_DOWNSAMPLE = {"tank": 10, "vehicle": 8}

# reference record length per system; used when a config names a system without n
DEFAULT_SIZES = {
    "cstr": 12000,
    "double_pendulum": 2000,
    "vehicle": 2501,
    "tank": 3000,
    "two_tank": 12000,
    "pendulum": 493,
    "linear_oscillator": 870,
}

TRIALS_FILE = "trials.jsonl"
TIMING_FILE = "timing.jsonl"
RUN_FILE = "run.json"
STATS_FILE = "sweep_stats.json"
CHECKPOINT_DIR = "checkpoints"

_ESTIMATORS = {
    "node": NodeForecaster,
    "nssm": NssmForecaster,
    "lssm": SubspaceForecaster,
}


@dataclass(frozen=True)
class SystemJob:
    """One dataset to benchmark: a built-in system plus generation settings.

    ``n`` defaults to the system's reference record length.
    """

    name: str
    n: int | None = None
    delta: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.name not in system_names():
            raise ValueError(
                f"unknown system {self.name!r}; available: {', '.join(system_names())}"
            )
        if self.n is None:
            object.__setattr__(self, "n", DEFAULT_SIZES[self.name])
        if self.n < 6:
            raise ValueError(f"n must be >= 6, got {self.n}")


@dataclass(frozen=True)
class BenchConfig:
    systems: tuple
    families: tuple = FAMILIES
    profile: str = "desk"
    out_dir: str = "results"
    base_seed: int = 0
    seeds: int = 1
    timing_repeats: int = 3
    jobs: int = 1
    max_trials: int | None = None
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.systems:
            raise ValueError("config lists no systems")
        names = [job.name for job in self.systems]
        if len(names) != len(set(names)):
            raise ValueError("config lists the same system twice")
        if not self.families:
            raise ValueError("config enables no families")
        for fam in self.families:
            if fam not in FAMILIES:
                raise ValueError(f"unknown family {fam!r}, expected one of {FAMILIES}")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.seeds < 1:
            raise ValueError("seeds must be >= 1")
        if self.timing_repeats != 0 and self.timing_repeats < 3:
            raise ValueError("timing_repeats must be 0 (off) or >= 3")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        if self.max_trials is not None and self.max_trials < 1:
            raise ValueError("max_trials must be >= 1 when given")
        for fam in self.overrides:
            if fam not in FAMILIES:
                raise ValueError(f"overrides for unknown family {fam!r}")


def load_config(path, profile=None, jobs=None, seeds=None) -> BenchConfig:
    """Parse a YAML benchmark config; keyword arguments override the file."""
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ValueError(f"config root must be a mapping, got {type(raw).__name__}")
    known = {
        "systems", "families", "profile", "out_dir", "base_seed", "seeds",
        "timing_repeats", "jobs", "max_trials", "overrides",
    }
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "systems" not in raw:
        raise ValueError("config must list systems")
    jobs_list = []
    for entry in raw["systems"]:
        if isinstance(entry, str):
            entry = {"name": entry}
        jobs_list.append(SystemJob(**entry))
    kwargs = {k: raw[k] for k in known & set(raw) if k != "systems"}
    if "families" in kwargs:
        kwargs["families"] = tuple(kwargs["families"])
    if profile is not None:
        kwargs["profile"] = profile
    if jobs is not None:
        kwargs["jobs"] = jobs
    if seeds is not None:
        kwargs["seeds"] = seeds
    return BenchConfig(systems=tuple(jobs_list), **kwargs)


def trial_key(system: str, family: str, params: dict, seed_index: int) -> str:
    parts = "-".join(f"{k}={params[k]}" for k in sorted(params))
    return f"{system}/{family}/{parts}/s{seed_index}"


def checkpoint_name(key: str) -> str:
    return key.replace("/", "__") + ".npz"


def trial_seed(base_seed: int, key: str) -> int:
    """Stable per-trial training seed, independent of execution order."""
    digest = hashlib.sha256(f"{base_seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def generate_raw(job: SystemJob):
    return generate(builtin(job.name), n=job.n, delta=job.delta, seed=job.seed)


def build_dataset(job: SystemJob, family: str) -> DatasetSplit:
    """Generate one system's data and split it; family rules applied after.

    Decimation happens per third, after the split, so every family sees the
    same physical train/dev/test boundaries.
    """
    split = split_thirds(generate_raw(job))
    factor = NSSM_DOWNSAMPLE.get(job.name) if family == "nssm" else None
    if factor:
        split = DatasetSplit(
            train=downsample(split.train, factor),
            dev=downsample(split.dev, factor),
            test=downsample(split.test, factor),
        )
    return split


_dataset_cache: dict = {}


def _cached_dataset(job: SystemJob, family: str) -> DatasetSplit:
    cache_key = (job, family if family == "nssm" else "raw")
    if cache_key not in _dataset_cache:
        _dataset_cache[cache_key] = build_dataset(job, family)
    return _dataset_cache[cache_key]


def make_estimator(family: str, params: dict, cfg: BenchConfig, seed: int):
    kwargs = dict(params)
    kwargs.update(training_defaults(cfg.profile, family))
    kwargs.update(cfg.overrides.get(family, {}))
    if family != "lssm":
        kwargs["seed"] = seed
    return _ESTIMATORS[family](**kwargs)


def enumerate_trials(cfg: BenchConfig) -> list[dict]:
    """The full deterministic trial list; also validates every estimator."""
    trials = []
    for job in cfg.systems:
        for family in cfg.families:
            for params in grid_points(cfg.profile, family):
                for s in range(cfg.seeds):
                    key = trial_key(job.name, family, params, s)
                    seed = trial_seed(cfg.base_seed, key)
                    make_estimator(family, params, cfg, seed)  # fail fast
                    trials.append(
                        {
                            "key": key,
                            "system": job.name,
                            "family": family,
                            "params": params,
                            "seed_index": s,
                            "seed": seed,
                            "job": job,
                        }
                    )
    if cfg.max_trials is not None:
        trials = trials[: cfg.max_trials]
    return trials


def _eval_third(est, traj):
    """(mse, reason) for one segment; divergence becomes a recorded reason."""
    try:
        return est.mse(traj), None
    except Exception as e:  # noqa: BLE001 - eval failures must not kill the sweep
        return None, f"{type(e).__name__}: {e}"


def run_trial(trial: dict, cfg: BenchConfig) -> dict:
    """Fit and evaluate one grid cell; always returns a record, never raises."""
    family = trial["family"]
    split = _cached_dataset(trial["job"], family)
    record = {
        "key": trial["key"],
        "system": trial["system"],
        "family": family,
        "params": trial["params"],
        "seed_index": trial["seed_index"],
        "seed": trial["seed"],
        "data_seed": trial["job"].seed,
        "n_total": trial["job"].n,
        "delta": float(split.train.delta),
        "downsample": NSSM_DOWNSAMPLE.get(trial["system"]) if family == "nssm" else None,
        "train_mse": None,
        "dev_mse": None,
        "test_mse": None,
        "diverged": False,
        "reason": None,
        "train_seconds": None,
        "n_parameters": None,
        "best_epoch": None,
        "stopped_early": None,
        "checkpoint": None,
    }
    est = make_estimator(family, trial["params"], cfg, trial["seed"])
    t0 = time.perf_counter()
    try:
        est.fit(split)
    except Exception as e:  # noqa: BLE001 - per-trial failures are data, not crashes
        record["diverged"] = True
        record["reason"] = f"{type(e).__name__}: {e}"
        record["train_seconds"] = time.perf_counter() - t0
        return record
    record["train_seconds"] = est.fit_time_
    if family == "lssm":
        m = est.model_
        record["n_parameters"] = int(m.A.size + m.B.size + m.C.size + m.K.size)
    else:
        record["n_parameters"] = int(sum(p.size for p in est.model_.parameters()))
    if isinstance(est.history_, dict):
        record["best_epoch"] = est.history_.get("best_epoch")
        record["stopped_early"] = est.history_.get("stopped_early")
    for third, name in zip(split.thirds(), ("train_mse", "dev_mse", "test_mse")):
        mse, reason = _eval_third(est, third)
        record[name] = mse
        if reason is not None:
            record["diverged"] = True
            record["reason"] = f"{name}: {reason}"
    ckpt_dir = os.path.join(cfg.out_dir, CHECKPOINT_DIR)
    os.makedirs(ckpt_dir, exist_ok=True)
    name = checkpoint_name(trial["key"])
    save_forecaster(os.path.join(ckpt_dir, name), est)
    record["checkpoint"] = name
    return record


def _worker(trial: dict, cfg: BenchConfig) -> dict:
    return run_trial(trial, cfg)


def read_jsonl(path) -> list[dict]:
    """All well-formed records in an append-only log; torn lines are dropped."""
    records = []
    if not os.path.exists(path):
        return records
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                continue  # torn write from a killed run; trial will be redone
    return records


def _seal_torn_tail(path) -> None:
    """End a crashed log with a newline so the torn line cannot eat the next."""
    if not os.path.exists(path) or os.path.getsize(path) == 0:
        return
    with open(path, "rb+") as fh:
        fh.seek(-1, os.SEEK_END)
        if fh.read(1) != b"\n":
            fh.write(b"\n")


def _append_jsonl(path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def run_benchmark(cfg: BenchConfig, resume: bool = False) -> dict:
    """Execute the sweep described by ``cfg``; returns run statistics."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    trials_path = os.path.join(cfg.out_dir, TRIALS_FILE)
    _seal_torn_tail(trials_path)
    done = {r["key"] for r in read_jsonl(trials_path)}
    if done and not resume:
        raise RuntimeError(
            f"{trials_path} already holds {len(done)} trials; "
            "pass resume=True (--resume) to continue or choose a fresh out_dir"
        )
    trials = enumerate_trials(cfg)
    cards = grid_cardinalities(cfg.profile)
    manifest = {
        "profile": cfg.profile,
        "families": list(cfg.families),
        "systems": [job.name for job in cfg.systems],
        "grid_cells": {f: cards[f] for f in cfg.families},
        "seeds_per_trial": cfg.seeds,
        "base_seed": cfg.base_seed,
        "n_trials": len(trials),
        "timing_repeats": cfg.timing_repeats,
        "max_trials": cfg.max_trials,
        "overrides": cfg.overrides,
    }
    with open(os.path.join(cfg.out_dir, RUN_FILE), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    data_dir = os.path.join(cfg.out_dir, "data")
    os.makedirs(data_dir, exist_ok=True)
    for job in cfg.systems:
        data_path = os.path.join(data_dir, f"{job.name}.csv")
        if not os.path.exists(data_path):
            save_csv(generate_raw(job), data_path)
    print(
        f"profile={cfg.profile} grid cells per system: "
        + ", ".join(f"{f}={cards[f]}" for f in cfg.families)
        + f"; total trials {len(trials)}"
        + (f" ({len(done)} already done)" if done else ""),
        flush=True,
    )
    pending = [t for t in trials if t["key"] not in done]
    t_start = time.perf_counter()
    n_run = 0

    def log(record):
        nonlocal n_run
        n_run += 1
        status = "diverged" if record["diverged"] else f"dev={record['dev_mse']:.3e}"
        print(
            f"[{n_run}/{len(pending)}] {record['key']}: {status} "
            f"({record['train_seconds']:.1f}s)",
            flush=True,
        )

    if cfg.jobs == 1:
        for trial in pending:
            record = run_trial(trial, cfg)
            _append_jsonl(trials_path, record)
            log(record)
    else:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = [pool.submit(_worker, t, cfg) for t in pending]
            for fut in as_completed(futures):
                record = fut.result()
                _append_jsonl(trials_path, record)
                log(record)
    stats = {
        "n_trials": len(trials),
        "n_run": n_run,
        "n_skipped": len(trials) - len(pending),
        "sweep_seconds": time.perf_counter() - t_start,
    }
    if cfg.timing_repeats > 0:
        stats["n_timed"] = run_timing(cfg)
        stats["sweep_seconds"] = time.perf_counter() - t_start
    _accumulate_stats(cfg.out_dir, stats)
    return stats


def _accumulate_stats(out_dir: str, stats: dict) -> None:
    # wall time must survive resumed runs, so totals add across invocations
    path = os.path.join(out_dir, STATS_FILE)
    total = stats["sweep_seconds"]
    if os.path.exists(path):
        try:
            with open(path) as fh:
                total += json.load(fh).get("total_seconds", 0.0)
        except (OSError, json.JSONDecodeError):
            pass
    with open(path, "w") as fh:
        json.dump({**stats, "total_seconds": total}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_timing(cfg: BenchConfig) -> int:
    """Serial inference-timing pass over every checkpointed trial."""
    trials_path = os.path.join(cfg.out_dir, TRIALS_FILE)
    timing_path = os.path.join(cfg.out_dir, TIMING_FILE)
    _seal_torn_tail(timing_path)
    done = {r["key"] for r in read_jsonl(timing_path)}
    jobs = {job.name: job for job in cfg.systems}
    n = 0
    for record in read_jsonl(trials_path):
        if record["key"] in done or not record.get("checkpoint"):
            continue
        job = jobs.get(record["system"])
        if job is None:
            continue
        ckpt = os.path.join(cfg.out_dir, CHECKPOINT_DIR, record["checkpoint"])
        est = load_forecaster(ckpt)
        test = _cached_dataset(job, record["family"]).test
        try:
            result = measure_inference(est.predict, test, cfg.timing_repeats)
        except Exception as e:  # noqa: BLE001 - a diverging forecast must not stop timing
            result = {"error": f"{type(e).__name__}: {e}"}
        result["key"] = record["key"]
        _append_jsonl(timing_path, result)
        n += 1
    return n
