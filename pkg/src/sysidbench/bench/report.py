"""Report generation: a pure fold of the persisted trial records.

``summary.json`` is rebuilt deterministically from ``trials.jsonl`` (plus
``timing.jsonl`` when the timing pass ran): selection picks the lowest dev
error with ties broken by key, so regenerating the report from disk always
produces byte-identical output.  Wall-clock quantities never enter the
summary; they live in ``trials.csv``.

Outputs: ``summary.json``, flat ``trials.csv``, a long-format
``plot_data.csv`` (system, family, metric, value) for external plotting, and
per system x family ``trajectories/*.csv`` dumps of the dev-best model's
open-loop forecast against the measured test third.
"""

from __future__ import annotations

import csv
import json
import os

from ..checkpoint import load_forecaster
from ..trajectory import DatasetSplit, downsample, load_csv, split_thirds
from .metrics import sensitivity
from .runner import CHECKPOINT_DIR, RUN_FILE, TIMING_FILE, TRIALS_FILE, read_jsonl

SUMMARY_VERSION = 1
INFERENCE_REFERENCE_BAND = (1.1, 4.4)

TRIAL_COLUMNS = [
    "key", "system", "family", "seed_index", "seed", "data_seed", "n_total",
    "delta", "downsample", "train_mse", "dev_mse", "test_mse", "diverged",
    "reason", "train_seconds", "n_parameters", "best_epoch", "stopped_early",
    "checkpoint",
]


def dedupe(records: list[dict]) -> list[dict]:
    """Last record wins per key, original order otherwise."""
    by_key = {}
    for r in records:
        by_key[r["key"]] = r
    return list(by_key.values())


def select_best(records: list[dict]) -> dict | None:
    """Dev-lowest finite trial; ties resolved by key so selection is stable.

    Selection reads the dev error only; test results never participate.
    """
    candidates = [
        r for r in records
        if r.get("dev_mse") is not None and r["dev_mse"] == r["dev_mse"]
    ]
    if not candidates:
        return None
    return min(candidates, key=lambda r: (r["dev_mse"], r["key"]))


def _median(values: list[float]) -> float | None:
    if not values:
        return None
    ordered = sorted(values)
    mid = len(ordered) // 2
    if len(ordered) % 2:
        return ordered[mid]
    return (ordered[mid - 1] + ordered[mid]) / 2.0


def _cell_summary(records: list[dict], timing: dict) -> dict:
    best = select_best(records)
    stats = sensitivity([r.get("test_mse") for r in records])
    timed = [
        timing[r["key"]]["seconds_per_sample"]
        for r in records
        if r["key"] in timing and "seconds_per_sample" in timing[r["key"]]
    ]
    cell = {
        "n_trials": len(records),
        "n_diverged": sum(1 for r in records if r.get("diverged")),
        "best": None,
        "test_mse_mean": stats["mean"],
        "test_mse_std": stats["std"],
        "std_undefined": stats["std_undefined"],
        "n_finite": stats["n_finite"],
        "inference_seconds_per_sample_median": _median(timed),
        "n_timed": len(timed),
    }
    if best is not None:
        cell["best"] = {
            "key": best["key"],
            "params": best["params"],
            "train_mse": best.get("train_mse"),
            "dev_mse": best.get("dev_mse"),
            "test_mse": best.get("test_mse"),
            "n_parameters": best.get("n_parameters"),
        }
    return cell


def _ratio(num, den):
    if num is None or den is None or not den > 0:
        return None
    return num / den


def build_summary(records: list[dict], timing: dict, manifest: dict) -> dict:
    """Aggregate trial records into the summary structure (pure function)."""
    records = dedupe(records)
    grouped: dict = {}
    for r in records:
        grouped.setdefault(r["system"], {}).setdefault(r["family"], []).append(r)
    per_system = {
        system: {
            family: _cell_summary(cell_records, timing)
            for family, cell_records in families.items()
        }
        for system, families in grouped.items()
    }

    ratios = {}
    for system, families in per_system.items():
        def best_test(fam):
            cell = families.get(fam)
            return cell["best"]["test_mse"] if cell and cell["best"] else None

        def med_inference(fam):
            cell = families.get(fam)
            return cell["inference_seconds_per_sample_median"] if cell else None

        rows = {}
        for other in ("nssm", "lssm"):
            r = _ratio(best_test("node"), best_test(other))
            if r is not None:
                rows[f"node_over_{other}_best_test_mse"] = r
        r = _ratio(med_inference("node"), med_inference("nssm"))
        if r is not None:
            rows["node_over_nssm_inference"] = r
        if rows:
            ratios[system] = rows

    return {
        "format_version": SUMMARY_VERSION,
        "profile": manifest.get("profile"),
        "families": manifest.get("families"),
        "systems": manifest.get("systems"),
        "grid_cells": manifest.get("grid_cells"),
        "seeds_per_trial": manifest.get("seeds_per_trial"),
        "base_seed": manifest.get("base_seed"),
        "n_trials": len(records),
        "n_diverged": sum(1 for r in records if r.get("diverged")),
        "inference_reference_band": list(INFERENCE_REFERENCE_BAND),
        "per_system": per_system,
        "ratios": ratios,
    }


def summary_bytes(summary: dict) -> bytes:
    return (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode()


def write_trials_csv(records: list[dict], timing: dict, path) -> None:
    param_keys = sorted({k for r in records for k in r.get("params", {})})
    columns = TRIAL_COLUMNS + [f"param_{k}" for k in param_keys] + [
        "seconds_per_sample"
    ]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in records:
            row = [r.get(c) for c in TRIAL_COLUMNS]
            row += [r.get("params", {}).get(k) for k in param_keys]
            t = timing.get(r["key"], {})
            row.append(t.get("seconds_per_sample"))
            w.writerow(row)


def write_plot_data(summary: dict, path) -> None:
    """Long-format table: one (system, family, metric, value) row per fact."""
    rows = []
    for system in sorted(summary["per_system"]):
        for family in sorted(summary["per_system"][system]):
            cell = summary["per_system"][system][family]
            facts = {
                "best_test_mse": cell["best"]["test_mse"] if cell["best"] else None,
                "best_dev_mse": cell["best"]["dev_mse"] if cell["best"] else None,
                "test_mse_mean": cell["test_mse_mean"],
                "test_mse_std": cell["test_mse_std"],
                "inference_seconds_per_sample_median": cell[
                    "inference_seconds_per_sample_median"
                ],
            }
            for metric, value in facts.items():
                if value is not None:
                    rows.append((system, family, metric, value))
    for system in sorted(summary["ratios"]):
        for metric, value in sorted(summary["ratios"][system].items()):
            rows.append((system, metric, "ratio", value))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["system", "family", "metric", "value"])
        w.writerows(rows)


def _best_test_third(results_dir: str, record: dict):
    data_path = os.path.join(results_dir, "data", f"{record['system']}.csv")
    if not os.path.exists(data_path):
        return None
    split = split_thirds(load_csv(data_path))
    factor = record.get("downsample")
    if factor:
        split = DatasetSplit(
            train=downsample(split.train, factor),
            dev=downsample(split.dev, factor),
            test=downsample(split.test, factor),
        )
    return split.test


def write_trajectories(results_dir: str, records: list[dict], out_dir: str) -> list[str]:
    """Dev-best open-loop forecasts vs measurements, one CSV per cell."""
    grouped: dict = {}
    for r in dedupe(records):
        grouped.setdefault((r["system"], r["family"]), []).append(r)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for (system, family), cell_records in sorted(grouped.items()):
        best = select_best(cell_records)
        if best is None or not best.get("checkpoint"):
            continue
        test = _best_test_third(results_dir, best)
        if test is None:
            continue
        ckpt = os.path.join(results_dir, CHECKPOINT_DIR, best["checkpoint"])
        if not os.path.exists(ckpt):
            continue
        est = load_forecaster(ckpt)
        try:
            pred = est.predict(test)
        except Exception as e:  # noqa: BLE001 - a diverging dump is reported, not fatal
            print(f"trajectory dump skipped for {best['key']}: {e}", flush=True)
            continue
        path = os.path.join(out_dir, f"{system}__{family}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            header = (
                ["t"]
                + [f"y{i + 1}" for i in range(test.n_y)]
                + [f"yhat{i + 1}" for i in range(test.n_y)]
            )
            w.writerow(header)
            for k in range(test.n_samples):
                w.writerow(
                    [repr(float(test.times[k]))]
                    + [repr(float(v)) for v in test.outputs[k]]
                    + [repr(float(v)) for v in pred[k]]
                )
        written.append(path)
    return written


def write_report(results_dir: str, out_dir: str) -> dict:
    """Build every report artifact from one results directory."""
    trials_path = os.path.join(results_dir, TRIALS_FILE)
    records = read_jsonl(trials_path)
    if not records:
        raise FileNotFoundError(f"no trial records found at {trials_path}")
    manifest_path = os.path.join(results_dir, RUN_FILE)
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    else:
        manifest = {}
    timing = {
        r["key"]: r for r in read_jsonl(os.path.join(results_dir, TIMING_FILE))
    }
    os.makedirs(out_dir, exist_ok=True)
    summary = build_summary(records, timing, manifest)
    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "wb") as fh:
        fh.write(summary_bytes(summary))
    records = dedupe(records)
    write_trials_csv(records, timing, os.path.join(out_dir, "trials.csv"))
    write_plot_data(summary, os.path.join(out_dir, "plot_data.csv"))
    trajectories = write_trajectories(
        results_dir, records, os.path.join(out_dir, "trajectories")
    )
    return {
        "summary": summary_path,
        "trials_csv": os.path.join(out_dir, "trials.csv"),
        "plot_data_csv": os.path.join(out_dir, "plot_data.csv"),
        "trajectories": trajectories,
    }
