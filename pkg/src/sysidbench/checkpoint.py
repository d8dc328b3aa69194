"""Persist fitted forecasters as single ``.npz`` files.

One file holds everything ``predict`` needs: the estimator's constructor
parameters, the normalization statistics, the model architecture, and its
weights.  Training history and fit time ride along so reports can be rebuilt
from checkpoints alone.  Weights are stored as plain float arrays in the
model's canonical parameter order; nothing is pickled.
"""

from __future__ import annotations

import json

import numpy as np

from .base import NodeForecaster, NssmForecaster, SubspaceForecaster
from .exceptions import DataError
from .node import NodeModel
from .nssm import NssmModel
from .subspace import Lssm
from .trajectory import NormStats

FORMAT_VERSION = 1

_FAMILY_CLASSES = {
    "node": NodeForecaster,
    "nssm": NssmForecaster,
    "lssm": SubspaceForecaster,
}


def family_of(est) -> str:
    for name, cls in _FAMILY_CLASSES.items():
        if isinstance(est, cls):
            return name
    raise TypeError(f"not a known forecaster: {type(est).__name__}")


def _stats_to_json(stats: NormStats) -> dict:
    return {
        "input_mean": np.asarray(stats.input_mean).tolist(),
        "input_std": np.asarray(stats.input_std).tolist(),
        "output_mean": np.asarray(stats.output_mean).tolist(),
        "output_std": np.asarray(stats.output_std).tolist(),
    }


def _stats_from_json(d: dict) -> NormStats:
    return NormStats(
        input_mean=np.asarray(d["input_mean"], dtype=float),
        input_std=np.asarray(d["input_std"], dtype=float),
        output_mean=np.asarray(d["output_mean"], dtype=float),
        output_std=np.asarray(d["output_std"], dtype=float),
    )


def save_forecaster(path, est) -> None:
    """Write a fitted estimator to ``path`` as a ``.npz`` archive."""
    if not hasattr(est, "model_"):
        raise ValueError("estimator is not fitted; nothing to save")
    family = family_of(est)
    meta = {
        "format_version": FORMAT_VERSION,
        "family": family,
        "params": est.get_params(),
        "n_u": est.n_u_,
        "n_y": est.n_y_,
        "norm_stats": _stats_to_json(est.norm_stats_),
        "history": est.history_,
        "fit_time": est.fit_time_,
    }
    arrays = {}
    if family == "lssm":
        meta["model"] = est.model_.to_dict()
    else:
        meta["model"] = est.model_.meta()
        for k, p in enumerate(est.model_.parameters()):
            arrays[f"p{k}"] = p
    arrays["meta_json"] = np.array(json.dumps(meta, sort_keys=True))
    np.savez(path, **arrays)


def load_forecaster(path):
    """Rebuild a fitted estimator from a checkpoint written by save_forecaster."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(data["meta_json"].item())
        if meta.get("format_version") != FORMAT_VERSION:
            raise DataError(
                f"unsupported checkpoint format {meta.get('format_version')!r}"
            )
        family = meta["family"]
        if family not in _FAMILY_CLASSES:
            raise DataError(f"unknown model family {family!r}")
        est = _FAMILY_CLASSES[family](**meta["params"])
        if family == "lssm":
            model = Lssm.from_dict(meta["model"])
        else:
            cls = NodeModel if family == "node" else NssmModel
            model = cls.from_meta(meta["model"])
            params = model.parameters()
            for k, p in enumerate(params):
                saved = data[f"p{k}"]
                if saved.shape != p.shape:
                    raise DataError(
                        f"weight {k} has shape {saved.shape}, expected {p.shape}"
                    )
                p[...] = saved
            if f"p{len(params)}" in data.files:
                raise DataError("checkpoint holds more weights than the model")
    est.model_ = model
    est.n_u_ = meta["n_u"]
    est.n_y_ = meta["n_y"]
    est.norm_stats_ = _stats_from_json(meta["norm_stats"])
    est.history_ = meta["history"]
    est.fit_time_ = meta["fit_time"]
    return est
