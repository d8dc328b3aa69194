"""Hyperparameter grids and profile defaults for the benchmark sweep.

Two profiles exist.  ``paper`` enumerates the full reference grids: 75 linear
subspace cells, 48 continuous-time cells, 180 discrete-time cells per system.
``desk`` cuts each axis to two or three points (12 + 8 + 32 = 52 cells per
system) and shortens training so the whole seven-system sweep fits in a
couple of hours on one workstation.

Grid enumeration goes through ``sklearn.model_selection.ParameterGrid`` and
is deterministic: axes are walked in sorted-name order.
"""

from __future__ import annotations

from sklearn.model_selection import ParameterGrid

PROFILES = ("desk", "paper")
FAMILIES = ("node", "nssm", "lssm")

_GRID_AXES = {
    "paper": {
        "lssm": {
            "method": ["n4sid", "moesp", "cva"],
            "state_dim": [10, 20, 40, 60, 80],
            "horizon": [1, 5, 10, 20, 50],
        },
        "node": {
            "latent_multiplier": [1, 5, 10],
            "field_hidden": [32, 64, 128, 256],
            "encoder_hidden": [32, 64, 128, 256],
        },
        "nssm": {
            "linear_map_kind": ["plain", "soft_svd"],
            "block": ["linear", "mlp"],
            "smoothing_weight": [0.0, 0.1, 0.2],
            "n_steps": [1, 5, 10, 20, 50],
            "latent_multiplier": [10, 30, 50],
        },
    },
    "desk": {
        "lssm": {
            "method": ["n4sid", "moesp", "cva"],
            "state_dim": [10, 40],
            "horizon": [10, 50],
        },
        "node": {
            "latent_multiplier": [1, 5],
            "field_hidden": [32, 64],
            "encoder_hidden": [32, 64],
        },
        "nssm": {
            "linear_map_kind": ["plain", "soft_svd"],
            "block": ["linear", "mlp"],
            "smoothing_weight": [0.0, 0.1],
            "n_steps": [5, 20],
            "latent_multiplier": [10, 30],
        },
    },
}

# training-loop settings that the profile fixes but the grid does not sweep;
# config files may override any of these per family
_PROFILE_TRAINING = {
    "paper": {
        "node": {"epochs": 2000, "dev_every": 10, "max_windows": None},
        "nssm": {"epochs": 5000, "dev_every": 10, "max_windows": None},
        "lssm": {},
    },
    "desk": {
        "node": {"epochs": 2000, "dev_every": 25, "max_windows": 256},
        "nssm": {"epochs": 1500, "dev_every": 25, "max_windows": 512},
        "lssm": {},
    },
}


def _check(profile: str, family: str | None = None):
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}, expected one of {PROFILES}")
    if family is not None and family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}, expected one of {FAMILIES}")


def grid_axes(profile: str, family: str) -> dict:
    _check(profile, family)
    return {k: list(v) for k, v in _GRID_AXES[profile][family].items()}


def grid_points(profile: str, family: str) -> list[dict]:
    """All hyperparameter combinations for one family, in a fixed order."""
    return list(ParameterGrid(grid_axes(profile, family)))


def grid_size(profile: str, family: str) -> int:
    n = 1
    for values in grid_axes(profile, family).values():
        n *= len(values)
    return n


def grid_cardinalities(profile: str) -> dict:
    _check(profile)
    return {family: grid_size(profile, family) for family in FAMILIES}


def training_defaults(profile: str, family: str) -> dict:
    _check(profile, family)
    return dict(_PROFILE_TRAINING[profile][family])
