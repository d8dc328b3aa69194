"""Uniform-grid trajectory container and the dataset plumbing built on it.

Everything downstream (training, identification, the benchmark) consumes the
types defined here.  A :class:`Trajectory` is immutable: its arrays are
write-protected on construction so trajectories can be shared freely between
worker processes and cached without defensive copies.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import CsvSchemaError, DataError, GridError, TooShortError

# Relative tolerance for the uniform-grid check.  12 significant digits in the
# CSV round-trip leave ~1e-12 relative jitter, so 1e-9 is comfortably above
# serialization noise and far below any real sampling irregularity.
GRID_RTOL = 1e-9

STD_FLOOR = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Trajectory:
    """Sampled input/output record of one simulation or measurement run.

    Parameters
    ----------
    delta : float
        Sampling interval; strictly positive.
    times : ndarray, shape (N,)
        Sample times, a uniform grid with spacing ``delta``.
    inputs : ndarray, shape (N, n_u)
        Exogenous inputs; ``n_u = 0`` for autonomous systems.
    outputs : ndarray, shape (N, n_y)
        Measured outputs.
    """

    delta: float
    times: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        times = _readonly(np.asarray(self.times, dtype=float).reshape(-1))
        inputs = np.asarray(self.inputs, dtype=float)
        outputs = np.asarray(self.outputs, dtype=float)
        if inputs.ndim != 2 or outputs.ndim != 2:
            raise DataError("inputs and outputs must be 2-D (N, channels)")
        inputs = _readonly(inputs)
        outputs = _readonly(outputs)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "outputs", outputs)

        n = times.shape[0]
        if n < 2:
            raise TooShortError(f"need at least 2 samples, got {n}")
        if inputs.shape[0] != n or outputs.shape[0] != n:
            raise DataError(
                f"row mismatch: times {n}, inputs {inputs.shape[0]}, outputs {outputs.shape[0]}"
            )
        if not (self.delta > 0) or not math.isfinite(self.delta):
            raise GridError(f"delta must be positive and finite, got {self.delta}")
        dt = np.diff(times)
        if np.any(np.abs(dt - self.delta) > GRID_RTOL * abs(self.delta) + 1e-15):
            k = int(np.argmax(np.abs(dt - self.delta)))
            raise GridError(
                f"non-uniform grid at row {k + 1}: dt={dt[k]!r} vs delta={self.delta!r}"
            )
        if not np.all(np.isfinite(inputs)):
            raise DataError("non-finite value in inputs")
        if not np.all(np.isfinite(outputs)):
            raise DataError("non-finite value in outputs")

    @property
    def n_samples(self) -> int:
        return self.times.shape[0]

    @property
    def n_u(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_y(self) -> int:
        return self.outputs.shape[1]

    def slice(self, start: int, stop: int) -> "Trajectory":
        """Contiguous row range as a new trajectory (times preserved)."""
        if stop - start < 2:
            raise TooShortError(f"slice [{start}, {stop}) has fewer than 2 rows")
        return Trajectory(
            delta=self.delta,
            times=self.times[start:stop],
            inputs=self.inputs[start:stop],
            outputs=self.outputs[start:stop],
        )


@dataclass(frozen=True)
class DatasetSplit:
    """Contiguous train/dev/test thirds of one trajectory."""

    train: Trajectory
    dev: Trajectory
    test: Trajectory

    def thirds(self):
        return self.train, self.dev, self.test


@dataclass(frozen=True)
class Window:
    """One training window.

    ``past_*`` rows cover source indices ``[k - n_past, k)`` and ``future_*``
    rows cover ``[k, k + n_steps)`` where ``k = start_index``.  ``past_inputs``
    is carried so the input held during the step into row ``k`` (the one at
    index ``k - 1``) is available to rollout code.
    """

    start_index: int
    past_outputs: np.ndarray
    past_inputs: np.ndarray
    future_inputs: np.ndarray
    future_outputs: np.ndarray


@dataclass(frozen=True)
class NormStats:
    """Per-channel affine normalization parameters.

    Means and population standard deviations of the segment they were computed
    on; standard deviations are floored at ``STD_FLOOR`` so constant channels
    map to zero instead of dividing by zero.
    """

    input_mean: np.ndarray
    input_std: np.ndarray
    output_mean: np.ndarray
    output_std: np.ndarray
    constant_inputs: np.ndarray = field(default=None)
    constant_outputs: np.ndarray = field(default=None)


def header_fields(n_u: int, n_y: int) -> list[str]:
    """Canonical CSV header for given channel counts."""
    return ["t"] + [f"u{i + 1}" for i in range(n_u)] + [f"y{i + 1}" for i in range(n_y)]


def save_csv(tr: Trajectory, path) -> None:
    """Write ``t,u1..,y1..`` rows with 12 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header_fields(tr.n_u, tr.n_y))
        for k in range(tr.n_samples):
            row = [tr.times[k], *tr.inputs[k], *tr.outputs[k]]
            w.writerow([f"{v:.12g}" for v in row])


def load_csv(path, n_u: int | None = None, n_y: int | None = None) -> Trajectory:
    """Read a trajectory CSV with the exact header for (n_u, n_y).

    With the channel counts omitted they are inferred from the header, which
    must still follow the canonical ``t,u1..,y1..`` layout.

    Raises
    ------
    CsvSchemaError
        Header mismatch or wrong cell count on some row.
    DataError
        A cell is not a finite number (message carries the 1-based data row).
    GridError
        Timestamps do not form a uniform grid.
    """
    rows = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        try:
            header = next(r)
        except StopIteration:
            raise CsvSchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if n_u is None or n_y is None:
            n_u = sum(1 for h in header if h.startswith("u"))
            n_y = sum(1 for h in header if h.startswith("y"))
        expected = header_fields(n_u, n_y)
        if header != expected:
            raise CsvSchemaError(
                f"{path}: header {header!r} does not match expected {expected!r}"
            )
        for i, row in enumerate(r, start=1):
            if not row:
                continue
            if len(row) != len(expected):
                raise CsvSchemaError(
                    f"{path}: row {i} has {len(row)} cells, expected {len(expected)}"
                )
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise DataError(f"{path}: non-numeric cell in data row {i}") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path}: non-finite value in data row {i}")
            rows.append(vals)
    if len(rows) < 2:
        raise TooShortError(f"{path}: need at least 2 data rows, got {len(rows)}")
    arr = np.asarray(rows, dtype=float)
    times = arr[:, 0]
    inputs = arr[:, 1 : 1 + n_u]
    outputs = arr[:, 1 + n_u :]
    delta = float(times[1] - times[0])
    return Trajectory(delta=delta, times=times, inputs=inputs, outputs=outputs)


def split_thirds(tr: Trajectory) -> DatasetSplit:
    """Contiguous train/dev/test split, as equal as N allows.

    The remainder of ``N % 3`` goes to train first, then dev, so the three
    lengths never differ by more than one and test is never the longest.
    """
    n = tr.n_samples
    if n < 6:
        raise TooShortError(f"need at least 6 samples to split, got {n}")
    base, rem = divmod(n, 3)
    n_train = base + (1 if rem >= 1 else 0)
    n_dev = base + (1 if rem >= 2 else 0)
    a = n_train
    b = n_train + n_dev
    return DatasetSplit(
        train=tr.slice(0, a),
        dev=tr.slice(a, b),
        test=tr.slice(b, n),
    )


def downsample(tr: Trajectory, factor: int) -> Trajectory:
    """Keep every ``factor``-th row (strided decimation, no filtering)."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"factor must be an integer >= 1, got {factor!r}")
    if factor == 1:
        return tr
    return Trajectory(
        delta=tr.delta * factor,
        times=tr.times[::factor],
        inputs=tr.inputs[::factor],
        outputs=tr.outputs[::factor],
    )


def compute_norm_stats(tr: Trajectory) -> NormStats:
    """Per-channel mean/std of one segment (population std, floored)."""
    in_std = tr.inputs.std(axis=0) if tr.n_u else np.zeros(0)
    out_std = tr.outputs.std(axis=0)
    return NormStats(
        input_mean=tr.inputs.mean(axis=0) if tr.n_u else np.zeros(0),
        input_std=np.maximum(in_std, STD_FLOOR),
        output_mean=tr.outputs.mean(axis=0),
        output_std=np.maximum(out_std, STD_FLOOR),
        constant_inputs=in_std < STD_FLOOR,
        constant_outputs=out_std < STD_FLOOR,
    )


def normalize(tr: Trajectory, stats: NormStats | None = None):
    """Affinely normalize a segment.

    With ``stats=None`` the statistics are computed on ``tr`` itself and
    returned alongside; passing precomputed stats applies them unchanged (the
    protocol computes stats on the train third and applies them to dev/test).
    """
    if stats is None:
        stats = compute_norm_stats(tr)
    inputs = (tr.inputs - stats.input_mean) / stats.input_std if tr.n_u else tr.inputs
    outputs = (tr.outputs - stats.output_mean) / stats.output_std
    out = Trajectory(delta=tr.delta, times=tr.times, inputs=inputs, outputs=outputs)
    return out, stats


def denormalize(tr: Trajectory, stats: NormStats) -> Trajectory:
    inputs = tr.inputs * stats.input_std + stats.input_mean if tr.n_u else tr.inputs
    outputs = tr.outputs * stats.output_std + stats.output_mean
    return Trajectory(delta=tr.delta, times=tr.times, inputs=inputs, outputs=outputs)


def denormalize_outputs(y: np.ndarray, stats: NormStats) -> np.ndarray:
    return y * stats.output_std + stats.output_mean


def normalize_split(split: DatasetSplit):
    """Normalize all thirds with train-third statistics."""
    train, stats = normalize(split.train)
    dev, _ = normalize(split.dev, stats)
    test, _ = normalize(split.test, stats)
    return DatasetSplit(train=train, dev=dev, test=test), stats


def windows(tr: Trajectory, n_past: int, n_steps: int, stride: int = 1) -> list[Window]:
    """Enumerate training windows.

    Window ``i`` starts at source index ``k = n_past + i * stride``; its past
    rows are ``[k - n_past, k)`` and its future rows ``[k, k + n_steps)``.
    The count is ``floor((N - n_past - n_steps) / stride) + 1``.
    """
    if n_past < 1 or n_steps < 1 or stride < 1:
        raise ValueError(
            f"n_past, n_steps, stride must all be >= 1, got {(n_past, n_steps, stride)}"
        )
    n = tr.n_samples
    if n < n_past + n_steps:
        raise TooShortError(
            f"{n} samples cannot fit a window of n_past={n_past} + n_steps={n_steps}"
        )
    count = (n - n_past - n_steps) // stride + 1
    out = []
    for i in range(count):
        k = n_past + i * stride
        out.append(
            Window(
                start_index=k,
                past_outputs=tr.outputs[k - n_past : k],
                past_inputs=tr.inputs[k - n_past : k],
                future_inputs=tr.inputs[k : k + n_steps],
                future_outputs=tr.outputs[k : k + n_steps],
            )
        )
    return out
