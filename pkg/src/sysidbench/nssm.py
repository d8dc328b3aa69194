"""Discrete-time block state-space model with neural components.

State update is additive in two blocks, ``x_{t+1} = f_x(x_t) + f_u(u_t)``;
the initial state comes from an encoder reading the flattened last ``n_past``
measured outputs, and the output map is strictly linear.  Blocks are either
plain matrices or small MLPs.  With ``linear_map_kind="soft_svd"`` every
matrix-valued map is stored in factored form ``U diag(sigma) V`` with the
singular values squashed into a fixed band by a sigmoid and the factors
pulled toward orthogonality by a penalty added to the training loss; this
bounds the gain of the state transition, which is the point of the scheme.

Training minimizes the open-loop N-step output error over sliding windows,
optionally plus a state-smoothing term and per-channel output-bound
penalties, with decoupled weight decay.  All gradients are hand reverse-mode,
matching the rest of the package.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    DivergenceError,
    NonFiniteGradientError,
    TrainingDivergedError,
)
from .nets import AdamW, DenseNet, copy_params
from .trajectory import DatasetSplit, windows

BLOCK_KINDS = ("linear", "mlp")
LINEAR_MAP_KINDS = ("plain", "soft_svd")

SIGMA_MIN = 0.1
SIGMA_MAX = 1.0
SVD_PENALTY_WEIGHT = 1.0
STATE_LIMIT = 1e12


class LinearMap:
    """Plain matrix map without bias."""

    def __init__(self, d_out: int, d_in: int, rng: np.random.Generator):
        limit = np.sqrt(6.0 / (d_in + d_out))
        self.W = rng.uniform(-limit, limit, size=(d_out, d_in))

    def parameters(self):
        return [self.W]

    def forward(self, x):
        return x @ self.W.T, x

    def backward(self, tape, upstream):
        x2 = np.atleast_2d(tape)
        up2 = np.atleast_2d(upstream)
        return [up2.T @ x2], upstream @ self.W

    def matrix(self):
        return self.W


class SoftSvdMap:
    """Matrix map stored as ``U diag(sigma) V`` with banded singular values.

    ``sigma = SIGMA_MIN + (SIGMA_MAX - SIGMA_MIN) * sigmoid(s)`` keeps every
    singular value inside the band by construction; orthogonality of U and V
    is only encouraged, through :func:`soft_svd_penalty` added to the loss.
    Factors initialize orthonormal (QR of a random matrix) with s = 0.
    """

    def __init__(self, d_out: int, d_in: int, rng: np.random.Generator):
        r = min(d_out, d_in)
        self.U = np.ascontiguousarray(np.linalg.qr(rng.standard_normal((d_out, r)))[0])
        self.V = np.ascontiguousarray(np.linalg.qr(rng.standard_normal((d_in, r)))[0].T)
        self.s = np.zeros(r)

    def parameters(self):
        return [self.U, self.s, self.V]

    def sigma(self):
        return SIGMA_MIN + (SIGMA_MAX - SIGMA_MIN) / (1.0 + np.exp(-self.s))

    def forward(self, x):
        h1 = x @ self.V.T
        h2 = h1 * self.sigma()
        return h2 @ self.U.T, (x, h1, h2)

    def backward(self, tape, upstream):
        x, h1, h2 = tape
        sig = self.sigma()
        up2, h2_2 = np.atleast_2d(upstream), np.atleast_2d(h2)
        dU = up2.T @ h2_2
        dh2 = upstream @ self.U
        dsig = np.atleast_2d(h1 * dh2).sum(axis=0)
        # dsigma/ds for sigma = min + range*sigmoid(s), written in terms of sigma
        ds = dsig * (sig - SIGMA_MIN) * (1.0 - (sig - SIGMA_MIN) / (SIGMA_MAX - SIGMA_MIN))
        dh1 = dh2 * sig
        dV = np.atleast_2d(dh1).T @ np.atleast_2d(x)
        dx = dh1 @ self.V
        return [dU, ds, dV], dx

    def matrix(self):
        return (self.U * self.sigma()) @ self.V

    def penalty(self):
        r = self.s.size
        ru = self.U.T @ self.U - np.eye(r)
        rv = self.V @ self.V.T - np.eye(r)
        return float(np.sum(ru**2) + np.sum(rv**2))

    def penalty_grads(self):
        r = self.s.size
        ru = self.U.T @ self.U - np.eye(r)
        rv = self.V @ self.V.T - np.eye(r)
        return [4.0 * self.U @ ru, np.zeros_like(self.s), 4.0 * rv @ self.V]


class MlpBlock:
    """One-hidden-layer network block."""

    def __init__(self, d_out: int, d_in: int, hidden: int, rng: np.random.Generator):
        self.net = DenseNet([d_in, hidden, d_out], "tanh", rng=rng)

    def parameters(self):
        return self.net.parameters()

    def forward(self, x):
        return self.net.forward(x)

    def backward(self, tape, upstream):
        return self.net.backward(tape, upstream)


def soft_svd_penalty(factors: SoftSvdMap) -> float:
    """Frobenius orthogonality residual of both factors."""
    return factors.penalty()


class NssmModel:
    """History encoder, additive transition blocks, linear decoder."""

    def __init__(
        self,
        n_y: int,
        n_u: int,
        latent_multiplier: int = 10,
        n_past: int = 1,
        block: str = "linear",
        linear_map_kind: str = "plain",
        hidden: int = 64,
        rng: np.random.Generator | None = None,
    ):
        if n_y < 1 or n_u < 0:
            raise ValueError("need n_y >= 1 and n_u >= 0")
        if latent_multiplier < 1:
            raise ValueError("latent_multiplier must be >= 1")
        if n_past < 1:
            raise ValueError("n_past must be >= 1")
        if block not in BLOCK_KINDS:
            raise ValueError(f"block must be one of {BLOCK_KINDS}")
        if linear_map_kind not in LINEAR_MAP_KINDS:
            raise ValueError(f"linear_map_kind must be one of {LINEAR_MAP_KINDS}")
        rng = np.random.default_rng() if rng is None else rng
        self.n_y = n_y
        self.n_u = n_u
        self.latent_multiplier = latent_multiplier
        self.n_past = n_past
        self.block = block
        self.linear_map_kind = linear_map_kind
        self.hidden = hidden
        self.n_x = latent_multiplier * n_y

        factored = linear_map_kind == "soft_svd"
        lin = SoftSvdMap if factored else LinearMap
        self.f_o = DenseNet([n_past * n_y, hidden, self.n_x], "tanh", rng=rng)
        if block == "linear":
            self.f_x = lin(self.n_x, self.n_x, rng)
            self.f_u = lin(self.n_x, n_u, rng) if n_u else None
        else:
            self.f_x = MlpBlock(self.n_x, self.n_x, hidden, rng)
            self.f_u = MlpBlock(self.n_x, n_u, hidden, rng) if n_u else None
        # the output map is always a linear matrix; it is the one map that
        # stays factorable regardless of the block kind
        self.f_y = lin(n_y, self.n_x, rng)

    def parameters(self) -> list[np.ndarray]:
        params = self.f_o.parameters() + self.f_x.parameters()
        if self.f_u is not None:
            params += self.f_u.parameters()
        return params + self.f_y.parameters()

    def factored_maps(self) -> list[SoftSvdMap]:
        maps = [m for m in (self.f_x, self.f_u, self.f_y) if isinstance(m, SoftSvdMap)]
        return maps

    def meta(self) -> dict:
        return {
            "n_y": self.n_y,
            "n_u": self.n_u,
            "latent_multiplier": self.latent_multiplier,
            "n_past": self.n_past,
            "block": self.block,
            "linear_map_kind": self.linear_map_kind,
            "hidden": self.hidden,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "NssmModel":
        return cls(**meta, rng=np.random.default_rng(0))

    def encode_history(self, past: np.ndarray) -> np.ndarray:
        """Initial state from the last ``n_past`` measured outputs."""
        past = np.asarray(past, dtype=float)
        if past.shape[-2:] != (self.n_past, self.n_y):
            raise ValueError(
                f"history must end with shape ({self.n_past}, {self.n_y}), got {past.shape}"
            )
        flat = past.reshape(*past.shape[:-2], self.n_past * self.n_y)
        return self.f_o.forward(flat)[0]

    def step(self, x: np.ndarray, u: np.ndarray | None = None) -> np.ndarray:
        """One state transition; the input term is omitted when absent."""
        out = self.f_x.forward(x)[0]
        if self.f_u is not None:
            if u is None:
                raise ValueError("model has inputs; step needs u")
            out = out + self.f_u.forward(u)[0]
        return out

    def decode(self, x: np.ndarray) -> np.ndarray:
        return self.f_y.forward(x)[0]


def n_parameters(model: NssmModel) -> int:
    return sum(p.size for p in model.parameters())


def rollout(model: NssmModel, past: np.ndarray, u_seq: np.ndarray) -> np.ndarray:
    """Open-loop prediction: encode history, then step and decode N times.

    ``u_seq`` has one row per predicted step: the input driving the
    transition into that step.  No measured output is read past the history.
    """
    u_seq = np.asarray(u_seq, dtype=float)
    n = u_seq.shape[0]
    x = model.encode_history(past)
    out = np.empty((n, model.n_y))
    for j in range(n):
        x = model.step(x, u_seq[j] if model.n_u else None)
        if not np.all(np.isfinite(x)) or np.abs(x).max() > STATE_LIMIT:
            raise DivergenceError(f"state diverged at rollout step {j + 1}")
        out[j] = model.decode(x)
    return out


def forecast(model: NssmModel, inputs: np.ndarray, past_outputs: np.ndarray) -> np.ndarray:
    """Full-horizon prediction aligned with the measurement grid.

    ``inputs`` covers all N samples; ``past_outputs`` is exactly the
    ``n_past``-row anchor.  Rows 0..n_past-1 of the result echo the anchor,
    the rest are open-loop rollout driven by the inputs from the anchor's
    last row onward.
    """
    inputs = np.asarray(inputs, dtype=float)
    past_outputs = np.asarray(past_outputs, dtype=float)
    n = inputs.shape[0]
    p = model.n_past
    if past_outputs.shape != (p, model.n_y):
        raise ValueError(f"anchor must be ({p}, {model.n_y}), got {past_outputs.shape}")
    if n <= p:
        raise ValueError(f"horizon {n} leaves nothing to predict past the {p}-row anchor")
    out = np.empty((n, model.n_y))
    out[:p] = past_outputs
    out[p:] = rollout(model, past_outputs, inputs[p - 1 : n - 1])
    return out


@dataclass(frozen=True)
class NssmTrainConfig:
    """Model shape and optimization settings for the discrete-time model.

    The history length always equals the rollout horizon ``n_steps``; the
    smoothing weight multiplies the mean squared one-step state difference.
    ``bounds_min``/``bounds_max`` (per output channel, in normalized units)
    switch on the output-bound penalty and default to off.
    """

    latent_multiplier: int = 10
    n_steps: int = 1
    block: str = "linear"
    linear_map_kind: str = "plain"
    hidden: int = 64
    lr: float = 0.003
    weight_decay: float = 0.01
    epochs: int = 5000
    smoothing_weight: float = 0.0
    bounds_min: tuple | None = None
    bounds_max: tuple | None = None
    dev_every: int = 1
    dev_horizon: int | None = None
    max_windows: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.smoothing_weight < 0:
            raise ValueError("smoothing_weight must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if (self.bounds_min is None) != (self.bounds_max is None):
            raise ValueError("set both output bounds or neither")
        if self.dev_every < 1:
            raise ValueError("dev_every must be >= 1")


def loss_and_grads(
    model: NssmModel,
    past: np.ndarray,
    u_seq: np.ndarray,
    refs: np.ndarray,
    smoothing_weight: float = 0.0,
    bounds: tuple[np.ndarray, np.ndarray] | None = None,
):
    """N-step training loss and its gradient over a window batch.

    ``past`` is (B, n_past, n_y), ``u_seq`` (B, n_steps, n_u) holds the input
    driving each predicted step, ``refs`` (B, n_steps, n_y) the targets.
    Returns ``(loss, grads)`` with grads aligned to ``model.parameters()``.
    The loss is the mean squared reference error plus the smoothing term,
    the factor-orthogonality penalty of any factored maps, and the output
    bound penalty when bounds are given.
    """
    B, n_steps = refs.shape[0], refs.shape[1]
    if past.shape != (B, model.n_past, model.n_y):
        raise ValueError(
            f"history batch must be ({B}, {model.n_past}, {model.n_y}), got {past.shape}"
        )
    flat = past.reshape(B, model.n_past * model.n_y)
    x0, enc_tape = model.f_o.forward(flat)

    states = [x0]
    tapes_x, tapes_u, tapes_y = [], [], []
    y_hat = np.empty((B, n_steps, model.n_y))
    for j in range(n_steps):
        fx, tx = model.f_x.forward(states[-1])
        tapes_x.append(tx)
        if model.f_u is not None:
            fu, tu = model.f_u.forward(u_seq[:, j])
            tapes_u.append(tu)
            x = fx + fu
        else:
            x = fx
        if not np.all(np.isfinite(x)) or np.abs(x).max() > STATE_LIMIT:
            raise DivergenceError(f"state diverged at rollout step {j + 1}")
        states.append(x)
        yj, ty = model.f_y.forward(x)
        tapes_y.append(ty)
        y_hat[:, j] = yj

    resid = y_hat - refs
    loss = float(np.mean(resid**2))
    dY = (2.0 / resid.size) * resid

    if bounds is not None:
        lo, hi = bounds
        over = np.maximum(y_hat - hi, 0.0)
        under = np.maximum(lo - y_hat, 0.0)
        loss += float(np.mean(over**2 + under**2))
        dY = dY + (2.0 * over - 2.0 * under) / y_hat.size

    dstates = [np.zeros((B, model.n_x)) for _ in range(n_steps + 1)]
    if smoothing_weight > 0.0:
        for j in range(n_steps):
            diff = states[j + 1] - states[j]
            loss += smoothing_weight * float(np.sum(diff**2)) / (B * n_steps)
            pull = (2.0 * smoothing_weight / (B * n_steps)) * diff
            dstates[j + 1] += pull
            dstates[j] -= pull

    grads = {id(p): np.zeros_like(p) for p in model.parameters()}

    def accumulate(module, gs):
        for p, g in zip(module.parameters(), gs):
            grads[id(p)] += g

    for j in range(n_steps):
        gy, dx = model.f_y.backward(tapes_y[j], dY[:, j])
        accumulate(model.f_y, gy)
        dstates[j + 1] += dx

    g = dstates[n_steps]
    for j in range(n_steps - 1, -1, -1):
        gx, dprev = model.f_x.backward(tapes_x[j], g)
        accumulate(model.f_x, gx)
        if model.f_u is not None:
            gu, _ = model.f_u.backward(tapes_u[j], g)
            accumulate(model.f_u, gu)
        g = dprev + dstates[j]

    go, _ = model.f_o.backward(enc_tape, g)
    accumulate(model.f_o, go)

    for fm in model.factored_maps():
        loss += SVD_PENALTY_WEIGHT * fm.penalty()
        accumulate(fm, [SVD_PENALTY_WEIGHT * pg for pg in fm.penalty_grads()])

    return loss, [grads[id(p)] for p in model.parameters()]


def nstep_loss(model: NssmModel, window, cfg: NssmTrainConfig) -> float:
    """Training loss of a single window (history rows, then future rows)."""
    past = window.past_outputs[None]
    u_seq = np.concatenate([window.past_inputs[-1:], window.future_inputs[:-1]])[None]
    refs = window.future_outputs[None]
    bounds = None
    if cfg.bounds_min is not None:
        bounds = (np.asarray(cfg.bounds_min, float), np.asarray(cfg.bounds_max, float))
    loss, _ = loss_and_grads(
        model, past, u_seq, refs, smoothing_weight=cfg.smoothing_weight, bounds=bounds
    )
    return loss


def _window_batch(train, cfg):
    from .node import subset_evenly

    wins = windows(train, n_past=cfg.n_steps, n_steps=cfg.n_steps, stride=1)
    idx = subset_evenly(len(wins), cfg.max_windows)
    past = np.stack([wins[i].past_outputs for i in idx])
    u_seq = np.stack(
        [
            np.concatenate([wins[i].past_inputs[-1:], wins[i].future_inputs[:-1]])
            for i in idx
        ]
    )
    refs = np.stack([wins[i].future_outputs for i in idx])
    return past, u_seq, refs


def _dev_mse(model, dev, horizon):
    """Open-loop forecast error on a dev prefix, normalized units."""
    n = dev.n_samples if horizon is None else min(horizon, dev.n_samples)
    p = model.n_past
    if n < p + 2:
        return None
    y_hat = forecast(model, dev.inputs[:n], dev.outputs[:p])
    return float(np.mean((y_hat[p:] - dev.outputs[p:n]) ** 2))


def train_nssm(split: DatasetSplit, cfg: NssmTrainConfig):
    """Fit the model on a normalized train/dev split.

    Full-batch decoupled-weight-decay optimization of the N-step loss with
    periodic dev forecasts; the dev-best parameters are restored at the end.
    Divergence before any successful dev evaluation raises
    TrainingDivergedError; afterwards it stops early on the best checkpoint.

    Returns (model, history).
    """
    train, dev = split.train, split.dev
    past, u_seq, refs = _window_batch(train, cfg)
    model = NssmModel(
        n_y=train.n_y,
        n_u=train.n_u,
        latent_multiplier=cfg.latent_multiplier,
        n_past=cfg.n_steps,
        block=cfg.block,
        linear_map_kind=cfg.linear_map_kind,
        hidden=cfg.hidden,
        rng=np.random.default_rng(cfg.seed),
    )
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    bounds = None
    if cfg.bounds_min is not None:
        bounds = (np.asarray(cfg.bounds_min, float), np.asarray(cfg.bounds_max, float))

    history = {
        "epoch": [],
        "train_loss": [],
        "dev_epoch": [],
        "dev_mse": [],
        "best_epoch": None,
        "best_dev_mse": None,
        "stopped_early": None,
        "train_seconds": 0.0,
        "n_windows": int(past.shape[0]),
    }
    best_params = None
    best_dev = np.inf
    t_start = time.perf_counter()

    for epoch in range(cfg.epochs):
        try:
            loss, grads = loss_and_grads(
                model, past, u_seq, refs,
                smoothing_weight=cfg.smoothing_weight, bounds=bounds,
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError("non-finite training loss", epoch=epoch)
            opt.step(params, grads)
        except (DivergenceError, NonFiniteGradientError, TrainingDivergedError) as exc:
            if best_params is None:
                raise TrainingDivergedError(str(exc), epoch=epoch) from exc
            history["stopped_early"] = f"epoch {epoch}: {exc}"
            break
        history["epoch"].append(epoch)
        history["train_loss"].append(loss)

        if (epoch + 1) % cfg.dev_every == 0 or epoch == cfg.epochs - 1:
            try:
                dev_mse = _dev_mse(model, dev, cfg.dev_horizon)
            except DivergenceError:
                dev_mse = np.inf
            if dev_mse is None:
                continue
            history["dev_epoch"].append(epoch)
            history["dev_mse"].append(dev_mse)
            if dev_mse < best_dev:
                best_dev = dev_mse
                best_params = copy_params(params)
                history["best_epoch"] = epoch
                history["best_dev_mse"] = dev_mse

    if best_params is not None:
        for p, saved in zip(params, best_params):
            p[...] = saved
    history["train_seconds"] = time.perf_counter() - t_start
    return model, history
