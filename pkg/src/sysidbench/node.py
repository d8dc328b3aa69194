"""Continuous-time latent forecaster trained as a neural ODE.

The model has three pieces: an encoder mapping the first measured output (and
input, when present) to a latent initial state, a learned vector field
integrated through the shared ODE solvers, and a strictly linear decoder with
no bias back to output space.  The field sees ``concat(x, x0, u)``: feeding
the encoded initial state alongside the current state lets the dynamics adapt
per trajectory, and the input enters as a zero-order hold over each sampling
interval.

Training is one-step-ahead on a batch of length-1 windows: encode the state
at a sample, integrate one sampling interval, penalize the squared output
error at both window rows, the decoded encoding at the start and the
integrated state at the end.  The start-row term is what makes long
forecasts possible: it pulls the encoder toward the decoder's right inverse
on the data, so the latent reached after a step lands where the next
window's encoding starts and the flow can be chained.  Every window is
conditioned on the same anchor, the encoded first sample of the training
record.  Anchoring per window would let the field satisfy the one-step loss
as a function of the anchor alone, which forecasts terribly; a shared anchor
forces the state input to carry the dynamics.  Gradients come either from
the continuous adjoint (a second ODE solve backward in time,
solver-agnostic, O(1) memory) or from exact reverse-mode differentiation
through the fixed-step solver stages.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .exceptions import (
    DivergenceError,
    NonConvergenceError,
    NonFiniteGradientError,
    TrainingDivergedError,
)
from .nets import (
    Adam,
    DenseNet,
    copy_params,
    flatten_params,
    unflatten_like,
)
from .solvers import SolverConfig, integrate, step_euler, step_rk4
from .trajectory import DatasetSplit, windows

GRADIENT_METHODS = ("adjoint", "backprop")


class NodeModel:
    """Encoder, latent vector field, linear decoder."""

    def __init__(
        self,
        n_y: int,
        n_u: int,
        latent_multiplier: int = 5,
        field_hidden: int = 64,
        encoder_hidden: int = 64,
        rng: np.random.Generator | None = None,
    ):
        if n_y < 1:
            raise ValueError("n_y must be >= 1")
        if n_u < 0:
            raise ValueError("n_u must be >= 0")
        if latent_multiplier < 1:
            raise ValueError("latent_multiplier must be >= 1")
        rng = np.random.default_rng() if rng is None else rng
        self.n_y = n_y
        self.n_u = n_u
        self.latent_multiplier = latent_multiplier
        self.field_hidden = field_hidden
        self.encoder_hidden = encoder_hidden
        self.n_x = latent_multiplier * n_y
        self.encoder = DenseNet([n_y + n_u, encoder_hidden, self.n_x], "tanh", rng=rng)
        self.field = DenseNet(
            [2 * self.n_x + n_u, field_hidden, self.n_x], "tanh", rng=rng
        )
        limit = math.sqrt(6.0 / (self.n_x + n_y))
        self.decoder = rng.uniform(-limit, limit, size=(n_y, self.n_x))

    def parameters(self) -> list[np.ndarray]:
        """Live arrays, decoder first; optimizers update them in place."""
        return [self.decoder] + self.encoder.parameters() + self.field.parameters()

    def meta(self) -> dict:
        return {
            "n_y": self.n_y,
            "n_u": self.n_u,
            "latent_multiplier": self.latent_multiplier,
            "field_hidden": self.field_hidden,
            "encoder_hidden": self.encoder_hidden,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "NodeModel":
        return cls(**meta, rng=np.random.default_rng(0))

    def encode(self, y0: np.ndarray, u0: np.ndarray):
        """Latent initial state from the first sample; returns (x0, tape)."""
        return self.encoder.forward(np.concatenate([y0, u0], axis=-1))

    def field_input(self, x: np.ndarray, x0: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.concatenate([x, x0, u], axis=-1)

    def decode(self, x: np.ndarray) -> np.ndarray:
        return x @ self.decoder.T


def n_parameters(model: NodeModel) -> int:
    return sum(p.size for p in model.parameters())


def forecast(
    model: NodeModel,
    times: np.ndarray,
    inputs: np.ndarray,
    y0: np.ndarray,
    solver: SolverConfig,
) -> np.ndarray:
    """Roll the model over a time grid from the first measured output.

    Row 0 is the decoder's reconstruction of the encoded state; each later
    row integrates one interval under the zero-order hold of the input at
    the interval's left endpoint.  Works in the model's (normalized) units.
    """
    n = len(times)
    u = np.asarray(inputs, dtype=float).reshape(n, model.n_u)
    x0, _ = model.encode(np.asarray(y0, dtype=float), u[0])
    out = np.empty((n, model.n_y))
    out[0] = model.decode(x0)
    x = x0
    for k in range(n - 1):
        u_k = u[k]

        def rhs(state, t):
            return model.field.forward(model.field_input(state, x0, u_k))[0]

        span = np.array([times[k], times[k + 1]], dtype=float)
        x = integrate(rhs, x, span, solver)[-1]
        out[k + 1] = model.decode(x)
    return out


def _one_step_forward(model, Ya, Ua, Y0, U0, delta, solver):
    """Encode anchors and a window batch, integrate one interval.

    ``(Ya, Ua)`` holds one anchor sample per window, the start of a
    trajectory containing it.  Returns (anchor_tape, Xa, X0, enc_tape, X1).
    """
    Xa, anchor_tape = model.encode(Ya, Ua)
    X0, enc_tape = model.encode(Y0, U0)

    def rhs(X, t):
        return model.field.forward(model.field_input(X, Xa, U0))[0]

    span = np.array([0.0, delta])
    X1 = integrate(rhs, X0, span, solver)[-1]
    return anchor_tape, Xa, X0, enc_tape, X1


def one_step_loss(model, Ya, Ua, Y0, U0, Y1, delta, solver) -> float:
    """Mean squared error over both rows of a window batch.

    The start row compares the decoded encoding to the measurement, the end
    row compares the integrated state to the next measurement.
    """
    _, _, X0, _, X1 = _one_step_forward(model, Ya, Ua, Y0, U0, delta, solver)
    resid0 = model.decode(X0) - Y0
    resid1 = model.decode(X1) - Y1
    return float((np.sum(resid0**2) + np.sum(resid1**2)) / (resid0.size + resid1.size))


def adjoint_gradients(model, Ya, Ua, Y0, U0, Y1, delta, solver):
    """Loss and gradients via the continuous adjoint method.

    The backward pass integrates, in reversed time, one flat augmented state
    holding the reconstructed trajectory, the output adjoint, the gradient
    flowing into the field's anchor input channel, and the field parameter
    gradient.  The encoder is applied twice (anchor batch, window batch) and
    collects gradient from both routes.  Gradient order matches
    ``model.parameters()``.
    """
    anchor_tape, Xa, X0, enc_tape, X1 = _one_step_forward(
        model, Ya, Ua, Y0, U0, delta, solver
    )
    B = X1.shape[0]
    n_x = model.n_x
    resid0 = model.decode(X0) - Y0
    resid1 = model.decode(X1) - Y1
    m_el = resid0.size + resid1.size
    loss = float((np.sum(resid0**2) + np.sum(resid1**2)) / m_el)
    dLdy0 = (2.0 / m_el) * resid0
    dLdy1 = (2.0 / m_el) * resid1

    dec_grad = dLdy1.T @ X1 + dLdy0.T @ X0
    a1 = dLdy1 @ model.decoder  # dL/dX1
    sz = B * n_x
    n_theta = sum(p.size for p in model.field.parameters())
    z1 = np.concatenate([X1.ravel(), a1.ravel(), np.zeros(sz), np.zeros(n_theta)])

    def rhs_reversed(z, s):
        X = z[:sz].reshape(B, n_x)
        adj = z[sz : 2 * sz].reshape(B, n_x)
        F, tape = model.field.forward(model.field_input(X, Xa, U0))
        grads, din = model.field.backward(tape, adj)
        return np.concatenate(
            [
                -F.ravel(),  # state runs backward
                din[:, :n_x].ravel(),  # adjoint picks up the field Jacobian
                din[:, n_x : 2 * n_x].ravel(),  # anchor input channel
                flatten_params(grads),
            ]
        )

    span = np.array([0.0, delta])
    z0 = integrate(rhs_reversed, z1, span, solver)[-1]
    a0 = z0[sz : 2 * sz].reshape(B, n_x)
    bar = z0[2 * sz : 3 * sz].reshape(B, n_x)
    theta_grad = z0[3 * sz :]

    enc_grads, _ = model.encoder.backward(enc_tape, a0 + dLdy0 @ model.decoder)
    anchor_grads, _ = model.encoder.backward(anchor_tape, bar)
    enc_total = [g + h for g, h in zip(enc_grads, anchor_grads)]
    field_grads = unflatten_like(theta_grad, model.field.parameters())
    return loss, [dec_grad] + enc_total + field_grads


def _fixed_substeps(delta: float, solver: SolverConfig):
    """Mirror the solver's fixed-step subdivision of one interval."""
    h_target = solver.h_init if solver.h_init is not None else delta / 100.0
    n_sub = max(1, math.ceil(delta / h_target - 1e-12))
    return n_sub, delta / n_sub


def backprop_gradients(model, Ya, Ua, Y0, U0, Y1, delta, solver):
    """Loss and gradients by exact reverse mode through solver stages.

    Only the fixed-step methods are supported: their computation graph is a
    fixed composition of field evaluations, so the reverse pass retraces the
    stored substep states and applies one vector-Jacobian product per stage.
    Matches the forward pass bit for bit.
    """
    if solver.method not in ("euler", "rk4"):
        raise ValueError("backprop gradients need a fixed-step solver (euler or rk4)")
    Xa, anchor_tape = model.encode(Ya, Ua)
    X0, enc_tape = model.encode(Y0, U0)
    n_x = model.n_x
    n_sub, h = _fixed_substeps(delta, solver)

    def rhs(X, t):
        return model.field.forward(model.field_input(X, Xa, U0))[0]

    states = [X0]
    step = step_euler if solver.method == "euler" else step_rk4
    for j in range(n_sub):
        states.append(step(rhs, states[-1], j * h, h))
    X1 = states[-1]

    resid0 = model.decode(X0) - Y0
    resid1 = model.decode(X1) - Y1
    m_el = resid0.size + resid1.size
    loss = float((np.sum(resid0**2) + np.sum(resid1**2)) / m_el)
    dLdy0 = (2.0 / m_el) * resid0
    dLdy1 = (2.0 / m_el) * resid1
    dec_grad = dLdy1.T @ X1 + dLdy0.T @ X0
    g = dLdy1 @ model.decoder  # running dL/d(substep state)

    theta_grad = [np.zeros_like(p) for p in model.field.parameters()]
    bar = np.zeros_like(g)  # gradient entering the field's anchor channel

    def stage_vjp(x_stage, upstream):
        """Accumulate parameter and anchor-channel grads; return the state grad."""
        _, tape = model.field.forward(model.field_input(x_stage, Xa, U0))
        grads, din = model.field.backward(tape, upstream)
        for acc, inc in zip(theta_grad, grads):
            acc += inc
        bar[...] += din[:, n_x : 2 * n_x]
        return din[:, :n_x]

    for j in range(n_sub - 1, -1, -1):
        x = states[j]
        if solver.method == "euler":
            g = g + stage_vjp(x, h * g)
        else:
            # recompute the stage points, then reverse the rk4 combination
            k1 = model.field.forward(model.field_input(x, Xa, U0))[0]
            x2 = x + 0.5 * h * k1
            k2 = model.field.forward(model.field_input(x2, Xa, U0))[0]
            x3 = x + 0.5 * h * k2
            k3 = model.field.forward(model.field_input(x3, Xa, U0))[0]
            x4 = x + h * k3
            gx4 = stage_vjp(x4, (h / 6.0) * g)
            gx3 = stage_vjp(x3, (h / 3.0) * g + h * gx4)
            gx2 = stage_vjp(x2, (h / 3.0) * g + 0.5 * h * gx3)
            gx1 = stage_vjp(x, (h / 6.0) * g + 0.5 * h * gx2)
            g = g + gx1 + gx2 + gx3 + gx4

    enc_grads, _ = model.encoder.backward(enc_tape, g + dLdy0 @ model.decoder)
    anchor_grads, _ = model.encoder.backward(anchor_tape, bar)
    enc_total = [ga + gb for ga, gb in zip(enc_grads, anchor_grads)]
    return loss, [dec_grad] + enc_total + theta_grad


@dataclass(frozen=True)
class NodeTrainConfig:
    """Model size and optimization settings for the continuous-time model."""

    latent_multiplier: int = 5
    field_hidden: int = 64
    encoder_hidden: int = 64
    lr: float = 0.01
    epochs: int = 2000
    gradient_method: str = "adjoint"
    solver: SolverConfig = dataclass_field(default_factory=SolverConfig)
    dev_every: int = 1
    dev_horizon: int | None = None
    max_windows: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.gradient_method not in GRADIENT_METHODS:
            raise ValueError(
                f"gradient_method must be one of {GRADIENT_METHODS}, got {self.gradient_method!r}"
            )
        if self.gradient_method == "backprop" and self.solver.method == "dopri5":
            raise ValueError("backprop gradients need a fixed-step solver (euler or rk4)")
        if self.dev_every < 1:
            raise ValueError("dev_every must be >= 1")
        if self.max_windows is not None and self.max_windows < 1:
            raise ValueError("max_windows must be >= 1 when set")


def subset_evenly(n: int, cap: int | None) -> np.ndarray:
    """Deterministic near-uniform index subset of range(n), at most cap long."""
    if cap is None or n <= cap:
        return np.arange(n)
    return np.unique(np.round(np.linspace(0, n - 1, cap)).astype(int))


def _window_batch(train, cap):
    """Window batch plus each window's start-sample index."""
    wins = windows(train, n_past=1, n_steps=1, stride=1)
    idx = subset_evenly(len(wins), cap)
    Y0 = np.stack([wins[i].past_outputs[-1] for i in idx])
    U0 = np.stack([wins[i].past_inputs[-1] for i in idx])
    Y1 = np.stack([wins[i].future_outputs[0] for i in idx])
    return idx, Y0, U0, Y1


def _assign_anchors(idx: np.ndarray, n_samples: int, rng: np.random.Generator):
    """Anchor sample position for each window, fixed for the whole fit.

    Every suffix of the record is itself a trajectory, so a window may be
    conditioned on the encoding of any earlier sample.  Spreading anchors
    over the record shows the field many anchor values at many lags;
    anchoring everything on the record head would leave forecasts from other
    start states (the dev and test segments) off-distribution in the anchor
    channel, and anchoring each window on itself would let the anchor alone
    explain the one-step targets.
    """
    spots = np.array(
        sorted({int(round(f * (n_samples - 2))) for f in np.linspace(0.0, 0.9, 10)})
    )
    n_ok = np.searchsorted(spots, idx, side="right")
    pick = rng.integers(0, np.maximum(n_ok, 1))
    return np.where(n_ok > 0, spots[np.minimum(pick, len(spots) - 1)], 0)


def _dev_mse(model, dev, horizon, solver):
    """Forecast error on a prefix of the dev segment, in normalized units."""
    n = dev.n_samples if horizon is None else min(horizon, dev.n_samples)
    if n < 2:
        return None
    y_hat = forecast(model, dev.times[:n], dev.inputs[:n], dev.outputs[0], solver)
    return float(np.mean((y_hat[1:] - dev.outputs[1:n]) ** 2))


def train_node(split: DatasetSplit, cfg: NodeTrainConfig):
    """Fit the model on a normalized train/dev split.

    Full-batch optimization of the one-step loss with periodic dev forecasts;
    the parameters that score best on dev are restored at the end.  Raises
    TrainingDivergedError if the optimization breaks down before any dev
    evaluation succeeds; after that point a breakdown just stops early on the
    best checkpoint.

    Returns (model, history).
    """
    train, dev = split.train, split.dev
    idx, Y0, U0, Y1 = _window_batch(train, cfg.max_windows)
    rng = np.random.default_rng(cfg.seed)
    anchor_idx = _assign_anchors(idx, train.n_samples, rng)
    Ya, Ua = train.outputs[anchor_idx], train.inputs[anchor_idx]
    model = NodeModel(
        n_y=train.n_y,
        n_u=train.n_u,
        latent_multiplier=cfg.latent_multiplier,
        field_hidden=cfg.field_hidden,
        encoder_hidden=cfg.encoder_hidden,
        rng=np.random.default_rng(cfg.seed),
    )
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    grad_fn = adjoint_gradients if cfg.gradient_method == "adjoint" else backprop_gradients
    delta = train.delta

    history = {
        "epoch": [],
        "train_loss": [],
        "dev_epoch": [],
        "dev_mse": [],
        "best_epoch": None,
        "best_dev_mse": None,
        "stopped_early": None,
        "train_seconds": 0.0,
        "n_windows": int(Y0.shape[0]),
    }
    best_params = None
    best_dev = np.inf
    t_start = time.perf_counter()

    for epoch in range(cfg.epochs):
        j = anchors[epoch % len(anchors)]
        act = idx >= j
        try:
            loss, grads = grad_fn(
                model,
                train.outputs[j],
                train.inputs[j],
                Y0[act],
                U0[act],
                Y1[act],
                delta,
                cfg.solver,
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError("non-finite training loss", epoch=epoch)
            opt.step(params, grads)
        except (
            DivergenceError,
            NonConvergenceError,
            NonFiniteGradientError,
            TrainingDivergedError,
        ) as exc:
            if best_params is None:
                raise TrainingDivergedError(str(exc), epoch=epoch) from exc
            history["stopped_early"] = f"epoch {epoch}: {exc}"
            break
        history["epoch"].append(epoch)
        history["train_loss"].append(loss)

        if (epoch + 1) % cfg.dev_every == 0 or epoch == cfg.epochs - 1:
            try:
                dev_mse = _dev_mse(model, dev, cfg.dev_horizon, cfg.solver)
            except (DivergenceError, NonConvergenceError):
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
