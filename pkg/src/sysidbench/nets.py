"""Dense feed-forward networks with exact reverse-mode gradients, plus Adam.

The networks are deliberately small and explicit: a list of ``(W, b)`` layers,
row-major batches, and a forward pass that returns the tape needed for an
exact backward pass.  This keeps vector-Jacobian products cheap for the
adjoint method, where the same backward pass must deliver both parameter
gradients and the gradient with respect to the network input.
"""

from __future__ import annotations

import numpy as np

from .exceptions import NonFiniteGradientError

ACTIVATIONS = ("tanh", "relu", "identity")


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_deriv(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if kind == "relu":
        return (z > 0.0).astype(z.dtype)
    return np.ones_like(z)


class DenseNet:
    """Fully connected net; hidden activation everywhere, identity output.

    Parameters
    ----------
    layer_sizes : sequence of int
        ``[d_in, h1, ..., d_out]``; at least input and output.
    activation : str
        Hidden activation, one of ``tanh`` / ``relu`` / ``identity``.
    rng : numpy Generator, optional
        Source for the init draw; required unless ``init="zeros"``.
    init : str
        ``"auto"`` picks Xavier-uniform for tanh/identity and He-uniform for
        relu; ``"zeros"`` leaves all parameters at zero.
    """

    def __init__(self, layer_sizes, activation="tanh", rng=None, init="auto"):
        layer_sizes = [int(s) for s in layer_sizes]
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if min(layer_sizes) < 1:
            raise ValueError(f"layer sizes must be >= 1, got {layer_sizes}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_sizes = layer_sizes
        self.activation = activation
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for d_in, d_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            if init == "zeros":
                W = np.zeros((d_out, d_in))
            else:
                if rng is None:
                    raise ValueError("rng is required for random init")
                if activation == "relu":
                    limit = np.sqrt(6.0 / d_in)
                else:
                    limit = np.sqrt(6.0 / (d_in + d_out))
                W = rng.uniform(-limit, limit, size=(d_out, d_in))
            self.weights.append(W)
            self.biases.append(np.zeros(d_out))

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[np.ndarray]:
        """Flat list [W0, b0, W1, b1, ...]; entries are the live arrays."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.append(W)
            out.append(b)
        return out

    def set_parameters(self, params) -> None:
        it = iter(params)
        for i in range(self.n_layers):
            self.weights[i] = np.asarray(next(it), dtype=float)
            self.biases[i] = np.asarray(next(it), dtype=float)

    def forward(self, x: np.ndarray):
        """Evaluate the net and keep the tape for ``backward``.

        ``x`` is ``(B, d_in)`` or ``(d_in,)``; the output matches.  The tape
        stores each layer's input and pre-activation.
        """
        squeeze = x.ndim == 1
        h = np.atleast_2d(np.asarray(x, dtype=float))
        tape = []
        last = self.n_layers - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W.T + b
            tape.append((h, z))
            h = z if i == last else _act(z, self.activation)
        return (h[0] if squeeze else h), tape

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, tape, upstream: np.ndarray):
        """Exact reverse pass.

        Parameters
        ----------
        tape : list
            As returned by ``forward`` for the same input.
        upstream : ndarray
            Gradient of the scalar loss w.r.t. the network output; same shape
            as the forward output.

        Returns
        -------
        grads : list of ndarray
            ``[dW0, db0, dW1, db1, ...]`` summed over the batch.
        input_grad : ndarray
            Gradient w.r.t. the network input, batch-shaped like the input.
        """
        squeeze = upstream.ndim == 1
        delta = np.atleast_2d(np.asarray(upstream, dtype=float))
        grads: list[np.ndarray] = [None] * (2 * self.n_layers)
        last = self.n_layers - 1
        for i in range(last, -1, -1):
            h_in, z = tape[i]
            if i != last:
                delta = delta * _act_deriv(z, self.activation)
            grads[2 * i] = delta.T @ h_in
            grads[2 * i + 1] = delta.sum(axis=0)
            delta = delta @ self.weights[i]
        return grads, (delta[0] if squeeze else delta)

    def vjp(self, x: np.ndarray, v: np.ndarray):
        """One-call vector-Jacobian product: returns (grads, input_grad)."""
        _, tape = self.forward(x)
        return self.backward(tape, v)

    def copy(self) -> "DenseNet":
        out = DenseNet(self.layer_sizes, self.activation, init="zeros")
        out.weights = [W.copy() for W in self.weights]
        out.biases = [b.copy() for b in self.biases]
        return out


def zeros_like_params(params) -> list[np.ndarray]:
    return [np.zeros_like(p) for p in params]


def copy_params(params) -> list[np.ndarray]:
    return [np.array(p, copy=True) for p in params]


def add_scaled(dst, src, alpha=1.0) -> None:
    """dst += alpha * src, entrywise over parameter lists, in place."""
    for d, s in zip(dst, src):
        d += alpha * s


def flatten_params(params) -> np.ndarray:
    return np.concatenate([np.asarray(p, dtype=float).ravel() for p in params])


def unflatten_like(vec: np.ndarray, template) -> list[np.ndarray]:
    out = []
    k = 0
    for p in template:
        n = p.size
        out.append(np.asarray(vec[k : k + n], dtype=float).reshape(p.shape))
        k += n
    return out


class Adam:
    """Adam with optional decoupled weight decay (AdamW).

    ``step`` updates the given parameter arrays in place.  With
    ``weight_decay > 0`` the decay is decoupled: parameters are first scaled
    by ``1 - lr * weight_decay`` and the Adam increment is applied afterwards.
    """

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = zeros_like_params(params)
        self.v = zeros_like_params(params)

    def step(self, params, grads) -> None:
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError("non-finite gradient; step rejected")
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def AdamW(params, lr, weight_decay=0.01, **kw) -> Adam:
    """Adam with decoupled weight decay enabled."""
    return Adam(params, lr, weight_decay=weight_decay, **kw)
