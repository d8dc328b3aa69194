"""Linear state-space identification by subspace projection.

Implements the classical deterministic-stochastic subspace pipeline: block
Hankel matrices, an LQ factorization, an oblique projection of future outputs
onto past data along future inputs, then an SVD whose weighting selects the
method:

* ``n4sid``: unweighted SVD of the oblique projection,
* ``moesp``: SVD after projecting onto the orthogonal complement of the
  future-input row space,
* ``cva``: the same projection whitened by the future-output covariance, so
  singular values become canonical correlations.

All three deliver an extended observability matrix up to similarity; ``C`` is
its first block row, ``A`` follows from shift invariance, ``B`` and the
initial state from one linear least-squares fit of the input-output relation,
and the innovation gain ``K`` from the steady-state Riccati fixed point on
residual covariances.  The feedthrough term is structurally zero.

The predictor form used throughout is ``x_{k+1} = A x_k + B u_k + K (y_k - C
x_k)`` with output ``y_k = C x_k``; open-loop simulation drops the ``K`` term.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .exceptions import DivergenceError, TooShortError

METHODS = ("n4sid", "moesp", "cva")

RANK_RTOL = 1e-10  # singular values below s1 * this don't count as rank
ILL_COND_RTOL = 1e-12
STATE_NORM_LIMIT = 1e12

DARE_TOL = 1e-10
DARE_MAX_ITER = 10_000


@dataclass(frozen=True)
class SubspaceConfig:
    """Identification settings: method, requested state order, horizon.

    ``horizon`` sets the Hankel block-row depth for both past and future
    (an internal floor of 2 rows applies, since shift invariance needs two);
    the state order is clamped to what the data and horizon can support.
    """

    method: str = "n4sid"
    n_x: int = 10
    horizon: int = 10

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.n_x < 1:
            raise ValueError("n_x must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass(frozen=True)
class Lssm:
    """Identified linear model; arrays are fixed after construction.

    Storage is canonical C-order float64 so simulations are bit-reproducible
    regardless of how the matrices were produced (solver output, file).
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    K: np.ndarray
    singular_values: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "C", "K", "singular_values"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "C": self.C.tolist(),
            "K": self.K.tolist(),
            "singular_values": self.singular_values.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Lssm":
        return cls(
            A=np.asarray(d["A"], dtype=float),
            B=np.asarray(d["B"], dtype=float),
            C=np.asarray(d["C"], dtype=float),
            K=np.asarray(d["K"], dtype=float),
            singular_values=np.asarray(d.get("singular_values", []), dtype=float),
        )


def block_hankel(data: np.ndarray, n_block_rows: int) -> np.ndarray:
    """Stack ``n_block_rows`` shifted copies of a signal into block rows.

    ``data`` is (N, c); the result is (n_block_rows * c, N - n_block_rows + 1)
    whose column ``k`` is ``[data[k]; data[k+1]; ...; data[k+n_block_rows-1]]``.
    """
    data = np.asarray(data, dtype=float)
    n, c = data.shape
    j = n - n_block_rows + 1
    if j < 1:
        raise TooShortError(f"{n} samples cannot fill {n_block_rows} block rows")
    out = np.empty((n_block_rows * c, j))
    for i in range(n_block_rows):
        out[i * c : (i + 1) * c] = data[i : i + j].T
    return out


def _inv_sqrt_psd(M: np.ndarray):
    """(M^(-1/2), M^(1/2)) for a symmetric PSD matrix, floored eigenvalues."""
    w, V = np.linalg.eigh((M + M.T) / 2.0)
    floor = max(w.max(), 0.0) * 1e-14 + 1e-300
    w = np.maximum(w, floor)
    return (V * (w**-0.5)) @ V.T, (V * (w**0.5)) @ V.T


def identify(u: np.ndarray, y: np.ndarray, cfg: SubspaceConfig) -> Lssm:
    """Fit a linear state-space model to one input/output record.

    Parameters
    ----------
    u : ndarray, shape (N, n_u)
        Inputs; zero columns for autonomous data.
    y : ndarray, shape (N, n_y)
        Outputs.
    cfg : SubspaceConfig

    Returns
    -------
    Lssm
        With ``n_x`` possibly reduced below ``cfg.n_x`` (a warning reports
        the reduction) when the horizon or the numerical rank cannot support
        the requested order.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n = y.shape[0]
    m, l = u.shape[1], y.shape[1]
    if u.shape[0] != n:
        raise ValueError("u and y must have the same number of rows")
    f = max(cfg.horizon, 2)
    if n < 2 * (f + f):
        raise TooShortError(f"need at least {4 * f} samples for horizon {cfg.horizon}, got {n}")

    i = f
    j = n - 2 * i + 1
    scale = 1.0 / np.sqrt(j)
    Yh = block_hankel(y, 2 * i) * scale
    Yp, Yf = Yh[: l * i], Yh[l * i :]
    if m:
        Uh = block_hankel(u, 2 * i) * scale
        Up, Uf = Uh[: m * i], Uh[m * i :]
        Z = np.vstack([Uf, Up, Yp, Yf])
        a = m * i
    else:
        Z = np.vstack([Yp, Yf])
        a = 0
    b = (m + l) * i  # rows of Wp = [Up; Yp]

    # LQ: Z = L Q with L lower block-triangular, Q row-orthonormal
    Q, R = sla.qr(Z.T, mode="economic")
    L = R.T
    L22 = L[a : a + b, a : a + b]
    L32 = L[a + b :, a : a + b]
    L33 = L[a + b :, a + b :]

    if cfg.method == "n4sid":
        # oblique projection of Yf onto Wp along Uf, in Q-coordinates
        M = L32 @ sla.pinv(L22) @ L[a : a + b, : a + b]
        W1_inv = None
    elif cfg.method == "moesp":
        M = L32
        W1_inv = None
    else:  # cva
        G = np.hstack([L32, L33])
        W1, W1_inv = _inv_sqrt_psd(G @ G.T)
        M = W1 @ L32

    U, s, _ = np.linalg.svd(M, full_matrices=False)
    available = int(np.sum(s > s[0] * RANK_RTOL)) if s.size and s[0] > 0 else 0
    max_order = (f - 1) * l
    n_x = min(cfg.n_x, available, max_order)
    if n_x < 1:
        raise ValueError(
            f"data supports no dynamic state (rank {available}, horizon cap {max_order})"
        )
    if n_x < cfg.n_x:
        warnings.warn(
            f"state order reduced from {cfg.n_x} to {n_x} "
            f"(numerical rank {available}, horizon cap {max_order})",
            stacklevel=2,
        )
    elif s[n_x - 1] < s[0] * ILL_COND_RTOL:
        warnings.warn(
            f"identification ill-conditioned: sigma_{n_x}/sigma_1 = {s[n_x - 1] / s[0]:.2e}",
            stacklevel=2,
        )

    gamma = U[:, :n_x] * np.sqrt(s[:n_x])
    if W1_inv is not None:
        gamma = W1_inv @ gamma
    C = gamma[:l].copy()
    # shift invariance: gamma with the last block row dropped, advanced by A,
    # equals gamma with the first block row dropped
    A = np.asarray(sla.lstsq(gamma[:-l], gamma[l:])[0])

    B, x0 = _fit_input_map(A, C, u, y)
    K = _innovation_gain(A, B, C, u, y, f)
    return Lssm(A=A, B=B, C=C, K=K, singular_values=s[:n_x].copy())


def _fit_input_map(A, C, u, y):
    """B and the initial state by least squares on the simulated response.

    ``y_k = C A^k x0 + C S_k vec(B)`` where the sensitivity ``S_k`` of the
    state w.r.t. the (column-stacked) entries of B obeys
    ``S_{k+1} = A S_k + u_k[q] I`` per column block q.  Linear in (x0, B),
    exact for noiseless linear data.
    """
    n = y.shape[0]
    n_x = A.shape[0]
    m, l = u.shape[1], y.shape[1]
    Zk = C.copy()  # C A^k
    S = np.zeros((n_x, m * n_x))  # state sensitivity to vec_F(B)
    diag_idx = np.arange(n_x)
    rows = np.empty((n, l, n_x + n_x * m))
    ok = n
    for k in range(n):
        rows[k, :, :n_x] = Zk
        if m:
            rows[k, :, n_x:] = C @ S
            Snew = A @ S
            for q in range(m):
                Snew[diag_idx, q * n_x + diag_idx] += u[k, q]
            S = Snew
        Zk = Zk @ A
        if not np.all(np.isfinite(Zk)) or np.abs(Zk).max() > 1e10:
            ok = k + 1  # unstable A: fit on the finite prefix only
            break
    design = rows[:ok].reshape(ok * l, -1)
    target = y[:ok].reshape(ok * l)
    theta = sla.lstsq(design, target)[0]
    x0 = theta[:n_x]
    B = theta[n_x:].reshape(m, n_x).T if m else np.zeros((n_x, 0))
    return B, x0


def _innovation_gain(A, B, C, u, y, f):
    """Steady-state Kalman gain from reconstructed-state residuals.

    Each state is read off the data by inverting the stacked observability
    relation ``Yf_k - H Uf_k = Gamma x_k`` over an f-deep window (H is the
    causal Toeplitz map of impulse-response blocks, zero diagonal since there
    is no feedthrough).  One-step residuals of that sequence estimate the
    joint process/measurement covariances; the Riccati fixed point on them
    gives the gain.  Noise-free data leaves near-zero residuals and K ~ 0.
    """
    n = y.shape[0]
    n_x = A.shape[0]
    m, l = u.shape[1], y.shape[1]
    n_pairs = n - f
    if n_pairs < 2:
        return np.zeros((n_x, l))
    gamma = np.empty((f * l, n_x))
    Zk = C.copy()
    for r in range(f):
        gamma[r * l : (r + 1) * l] = Zk
        Zk = Zk @ A
    if not np.all(np.isfinite(gamma)):
        return np.zeros((n_x, l))
    rhs = block_hankel(y, f)
    if m:
        H = np.zeros((f * l, f * m))
        for d in range(f - 1):
            Md = gamma[d * l : (d + 1) * l] @ B  # C A^d B
            for c in range(f - d - 1):
                r = c + d + 1
                H[r * l : (r + 1) * l, c * m : (c + 1) * m] = Md
        rhs = rhs - H @ block_hankel(u, f)
    X = sla.lstsq(gamma, rhs)[0]  # column k is the state estimate at time k
    W = X[:, 1:] - A @ X[:, :-1]
    if m:
        W = W - B @ u[: X.shape[1] - 1].T
    V = y[: X.shape[1]].T - C @ X
    W, V = W[:, :n_pairs], V[:, :n_pairs]
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(V))):
        return np.zeros((n_x, l))
    Qc = (W @ W.T) / n_pairs
    Rc = (V @ V.T) / n_pairs
    Sc = (W @ V.T) / n_pairs
    _, K = solve_dare_fixed_point(A, C, Qc, Rc, Sc)
    return K


def solve_dare_fixed_point(A, C, Q, R, S, tol=DARE_TOL, max_iter=DARE_MAX_ITER):
    """Iterate the predictor Riccati recursion to its fixed point.

    ``P <- A P A' + Q - (A P C' + S) (C P C' + R)^-1 (A P C' + S)'`` starting
    from ``P = Q``; returns ``(P, K)`` with ``K = (A P C' + S)(C P C' + R)^-1``.
    A tiny ridge keeps the innovation covariance invertible when residuals
    vanish (noise-free data), which drives K to zero as it should.
    """
    l = C.shape[0]
    ridge = (np.trace(R) / l) * 1e-9 + 1e-12
    P = np.array(Q, dtype=float)
    for _ in range(max_iter):
        G = A @ P @ C.T + S
        F = C @ P @ C.T + R + ridge * np.eye(l)
        Knew = np.linalg.solve(F.T, G.T).T
        Pnew = A @ P @ A.T + Q - Knew @ G.T
        Pnew = (Pnew + Pnew.T) / 2.0
        if np.max(np.abs(Pnew - P)) < tol:
            return Pnew, Knew
        P = Pnew
    return P, Knew


def lssm_simulate(
    model: Lssm,
    x0: np.ndarray,
    u: np.ndarray,
    y: np.ndarray | None = None,
    mode: str = "open_loop",
) -> np.ndarray:
    """Roll the linear model forward and return predicted outputs.

    ``u`` is (N, n_u) and sets the horizon (zero columns for autonomous
    models); row k of the result is ``C x_k`` with ``x_0 = x0``.  In
    ``innovation`` mode the measured ``y`` feeds the predictor correction
    ``K (y_k - C x_k)``.
    """
    if mode not in ("open_loop", "innovation"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "innovation" and y is None:
        raise ValueError("innovation mode needs the measured outputs")
    u = np.asarray(u, dtype=float)
    n = u.shape[0]
    x = np.asarray(x0, dtype=float).copy()
    out = np.empty((n, model.n_y))
    for k in range(n):
        y_hat = model.C @ x
        out[k] = y_hat
        if k == n - 1:
            break
        x = model.A @ x
        if model.n_u:
            x = x + model.B @ u[k]
        if mode == "innovation":
            x = x + model.K @ (y[k] - y_hat)
        if not np.all(np.isfinite(x)) or np.abs(x).max() > STATE_NORM_LIMIT:
            raise DivergenceError(f"state norm exceeded {STATE_NORM_LIMIT:g} at step {k + 1}")
    return out


def estimate_x0(model: Lssm, u_lead: np.ndarray, y_lead: np.ndarray) -> np.ndarray:
    """Initial state by least squares against a leading window.

    Needs at least ``n_x`` rows.  Subtracts the input-forced response, then
    fits ``y_k - forced_k = C A^k x0``.
    """
    u_lead = np.asarray(u_lead, dtype=float)
    y_lead = np.asarray(y_lead, dtype=float)
    L = y_lead.shape[0]
    if L < model.n_x:
        raise TooShortError(f"need at least n_x={model.n_x} rows to estimate x0, got {L}")
    forced = lssm_simulate(model, np.zeros(model.n_x), u_lead)
    obs = np.empty((L, model.n_y, model.n_x))
    Zk = model.C.copy()
    for k in range(L):
        obs[k] = Zk
        Zk = Zk @ model.A
    design = obs.reshape(L * model.n_y, model.n_x)
    target = (y_lead - forced).reshape(L * model.n_y)
    return sla.lstsq(design, target)[0]


def markov_parameters(model: Lssm, count: int) -> np.ndarray:
    """Impulse-response matrices ``C A^k B`` for k = 0..count-1.

    Invariant under state-basis changes, so different identification methods
    can be compared through them.
    """
    out = np.empty((count, model.n_y, model.n_u))
    Ak = np.eye(model.n_x)
    for k in range(count):
        out[k] = model.C @ Ak @ model.B
        Ak = model.A @ Ak
    return out
