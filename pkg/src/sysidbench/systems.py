"""Built-in dynamical-system emulators and trajectory generation.

Seven systems cover the benchmark: an exothermic stirred-tank reactor, a
double pendulum, a planar vehicle, two tank cascades, an ideal pendulum and a
linear oscillator.  Each is defined by a smooth right-hand side ``rhs(x, u, t)``
on a small physical state, an output map ``observe(x)``, and default initial
condition / sampling interval / excitation.  Constants live in ``params`` and
are documented per builder below; they are ordinary textbook parameter sets,
tuned only so the default excitation produces well-scaled, persistently
informative trajectories.

Generation integrates the rhs with fixed-step RK4 sub-stepping (default 20
substeps per sample, at least 10) under zero-order-hold inputs, so the sampled
record is solver-accurate well below the noise floor of any later modeling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .solvers import SolverConfig, integrate
from .trajectory import Trajectory

GRAVITY = 9.81


@dataclass(frozen=True)
class InputPolicy:
    """Piecewise-constant random step excitation.

    ``kind`` is ``"prbs_steps"`` (uniform draws per hold block) or ``"none"``
    (hold every channel at the midpoint of its range).  Values are drawn
    independently per channel in ``[low_i, high_i]`` and held for
    ``hold_steps`` samples.  ``seed`` overrides the generator seed for the
    input draw when set.
    """

    kind: str = "prbs_steps"
    hold_steps: int = 50
    low: tuple = ()
    high: tuple = ()
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("prbs_steps", "none"):
            raise ValueError(f"unknown input policy kind {self.kind!r}")
        if self.hold_steps < 1:
            raise ValueError("hold_steps must be >= 1")
        if len(self.low) != len(self.high):
            raise ValueError("low/high must have equal lengths")
        if any(lo > hi for lo, hi in zip(self.low, self.high)):
            raise ValueError("low must not exceed high")


@dataclass(frozen=True)
class SystemSpec:
    """One emulated system: dimensions, constants, dynamics, defaults."""

    name: str
    n_states: int
    n_u: int
    n_y: int
    params: dict
    rhs: Callable
    observe: Callable
    x0_default: np.ndarray
    delta_default: float
    input_policy: InputPolicy = field(default_factory=lambda: InputPolicy(kind="none"))
    # substeps per sampling interval needed for solver error well under 1e-6;
    # systems with fast relaxation spikes need more than the global default
    substeps_default: int = 20


def _pos(v):
    """Flow terms use sqrt of a level clamped at zero, so draining a tank can
    never produce a complex number or push the level negative-feedback-free."""
    return math.sqrt(max(v, 0.0))


# ---------------------------------------------------------------------------
# builders


def _cstr() -> SystemSpec:
    """Exothermic continuous stirred-tank reactor (A -> B).

    States: reactant concentration Ca [mol/L] and reactor temperature T [K];
    input: coolant temperature Tc [K].  Classic parameter set (flow q=100
    L/min, volume V=100 L, rho*Cp=239 J/(L K), dH=-5e4 J/mol, E/R=8750 K,
    k0=7.2e10 1/min, UA=5e4 J/(min K), feed Caf=1 mol/L at Ti=350 K).  The
    default state sits on the quiet low-conversion branch (Ca=0.8785,
    T=324.48 at Tc=300; re-derivable by root-solving the rhs) and the coolant
    range [297, 305] straddles the oscillatory regime: near Tc=305 the
    reactor breaks into sustained relaxation oscillations, so step inputs
    excite strongly nonlinear responses.  Time unit: minutes.
    """
    p = dict(
        q=100.0,
        V=100.0,
        rho=1000.0,
        Cp=0.239,
        dH=-5.0e4,
        E_over_R=8750.0,
        k0=7.2e10,
        UA=5.0e4,
        Ti=350.0,
        Caf=1.0,
    )

    def rhs(x, u, t, p=p):
        ca, T = x
        Tc = u[0]
        rate = p["k0"] * math.exp(-p["E_over_R"] / T) * max(ca, 0.0)
        qV = p["q"] / p["V"]
        dca = qV * (p["Caf"] - ca) - rate
        dT = (
            qV * (p["Ti"] - T)
            + (-p["dH"] / (p["rho"] * p["Cp"])) * rate
            + p["UA"] / (p["V"] * p["rho"] * p["Cp"]) * (Tc - T)
        )
        return np.array([dca, dT])

    return SystemSpec(
        name="cstr",
        n_states=2,
        n_u=1,
        n_y=2,
        params=p,
        rhs=rhs,
        observe=lambda x: np.array([x[0], x[1]]),
        x0_default=np.array([0.8785, 324.48]),
        delta_default=0.1,
        input_policy=InputPolicy(kind="prbs_steps", hold_steps=100, low=(297.0,), high=(305.0,)),
        substeps_default=160,
    )


def _double_pendulum() -> SystemSpec:
    """Planar double pendulum, equal unit masses and unit links, frictionless.

    States: angles th1, th2 (from vertical) and angular rates w1, w2.  The
    default release from (pi/2, pi/2) is energetic enough to be chaotic.
    Autonomous; all four states are observed.
    """
    p = dict(m1=1.0, m2=1.0, l1=1.0, l2=1.0, g=GRAVITY)

    def rhs(x, u, t, p=p):
        th1, th2, w1, w2 = x
        m1, m2, l1, l2, g = p["m1"], p["m2"], p["l1"], p["l2"], p["g"]
        d = th1 - th2
        cd, sd = math.cos(d), math.sin(d)
        den = 2.0 * m1 + m2 - m2 * math.cos(2.0 * d)
        dw1 = (
            -g * (2.0 * m1 + m2) * math.sin(th1)
            - m2 * g * math.sin(th1 - 2.0 * th2)
            - 2.0 * sd * m2 * (w2 * w2 * l2 + w1 * w1 * l1 * cd)
        ) / (l1 * den)
        dw2 = (
            2.0
            * sd
            * (
                w1 * w1 * l1 * (m1 + m2)
                + g * (m1 + m2) * math.cos(th1)
                + w2 * w2 * l2 * m2 * cd
            )
        ) / (l2 * den)
        return np.array([w1, w2, dw1, dw2])

    return SystemSpec(
        name="double_pendulum",
        n_states=4,
        n_u=0,
        n_y=4,
        params=p,
        rhs=rhs,
        observe=lambda x: np.asarray(x, dtype=float).copy(),
        x0_default=np.array([math.pi / 2, math.pi / 2, 0.0, 0.0]),
        delta_default=0.01,
        input_policy=InputPolicy(kind="none"),
    )


def double_pendulum_energy(x, params) -> float:
    """Total mechanical energy of the double pendulum (potential zero at pivot)."""
    th1, th2, w1, w2 = x
    m1, m2, l1, l2, g = (params[k] for k in ("m1", "m2", "l1", "l2", "g"))
    pot = -(m1 + m2) * g * l1 * math.cos(th1) - m2 * g * l2 * math.cos(th2)
    kin = (
        0.5 * (m1 + m2) * l1 * l1 * w1 * w1
        + 0.5 * m2 * l2 * l2 * w2 * w2
        + m2 * l1 * l2 * w1 * w2 * math.cos(th1 - th2)
    )
    return pot + kin


def _vehicle() -> SystemSpec:
    """Planar rigid-body vehicle with saturating tire forces.

    States: longitudinal speed vx [m/s], lateral speed vy [m/s], yaw rate r
    [rad/s].  Inputs: longitudinal slip at each wheel (fl, fr, rl, rr) and the
    steering angle [rad].  Longitudinal tire force saturates as
    Fmax*tanh(k_slip*s); axle lateral forces saturate in the slip angle.
    Quadratic drag balances the slightly thrust-biased slip excitation around
    ~15 m/s, so speed is mean-reverting.  Outputs: (r, vx, vy).
    """
    p = dict(
        m=1500.0,
        Iz=2250.0,
        lf=1.2,
        lr=1.4,
        track=1.6,
        F_long_max=3310.0,  # ~mu*m*g/4 with mu=0.9
        k_slip=20.0,
        C_alpha=80000.0,  # per-axle cornering stiffness, N/rad
        F_lat_max=6620.0,  # per-axle lateral saturation
        c_drag=20.0,
        vx_floor=1.0,
    )

    def rhs(x, u, t, p=p):
        vx, vy, r = x
        s_fl, s_fr, s_rl, s_rr, delta = u
        vx_safe = max(vx, p["vx_floor"])
        Fm, ks = p["F_long_max"], p["k_slip"]
        F_fl = Fm * math.tanh(ks * s_fl)
        F_fr = Fm * math.tanh(ks * s_fr)
        F_rl = Fm * math.tanh(ks * s_rl)
        F_rr = Fm * math.tanh(ks * s_rr)
        alpha_f = delta - math.atan((vy + p["lf"] * r) / vx_safe)
        alpha_r = -math.atan((vy - p["lr"] * r) / vx_safe)
        Fl = p["F_lat_max"]
        F_yf = Fl * math.tanh(p["C_alpha"] * alpha_f / Fl)
        F_yr = Fl * math.tanh(p["C_alpha"] * alpha_r / Fl)
        cos_d, sin_d = math.cos(delta), math.sin(delta)
        F_front = F_fl + F_fr
        drag = p["c_drag"] * vx * abs(vx)
        dvx = (F_front * cos_d - F_yf * sin_d + F_rl + F_rr - drag) / p["m"] + r * vy
        dvy = (F_front * sin_d + F_yf * cos_d + F_yr) / p["m"] - r * vx
        dr = (
            p["lf"] * (F_yf * cos_d + F_front * sin_d)
            - p["lr"] * F_yr
            + 0.5 * p["track"] * ((F_fr - F_fl) * cos_d + (F_rr - F_rl))
        ) / p["Iz"]
        return np.array([dvx, dvy, dr])

    return SystemSpec(
        name="vehicle",
        n_states=3,
        n_u=5,
        n_y=3,
        params=p,
        rhs=rhs,
        observe=lambda x: np.array([x[2], x[0], x[1]]),
        x0_default=np.array([15.0, 0.0, 0.0]),
        delta_default=0.02,
        input_policy=InputPolicy(
            kind="prbs_steps",
            hold_steps=40,
            low=(0.0, 0.0, 0.0, 0.0, -0.25),
            high=(0.04, 0.04, 0.04, 0.04, 0.25),
        ),
    )


def _tank() -> SystemSpec:
    """Two-tank cascade driven by a pump; only the lower level is measured.

    States: upper level h1 and lower level h2 [cm]; input: pump voltage [V].
    The pump fills the upper tank, which drains through a bottom opening into
    the lower one; outflows follow Torricelli sqrt-laws with levels clamped at
    zero.  Output: h2.  Time unit: seconds; the dynamics are slow relative to
    the 2 s sampling, which is why the discrete-time family decimates this
    dataset.
    """
    p = dict(k_pump=0.10, c12=0.14, c_out=0.11)

    def rhs(x, u, t, p=p):
        h1, h2 = x
        dh1 = p["k_pump"] * u[0] - p["c12"] * _pos(h1)
        dh2 = p["c12"] * _pos(h1) - p["c_out"] * _pos(h2)
        return np.array([dh1, dh2])

    return SystemSpec(
        name="tank",
        n_states=2,
        n_u=1,
        n_y=1,
        params=p,
        rhs=rhs,
        observe=lambda x: np.array([x[1]]),
        x0_default=np.array([3.0, 5.0]),
        delta_default=2.0,
        input_policy=InputPolicy(kind="prbs_steps", hold_steps=60, low=(0.5,), high=(5.0,)),
    )


def _two_tank() -> SystemSpec:
    """Pump-and-valve two-tank system; both levels are measured.

    States: levels h1, h2; inputs: pump command in [0, 1] and valve opening in
    [0.1, 1].  The valve throttles the flow from tank 1 into tank 2, making
    the input enter multiplicatively under the sqrt-law.  Time unit: seconds.
    """
    p = dict(c_pump=0.12, c_valve=0.06, c_out=0.05)

    def rhs(x, u, t, p=p):
        h1, h2 = x
        flow12 = p["c_valve"] * u[1] * _pos(h1)
        dh1 = p["c_pump"] * u[0] - flow12
        dh2 = flow12 - p["c_out"] * _pos(h2)
        return np.array([dh1, dh2])

    return SystemSpec(
        name="two_tank",
        n_states=2,
        n_u=2,
        n_y=2,
        params=p,
        rhs=rhs,
        observe=lambda x: np.asarray(x, dtype=float).copy(),
        x0_default=np.array([1.5, 1.5]),
        delta_default=2.0,
        input_policy=InputPolicy(
            kind="prbs_steps", hold_steps=50, low=(0.0, 0.1), high=(1.0, 1.0)
        ),
    )


def _pendulum() -> SystemSpec:
    """Ideal frictionless pendulum released from a large angle.

    States: angle th and rate w; outputs: angle, rate and angular acceleration
    -(g/l) sin(th).  The 2.2 rad release keeps it far from the small-angle
    (linear) regime.  Autonomous.
    """
    p = dict(g=GRAVITY, l=1.0)

    def rhs(x, u, t, p=p):
        th, w = x
        return np.array([w, -(p["g"] / p["l"]) * math.sin(th)])

    def observe(x, p=p):
        th, w = x
        return np.array([th, w, -(p["g"] / p["l"]) * math.sin(th)])

    return SystemSpec(
        name="pendulum",
        n_states=2,
        n_u=0,
        n_y=3,
        params=p,
        rhs=rhs,
        observe=observe,
        x0_default=np.array([2.2, 0.0]),
        delta_default=0.02,
        input_policy=InputPolicy(kind="none"),
    )


def pendulum_energy(x, params) -> float:
    th, w = x
    g, l = params["g"], params["l"]
    return 0.5 * l * l * w * w - g * l * math.cos(th)


def _linear_oscillator() -> SystemSpec:
    """Undamped spring-mass oscillator; the one exactly linear system.

    States: position and velocity; outputs: position, velocity and
    acceleration -omega^2 * p with omega = 2*pi*0.4 rad/s.  Autonomous.
    """
    p = dict(omega=2.0 * math.pi * 0.4)

    def rhs(x, u, t, p=p):
        pos, vel = x
        return np.array([vel, -p["omega"] ** 2 * pos])

    def observe(x, p=p):
        pos, vel = x
        return np.array([pos, vel, -p["omega"] ** 2 * pos])

    return SystemSpec(
        name="linear_oscillator",
        n_states=2,
        n_u=0,
        n_y=3,
        params=p,
        rhs=rhs,
        observe=observe,
        x0_default=np.array([1.0, 0.0]),
        delta_default=0.02,
        input_policy=InputPolicy(kind="none"),
    )


_BUILDERS = {
    "cstr": _cstr,
    "double_pendulum": _double_pendulum,
    "vehicle": _vehicle,
    "tank": _tank,
    "two_tank": _two_tank,
    "pendulum": _pendulum,
    "linear_oscillator": _linear_oscillator,
}


def system_names() -> list[str]:
    return list(_BUILDERS)


def builtin(name: str) -> SystemSpec:
    """Look up a built-in system by name."""
    try:
        return _BUILDERS[name]()
    except KeyError:
        raise ValueError(
            f"unknown system {name!r}; available: {', '.join(_BUILDERS)}"
        ) from None


def draw_inputs(spec: SystemSpec, n: int, policy: InputPolicy | None, seed: int) -> np.ndarray:
    """Piecewise-constant input sequence, shape (n, n_u)."""
    policy = policy or spec.input_policy
    if spec.n_u == 0:
        return np.zeros((n, 0))
    low = np.asarray(policy.low, dtype=float)
    high = np.asarray(policy.high, dtype=float)
    if low.shape != (spec.n_u,):
        raise ValueError(
            f"policy has {low.shape[0]} channels, system {spec.name!r} needs {spec.n_u}"
        )
    if policy.kind == "none":
        return np.tile((low + high) / 2.0, (n, 1))
    rng = np.random.default_rng(policy.seed if policy.seed is not None else seed)
    n_blocks = -(-n // policy.hold_steps)
    values = rng.uniform(low, high, size=(n_blocks, spec.n_u))
    return np.repeat(values, policy.hold_steps, axis=0)[:n]


def generate(
    spec: SystemSpec,
    n: int,
    delta: float | None = None,
    policy: InputPolicy | None = None,
    seed: int = 0,
    substeps: int | None = None,
    x0: np.ndarray | None = None,
) -> Trajectory:
    """Simulate ``n`` samples of one system under step excitation.

    Inputs are zero-order-held over each sampling interval; the state is
    advanced with RK4 using ``substeps`` equal substeps per interval (minimum
    10, default per system).  ``seed`` only affects the input draw; the
    initial state is ``x0_default`` unless overridden.
    """
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if substeps is None:
        substeps = spec.substeps_default
    if substeps < 10:
        raise ValueError(f"substeps must be >= 10, got {substeps}")
    delta = float(delta if delta is not None else spec.delta_default)
    if delta <= 0:
        raise ValueError("delta must be positive")
    inputs = draw_inputs(spec, n, policy, seed)
    x = np.array(x0 if x0 is not None else spec.x0_default, dtype=float)
    if x.shape != (spec.n_states,):
        raise ValueError(f"x0 must have shape ({spec.n_states},), got {x.shape}")

    cfg = SolverConfig(method="rk4", h_init=delta / substeps)
    outputs = np.empty((n, spec.n_y))
    times = delta * np.arange(n)
    for k in range(n):
        outputs[k] = spec.observe(x)
        if k == n - 1:
            break
        u_k = inputs[k]
        x = integrate(
            lambda s, t, u=u_k: spec.rhs(s, u, t), x, (times[k], times[k + 1]), cfg
        )[-1]
    return Trajectory(delta=delta, times=times, inputs=inputs, outputs=outputs)


def with_policy(spec: SystemSpec, **changes) -> SystemSpec:
    """Spec with a modified input policy (e.g. a different seed or range)."""
    return replace(spec, input_policy=replace(spec.input_policy, **changes))
