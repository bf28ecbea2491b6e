"""Ground-truth simulators and finite-time Lyapunov exponent diagnostics.

Two test systems are provided:

* a conductance-based (Wang-Buzsaki type) neuron with an adaptation current,
  state ``x = [V, q, n, w]`` and observable ``g(x) = [V, q]``;
* the Hopf normal form driven by additive white noise on the first
  coordinate, observable ``g(x) = x1``.

Deterministic integration is fixed-step classical RK4 (with optional
substeps so the sampling grid stays at ``dt``). The stochastic Hopf term is
integrated with Euler-Maruyama.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .data import TimeSeriesData
from .errors import DataError, IntegrationDivergedError

GATING_TOL = 1e-9


# Neuron model ================================================================
@dataclass(frozen=True)
class NeuronParams:
    C: float = 1.0
    g_Na: float = 35.0
    g_K: float = 9.0
    g_L: float = 0.1
    g_w: float = 2.0
    E_Na: float = 55.0
    E_K: float = -90.0
    E_L: float = -65.0
    i_b: float = 10.0
    a: float = 0.02
    b: float = -5.0
    k: float = 0.5

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("capacitance C must be positive")
        for name in ("g_Na", "g_K", "g_L", "g_w"):
            if getattr(self, name) < 0:
                raise ValueError(f"conductance {name} must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class NeuronState:
    # Defaults sit on the settled u = 0 limit cycle (voltage minimum).
    V: float = -64.34746178
    q: float = 0.30450417
    n: float = 0.37152209
    w: float = 0.10791377

    def as_array(self):
        return np.array([self.V, self.q, self.n, self.w], dtype=float)

    @classmethod
    def from_array(cls, x):
        return cls(*(float(v) for v in x))


def _xexp(s):
    """s / (1 - exp(-s)) and its derivative, regular at s = 0."""
    if abs(s) < 1e-6:
        return 1.0 + 0.5 * s + s * s / 12.0, 0.5 + s / 6.0
    em = math.exp(-s)
    d = 1.0 - em
    return s / d, (d - s * em) / (d * d)


def neuron_rates(V):
    """Rate functions of the neuron and their voltage derivatives.

    Returns ``(m_inf, alpha_q, beta_q, alpha_n, beta_n)`` and the matching
    tuple of d/dV values.
    """
    fm, dfm = _xexp(0.1 * (V + 35.0))
    am, dam = fm, 0.1 * dfm
    bm = 4.0 * math.exp(-(V + 60.0) / 18.0)
    dbm = -bm / 18.0
    m_inf = am / (am + bm)
    dm_inf = (dam * bm - am * dbm) / (am + bm) ** 2

    aq = 0.07 * math.exp(-(V + 58.0) / 20.0)
    daq = -aq / 20.0
    bq = 1.0 / (math.exp(-0.1 * (V + 28.0)) + 1.0)
    dbq = 0.1 * bq * (1.0 - bq)

    fn, dfn = _xexp(0.1 * (V + 34.0))
    an, dan = 0.1 * fn, 0.01 * dfn
    bn = 0.125 * math.exp(-(V + 44.0) / 80.0)
    dbn = -bn / 80.0
    return (m_inf, aq, bq, an, bn), (dm_inf, daq, dbq, dan, dbn)


def _w_inf(P, V):
    s = 1.0 / (1.0 + math.exp(min((P.b - V) / P.k, 700.0)))
    return 1.5 * s, 1.5 * s * (1.0 - s) / P.k


def neuron_rhs(P: NeuronParams, x, u=0.0):
    """Right-hand side of the neuron ODE; ``u`` enters the voltage line only."""
    V, q, n, w = x
    (m_inf, aq, bq, an, bn), _ = neuron_rates(V)
    w_inf, _ = _w_inf(P, V)
    i_w = P.g_w * w * (V - P.E_K)
    dV = (
        -P.g_Na * m_inf**3 * q * (V - P.E_Na)
        - P.g_K * n**4 * (V - P.E_K)
        - P.g_L * (V - P.E_L)
        - i_w
        + u
        + P.i_b
    ) / P.C
    dq = 5.0 * (aq * (1.0 - q) - bq * q)
    dn = 5.0 * (an * (1.0 - n) - bn * n)
    dw = P.a * (w_inf - w)
    return np.array([dV, dq, dn, dw])


def neuron_jacobian(P: NeuronParams, x):
    """Closed-form 4x4 Jacobian of :func:`neuron_rhs` with respect to the state."""
    V, q, n, w = x
    (m_inf, aq, bq, an, bn), (dm, daq, dbq, dan, dbn) = neuron_rates(V)
    _, dw_inf = _w_inf(P, V)
    J = np.empty((4, 4))
    J[0, 0] = (
        -P.g_Na * (3.0 * m_inf**2 * dm * q * (V - P.E_Na) + m_inf**3 * q)
        - P.g_K * n**4
        - P.g_L
        - P.g_w * w
    ) / P.C
    J[0, 1] = -P.g_Na * m_inf**3 * (V - P.E_Na) / P.C
    J[0, 2] = -4.0 * P.g_K * n**3 * (V - P.E_K) / P.C
    J[0, 3] = -P.g_w * (V - P.E_K) / P.C
    J[1] = [5.0 * (daq * (1.0 - q) - dbq * q), -5.0 * (aq + bq), 0.0, 0.0]
    J[2] = [5.0 * (dan * (1.0 - n) - dbn * n), 0.0, -5.0 * (an + bn), 0.0]
    J[3] = [P.a * dw_inf, 0.0, 0.0, -P.a]
    return J


def _as_input_fn(u):
    if u is None:
        return lambda t: 0.0
    if callable(u):
        return u
    value = float(u)
    return lambda t: value


def simulate_neuron(
    params: NeuronParams = NeuronParams(),
    x0: NeuronState = NeuronState(),
    u: Callable[[float], float] | float | None = None,
    dt: float = 0.025,
    n_steps: int = 8000,
    substeps: int = 2,
    t0: float = 0.0,
) -> TimeSeriesData:
    """Integrate the neuron with fixed-step RK4.

    The returned series has ``n_steps + 1`` rows sampled at ``t0 + k*dt``;
    observables are ``[V, q]``, the input column holds ``u`` at the sample
    times and the full state is attached for diagnostics.

    Raises
    ------
    IntegrationDivergedError
        If the state becomes non-finite or a gating variable leaves [0, 1].
    """
    if not dt > 0:
        raise DataError("dt must be positive")
    if substeps < 1:
        raise DataError("substeps must be >= 1")
    u_fn = _as_input_fn(u)
    h = dt / substeps
    x = x0.as_array() if isinstance(x0, NeuronState) else np.asarray(x0, dtype=float)
    states = np.empty((n_steps + 1, 4))
    inputs = np.empty(n_steps + 1)
    states[0] = x
    inputs[0] = u_fn(t0)
    f = neuron_rhs
    for k in range(n_steps):
        t = t0 + k * dt
        try:
            for j in range(substeps):
                ts = t + j * h
                um = u_fn(ts + 0.5 * h)
                k1 = f(params, x, u_fn(ts))
                k2 = f(params, x + 0.5 * h * k1, um)
                k3 = f(params, x + 0.5 * h * k2, um)
                k4 = f(params, x + h * k3, u_fn(ts + h))
                x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        except OverflowError:
            raise IntegrationDivergedError(f"neuron state overflowed at step {k + 1}", step=k + 1) from None
        if not np.all(np.isfinite(x)):
            raise IntegrationDivergedError(f"neuron state non-finite at step {k + 1}", step=k + 1)
        if min(x[1], x[2]) < -GATING_TOL or max(x[1], x[2]) > 1.0 + GATING_TOL:
            raise IntegrationDivergedError(
                f"gating variable left [0, 1] at step {k + 1} (q={x[1]:.3g}, n={x[2]:.3g}); "
                "reduce dt/substeps",
                step=k + 1,
            )
        states[k + 1] = x
        inputs[k + 1] = u_fn(t0 + (k + 1) * dt)
    return TimeSeriesData(
        dt=dt,
        observables=states[:, :2].copy(),
        inputs=inputs,
        states=states,
        t0=t0,
        meta={"system": "neuron", "params": params.to_dict()},
    )


def spike_times(V, times, threshold=0.0):
    """Upward threshold crossings of ``V``, linearly interpolated in time."""
    V = np.asarray(V)
    idx = np.flatnonzero((V[:-1] < threshold) & (V[1:] >= threshold))
    frac = (threshold - V[idx]) / (V[idx + 1] - V[idx])
    return times[idx] + frac * (times[idx + 1] - times[idx])


# Hopf normal form ============================================================
@dataclass(frozen=True)
class HopfParams:
    mu: float = 1.0
    rho: float = -0.1
    sigma: float = 0.3
    D: float = 0.0

    def __post_init__(self):
        if self.D < 0:
            raise ValueError("noise intensity D must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class HopfState:
    x1: float = 1.0
    x2: float = 0.0

    def as_array(self):
        return np.array([self.x1, self.x2], dtype=float)


def hopf_drift(P: HopfParams, x):
    x1, x2 = x
    r2 = x1 * x1 + x2 * x2
    rad = P.sigma * (P.mu - r2)
    rot = 1.0 + P.rho * (r2 - P.mu)
    return np.array([x1 * rad - x2 * rot, x2 * rad + x1 * rot])


def hopf_jacobian(P: HopfParams, x):
    """Jacobian of :func:`hopf_drift`."""
    x1, x2 = x
    r2 = x1 * x1 + x2 * x2
    rad = P.sigma * (P.mu - r2)
    rot = 1.0 + P.rho * (r2 - P.mu)
    s, q = P.sigma, P.rho
    return np.array(
        [
            [rad - 2 * s * x1 * x1 - 2 * q * x1 * x2, -rot - 2 * s * x1 * x2 - 2 * q * x2 * x2],
            [rot - 2 * s * x1 * x2 + 2 * q * x1 * x1, rad - 2 * s * x2 * x2 + 2 * q * x1 * x2],
        ]
    )


def simulate_hopf(
    params: HopfParams = HopfParams(),
    x0: HopfState = HopfState(),
    dt: float = 0.04,
    n_steps: int = 2500,
    seed: int | None = 0,
    substeps: int = 1,
    t0: float = 0.0,
) -> TimeSeriesData:
    """Integrate the Hopf normal form; observable is ``x1``.

    Each (sub)step advances the drift with classical RK4 and, for
    ``D > 0``, adds the Wiener increment of ``sqrt(2 D) eta(t)`` to ``x1``
    only. The noise is additive, so this is an Euler-Maruyama scheme with a
    higher-order drift; plain Euler drift would inflate the limit-cycle
    radius by about ``dt / (4 sigma)``. The RNG is created from ``seed`` per
    call.
    """
    if not dt > 0:
        raise DataError("dt must be positive")
    if substeps < 1:
        raise DataError("substeps must be >= 1")
    h = dt / substeps
    x = x0.as_array() if isinstance(x0, HopfState) else np.asarray(x0, dtype=float)
    states = np.empty((n_steps + 1, 2))
    states[0] = x
    f = hopf_drift
    if params.D > 0:
        rng = np.random.default_rng(seed)
        noise = math.sqrt(2.0 * params.D * h) * rng.standard_normal((n_steps, substeps))
    for k in range(n_steps):
        for j in range(substeps):
            k1 = f(params, x)
            k2 = f(params, x + 0.5 * h * k1)
            k3 = f(params, x + 0.5 * h * k2)
            k4 = f(params, x + h * k3)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if params.D > 0:
                x[0] += noise[k, j]
        if not np.all(np.isfinite(x)):
            raise IntegrationDivergedError(f"Hopf state non-finite at step {k + 1}", step=k + 1)
        states[k + 1] = x
    return TimeSeriesData(
        dt=dt,
        observables=states[:, :1].copy(),
        states=states,
        t0=t0,
        meta={"system": "hopf", "params": params.to_dict()},
    )


# Finite-time Lyapunov exponents ==============================================
@dataclass
class FtleSeries:
    times: np.ndarray
    lam: np.ndarray
    window: float

    def __post_init__(self):
        if len(self.times) != len(self.lam):
            raise ValueError("times and lam must have equal length")
        if not self.window > 0:
            raise ValueError("window must be positive")


def step_transition_matrices(jacobian, states, dt, midpoints):
    """One-step state-transition matrices Psi(t_{k+1}, t_k) by matrix RK4.

    ``midpoints[k]`` is the state at ``t_k + dt/2``.
    """
    n = states.shape[1]
    I = np.eye(n)
    out = np.empty((len(states) - 1, n, n))
    for k in range(len(states) - 1):
        t = k * dt
        J0 = jacobian(t, states[k])
        Jm = jacobian(t + 0.5 * dt, midpoints[k])
        J1 = jacobian(t + dt, states[k + 1])
        k1 = J0
        k2 = Jm @ (I + 0.5 * dt * k1)
        k3 = Jm @ (I + 0.5 * dt * k2)
        k4 = J1 @ (I + dt * k3)
        out[k] = I + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return out


def _hermite_midpoints(states, derivs, dt):
    return 0.5 * (states[:-1] + states[1:]) + (dt / 8.0) * (derivs[:-1] - derivs[1:])


def compute_ftle(
    params: NeuronParams | None,
    trajectory: TimeSeriesData,
    window: float,
    output_selector: Sequence[int] = (0, 1),
    jacobian: Callable[[float, np.ndarray], np.ndarray] | None = None,
    rhs: Callable[[float, np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> FtleSeries:
    """Output-projected finite-time Lyapunov exponent along a trajectory.

    For every sample time ``t`` with ``t - window`` inside the record, the
    variational equation ``d(dx)/dt = J(t) dx`` is integrated over
    ``[t - window, t]`` starting from the identity, and

        Lambda(t) = log(sigma_max(Psi(t, t - window) E)) / window

    where ``E`` holds the unit columns picked by ``output_selector``.

    Parameters
    ----------
    params : NeuronParams or None
        Neuron parameters; used for the default Jacobian and vector field.
    trajectory : TimeSeriesData
        Must carry full ``states``.
    window : float
        Backward horizon, rounded to a whole number of samples.
    jacobian : callable, optional
        ``jacobian(t, x) -> (n, n)``. Defaults to :func:`neuron_jacobian`.
    rhs : callable, optional
        ``rhs(t, x, u) -> dx/dt`` used for cubic Hermite midpoints. Defaults
        to the neuron vector field when ``jacobian`` is not given, otherwise
        midpoints are linear interpolants.
    """
    states = trajectory.states
    if states is None:
        raise DataError("compute_ftle needs a trajectory with full states")
    dt = trajectory.dt
    if window < dt * (1 - 1e-12):
        raise DataError(f"window {window} shorter than one sample interval {dt}")
    w = int(round(window / dt))
    if w > len(states) - 1:
        raise DataError(
            f"window of {w} samples exceeds available history of {len(states) - 1} steps"
        )
    if jacobian is None:
        if params is None:
            params = NeuronParams()
        jacobian = lambda t, x: neuron_jacobian(params, x)  # noqa: E731
        if rhs is None:
            rhs = lambda t, x, u: neuron_rhs(params, x, u[0] if len(u) else 0.0)  # noqa: E731
    if rhs is not None:
        derivs = np.array(
            [rhs(t, x, u) for t, x, u in zip(trajectory.times, states, trajectory.inputs)]
        )
        mids = _hermite_midpoints(states, derivs, dt)
    else:
        mids = 0.5 * (states[:-1] + states[1:])
    steps = step_transition_matrices(jacobian, states, dt, mids)

    n = states.shape[1]
    E = np.eye(n)[:, list(output_selector)]
    n_out = len(states) - w
    P = np.broadcast_to(E, (n_out, n, E.shape[1])).copy()
    for j in range(w):
        P = steps[j : j + n_out] @ P
    sig = np.linalg.svd(P, compute_uv=False)[:, 0]
    actual = w * dt
    return FtleSeries(
        times=trajectory.times[w:],
        lam=np.log(sig) / actual,
        window=actual,
    )
