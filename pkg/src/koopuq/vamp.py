"""Vector approximate message passing for ``y = A x + n``.

The solver alternates two Gaussian-message estimators:

1. a separable MMSE denoiser that combines the prior ``p(x)`` with the
   pseudo-observation ``r = x + N(0, 1/gamma)`` coming from the linear side;
2. an LMMSE estimator that combines the measurement model with the
   pseudo-prior coming from the denoiser side.

After each estimator the incoming message is divided out of the Gaussian
posterior approximation (the "extrinsic" update) and the result is sent to
the other side. Precisions are scalars (scalar EP), so each posterior is
summarised by a mean vector and one variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, SolverDivergedError

PRIOR_KINDS = ("gaussian", "bernoulli_gaussian")


@dataclass(frozen=True)
class PriorSpec:
    """Separable prior on the entries of ``x``.

    ``gaussian``: ``N(mean, variance)``. ``bernoulli_gaussian``: zero with
    probability ``1 - sparsity_rho`` and ``N(mean, variance)`` otherwise.
    When ``variance`` is omitted for the Bernoulli-Gaussian case it defaults
    to ``1 / sparsity_rho`` (unit signal power for zero mean).
    """

    kind: str = "bernoulli_gaussian"
    mean: float = 0.0
    variance: float | None = None
    sparsity_rho: float = 0.05

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ConfigError(f"unknown prior kind {self.kind!r}; expected one of {PRIOR_KINDS}")
        if not 0 < self.sparsity_rho <= 1:
            raise ConfigError("sparsity_rho must lie in (0, 1]")
        if self.variance is None:
            v = 1.0 / self.sparsity_rho if self.kind == "bernoulli_gaussian" else 1.0
            object.__setattr__(self, "variance", v)
        if not self.variance > 0:
            raise ConfigError("prior variance must be positive")

    @property
    def rho(self):
        return 1.0 if self.kind == "gaussian" else self.sparsity_rho

    @property
    def total_mean(self):
        return self.rho * self.mean

    @property
    def total_variance(self):
        """Variance of the full prior (mixture variance for Bernoulli-Gaussian)."""
        rho, m, v = self.rho, self.mean, self.variance
        return rho * (v + m * m) - (rho * m) ** 2


# Denoiser ===================================================================
def denoise_mmse(prior: PriorSpec, r, gamma):
    """Componentwise posterior mean of ``x`` given ``r = x + N(0, 1/gamma)``.

    Returns
    -------
    x_hat : ndarray
        Posterior means.
    alpha : float
        Average of d x_hat / d r over the entries.
    gamma_p : float
        Scalar posterior precision ``gamma / alpha``.
    """
    x_hat, dxdr = denoise_components(prior, r, gamma)
    alpha = float(np.mean(dxdr))
    return x_hat, alpha, gamma / alpha


def denoise_components(prior: PriorSpec, r, gamma):
    """Posterior means and per-entry derivatives ``d x_hat_i / d r_i``."""
    if not np.all(np.asarray(gamma) > 0):
        raise ValueError(f"denoiser precision must be positive, got {gamma}")
    r = np.asarray(r, dtype=float)
    m, v = prior.mean, prior.variance
    # Gaussian slab posterior
    prec = gamma + 1.0 / v
    mu = (gamma * r + m / v) / prec
    if prior.kind == "gaussian" or prior.sparsity_rho == 1.0:
        return mu, np.broadcast_to(gamma / prec, r.shape).copy()
    rho = prior.sparsity_rho
    s_act = v + 1.0 / gamma
    # log-odds of the active component: log rho N(r; m, v + 1/g) - log (1-rho) N(r; 0, 1/g)
    llr = (
        np.log(rho / (1.0 - rho))
        + 0.5 * np.log(1.0 / (gamma * s_act))
        - 0.5 * (r - m) ** 2 / s_act
        + 0.5 * gamma * r**2
    )
    pi = expit(llr)
    x_hat = pi * mu
    dllr = -(r - m) / s_act + gamma * r
    dxdr = pi * (1.0 - pi) * dllr * mu + pi * gamma / prec
    return x_hat, dxdr


def posterior_component_variance(prior: PriorSpec, r, gamma):
    """Exact per-entry posterior variances (used to cross-check the derivative)."""
    r = np.asarray(r, dtype=float)
    m, v = prior.mean, prior.variance
    prec = gamma + 1.0 / v
    mu = (gamma * r + m / v) / prec
    if prior.kind == "gaussian" or prior.sparsity_rho == 1.0:
        return np.full_like(r, 1.0 / prec)
    rho = prior.sparsity_rho
    s_act = v + 1.0 / gamma
    llr = (
        np.log(rho / (1.0 - rho))
        + 0.5 * np.log(1.0 / (gamma * s_act))
        - 0.5 * (r - m) ** 2 / s_act
        + 0.5 * gamma * r**2
    )
    pi = expit(llr)
    return pi * (1.0 / prec + mu**2) - (pi * mu) ** 2


# Extrinsic messages ==========================================================
def extrinsic_update(gamma_p, x_hat_p, gamma_e_in, x_hat_e_in):
    """Divide the incoming Gaussian message out of the posterior approximation.

    ``gamma_out = gamma_p - gamma_in`` and
    ``x_out = (gamma_p x_p - gamma_in x_in) / gamma_out``. No clipping is
    applied here; see :func:`vamp_solve`.
    """
    gamma_out = gamma_p - gamma_e_in
    x_out = (gamma_p * np.asarray(x_hat_p) - gamma_e_in * np.asarray(x_hat_e_in)) / gamma_out
    return gamma_out, x_out


# LMMSE ======================================================================
@dataclass
class SensingModel:
    """Measurement operator with its cached economy SVD ``A = U diag(s) V^T``.

    Only singular values above ``max(M, N) * eps * s_max`` are kept; ``R``
    is the retained rank.
    """

    A: np.ndarray
    noise_precision: float
    U: np.ndarray = field(init=False, repr=False)
    s: np.ndarray = field(init=False, repr=False)
    V: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if not self.noise_precision > 0:
            raise ConfigError("noise precision must be positive")
        U, s, Vt = np.linalg.svd(self.A, full_matrices=False)
        if s.size and s[0] > 0:
            keep = s > max(self.A.shape) * np.finfo(float).eps * s[0]
        else:
            keep = np.zeros_like(s, dtype=bool)
        self.U, self.s, self.V = U[:, keep], s[keep], Vt[keep].T

    @property
    def shape(self):
        return self.A.shape

    @property
    def rank(self):
        return self.s.size


def lmmse_estimate(model: SensingModel, y, x_hat_e, gamma_e, path="svd"):
    """Gaussian posterior of ``x`` from ``y = A x + N(0, 1/gamma_w)`` and
    the pseudo-prior ``N(x_hat_e, 1/gamma_e)``.

    ``path="direct"`` inverts ``gamma_w A^T A + gamma_e I`` densely;
    ``path="svd"`` uses the cached SVD and costs ``O(N R)``.

    Returns ``(x_hat_p, gamma_p)`` where ``1/gamma_p`` is the average of the
    diagonal of the posterior covariance.
    """
    gamma_e = np.asarray(gamma_e, dtype=float)
    if not np.all(gamma_e > 0):
        raise ValueError(f"extrinsic precision must be positive, got {gamma_e}")
    A, gw = model.A, model.noise_precision
    N = A.shape[1]
    y = np.asarray(y, dtype=float)
    x_hat_e = np.asarray(x_hat_e, dtype=float)
    if y.ndim == 2:
        # one column per problem, precisions per column
        if path != "svd":
            raise ValueError("column-batched LMMSE only supports the svd path")
        U, s, V = model.U, model.s, model.V
        d = gw * s[:, None] ** 2 + gamma_e
        resid = U.T @ y - s[:, None] * (V.T @ x_hat_e)
        x = x_hat_e + V @ (gw * s[:, None] / d * resid)
        var = (np.sum(1.0 / d, axis=0) + (N - s.size) / gamma_e) / N
        return x, 1.0 / var
    if path == "direct":
        Q = gw * A.T @ A + gamma_e * np.eye(N)
        Qi = np.linalg.inv(Q)
        x = Qi @ (gw * A.T @ y + gamma_e * x_hat_e)
        return x, N / np.trace(Qi)
    if path != "svd":
        raise ValueError(f"unknown LMMSE path {path!r}")
    U, s, V = model.U, model.s, model.V
    d = gw * s**2 + gamma_e
    # x = x_e + V diag(gw s / d) (U^T y - diag(s) V^T x_e)
    resid = U.T @ y - s * (V.T @ x_hat_e)
    x = x_hat_e + V @ (gw * s / d * resid)
    var = (np.sum(1.0 / d) + (N - s.size) / gamma_e) / N
    return x, 1.0 / var


# Solver =====================================================================
@dataclass
class VampOptions:
    max_iters: int = 50
    damping: float = 0.9
    tol: float = 1e-8
    gamma_floor: float = 1e-11
    gamma_ceiling: float = 1e11
    path: str = "svd"
    init_mean: np.ndarray | float | None = None
    init_precision: float | None = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if not 0 < self.damping <= 1:
            raise ConfigError("damping must lie in (0, 1]")


@dataclass
class VampState:
    x_hat_e_plus: np.ndarray
    gamma_e_plus: float
    x_hat_e_minus: np.ndarray | None = None
    gamma_e_minus: float | None = None
    iteration: int = 0


@dataclass
class VampResult:
    x_hat: np.ndarray
    posterior_variance: float
    trace: list
    converged: bool
    iterations_run: int
    state: VampState = field(repr=False, default=None)
    x_hat_lmmse: np.ndarray = field(repr=False, default=None)


def _extrinsic(gamma_p, x_p, gamma_in, x_in, opts, flags, which):
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma, x = extrinsic_update(gamma_p, x_p, gamma_in, x_in)
    if not opts.gamma_floor <= gamma <= opts.gamma_ceiling:
        flags.append(which)
        gamma = min(max(gamma, opts.gamma_floor), opts.gamma_ceiling)
        if not np.all(np.isfinite(x)):
            x = np.array(x_p, dtype=float)
    return gamma, x


def vamp_iteration(model, y, prior, state: VampState, opts: VampOptions):
    """One denoise / extrinsic / LMMSE / extrinsic sweep.

    Returns the new state and a dict of diagnostics including the denoiser
    posterior (``x_p``, ``gamma_p``).
    """
    flags = []
    r1, g1 = state.x_hat_e_plus, state.gamma_e_plus
    x1, alpha, gp1 = denoise_mmse(prior, r1, g1)
    g2, r2 = _extrinsic(gp1, x1, g1, r1, opts, flags, "minus")
    if state.x_hat_e_minus is not None and opts.damping < 1:
        b = opts.damping
        r2 = b * r2 + (1 - b) * state.x_hat_e_minus
        g2 = b * g2 + (1 - b) * state.gamma_e_minus
    x2, gp2 = lmmse_estimate(model, y, r2, g2, path=opts.path)
    g1n, r1n = _extrinsic(gp2, x2, g2, r2, opts, flags, "plus")
    if opts.damping < 1:
        b = opts.damping
        r1n = b * r1n + (1 - b) * r1
        g1n = b * g1n + (1 - b) * g1
    new = VampState(
        x_hat_e_plus=r1n,
        gamma_e_plus=g1n,
        x_hat_e_minus=r2,
        gamma_e_minus=g2,
        iteration=state.iteration + 1,
    )
    info = {
        "x_p": x1,
        "gamma_p": gp1,
        "alpha": alpha,
        "x_lmmse": x2,
        "gamma_p_minus": gp2,
        "clipped": flags,
    }
    return new, info


def initial_state(prior: PriorSpec, N, opts: VampOptions):
    mean = prior.total_mean if opts.init_mean is None else opts.init_mean
    prec = 1.0 / prior.total_variance if opts.init_precision is None else opts.init_precision
    return VampState(x_hat_e_plus=np.broadcast_to(np.asarray(mean, float), (N,)).copy(), gamma_e_plus=prec)


def vamp_solve(model: SensingModel, y, prior: PriorSpec, opts: VampOptions | None = None) -> VampResult:
    """Run VAMP until the denoiser mean stops moving or ``max_iters`` is hit.

    The denoiser is started from the prior (mean and precision of the full
    prior) unless ``opts`` says otherwise. Messages are damped as convex
    combinations with weight ``opts.damping`` on the new value. Extrinsic
    precisions outside ``[gamma_floor, gamma_ceiling]`` are clipped and the
    event is recorded in the trace.

    Returns the denoiser posterior mean and the scalar posterior variance
    ``1 / gamma_p`` of the final sweep.

    Raises
    ------
    SolverDivergedError
        If any message becomes non-finite.
    """
    opts = opts or VampOptions()
    y = np.asarray(y, dtype=float)
    M, N = model.shape
    if y.shape != (M,):
        raise ValueError(f"measurement has shape {y.shape}; expected ({M},)")
    state = initial_state(prior, N, opts)
    trace = []
    x_prev = None
    converged = False
    info = None
    for it in range(opts.max_iters):
        state, info = vamp_iteration(model, y, prior, state, opts)
        x_p = info["x_p"]
        change = (
            np.inf
            if x_prev is None
            else np.linalg.norm(x_p - x_prev) / max(np.linalg.norm(x_p), np.finfo(float).tiny)
        )
        trace.append(
            {
                "iteration": it + 1,
                "gamma_p_plus": info["gamma_p"],
                "gamma_p_minus": info["gamma_p_minus"],
                "gamma_e_plus": state.gamma_e_plus,
                "gamma_e_minus": state.gamma_e_minus,
                "change": change,
                "clipped": ",".join(info["clipped"]),
            }
        )
        finite = (
            np.all(np.isfinite(state.x_hat_e_plus))
            and np.all(np.isfinite(state.x_hat_e_minus))
            and np.isfinite(state.gamma_e_plus)
            and np.isfinite(info["gamma_p"])
        )
        if not finite:
            raise SolverDivergedError(
                f"VAMP produced non-finite messages at iteration {it + 1}", step=it + 1, trace=trace
            )
        if change < opts.tol:
            converged = True
            break
        x_prev = x_p
    return VampResult(
        x_hat=info["x_p"],
        posterior_variance=1.0 / info["gamma_p"],
        trace=trace,
        converged=converged,
        iterations_run=len(trace),
        state=state,
        x_hat_lmmse=info["x_lmmse"],
    )


def vamp_solve_columns(
    model: SensingModel, Y, prior: PriorSpec, opts: VampOptions | None = None, shared=False
):
    """Solve ``Y[:, j] = A x_j + n_j`` for every column at once.

    With ``shared=False`` each column carries its own scalar precisions and
    stops independently, so column ``j`` of the result equals
    ``vamp_solve(model, Y[:, j], ...)`` up to round-off. With ``shared=True``
    the columns are treated as one stacked problem ``vec(Y) = (I kron A)
    vec(X)`` whose entries share a single scalar precision per message.

    Returns ``(X_hat, variances, iterations, converged)``; ``variances`` has
    one entry per column (all equal when ``shared``).
    """
    opts = opts or VampOptions()
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    M, N = model.shape
    if Y.shape[0] != M:
        raise ValueError(f"measurements have {Y.shape[0]} rows; expected {M}")
    T = Y.shape[1]
    mean0 = prior.total_mean if opts.init_mean is None else opts.init_mean
    prec0 = 1.0 / prior.total_variance if opts.init_precision is None else opts.init_precision
    r1 = np.broadcast_to(np.asarray(mean0, float).reshape(-1, 1), (N, T)).copy()
    g1 = np.full(T, float(prec0))
    r2 = g2 = None
    x_prev = None
    x_out = np.empty((N, T))
    var_out = np.empty(T)
    iters = np.zeros(T, dtype=int)
    done = np.zeros(T, dtype=bool)
    active = np.arange(T)
    b = opts.damping
    lo, hi = opts.gamma_floor, opts.gamma_ceiling

    def average(a):
        return np.full(a.shape[1], a.mean()) if shared else a.mean(axis=0)

    for it in range(opts.max_iters):
        x1, dxdr = denoise_components(prior, r1, g1[None, :])
        alpha = average(dxdr)
        gp1 = g1 / alpha
        with np.errstate(divide="ignore", invalid="ignore"):
            g2n = gp1 - g1
            r2n = (gp1 * x1 - g1 * r1) / g2n
        bad = ~np.all(np.isfinite(r2n), axis=0)
        r2n[:, bad] = x1[:, bad]
        g2n = np.clip(g2n, lo, hi)
        if r2 is not None and b < 1:
            r2n = b * r2n + (1 - b) * r2
            g2n = b * g2n + (1 - b) * g2
        r2, g2 = r2n, g2n
        x2, gp2 = lmmse_estimate(model, Y[:, active], r2, g2)
        if shared:
            gp2 = np.full_like(gp2, 1.0 / np.mean(1.0 / gp2))
        with np.errstate(divide="ignore", invalid="ignore"):
            g1n = gp2 - g2
            r1n = (gp2 * x2 - g2 * r2) / g1n
        bad = ~np.all(np.isfinite(r1n), axis=0)
        r1n[:, bad] = x2[:, bad]
        g1n = np.clip(g1n, lo, hi)
        if b < 1:
            r1n = b * r1n + (1 - b) * r1
            g1n = b * g1n + (1 - b) * g1
        if not (np.all(np.isfinite(r1n)) and np.all(np.isfinite(gp1))):
            raise SolverDivergedError(f"VAMP produced non-finite messages at iteration {it + 1}", step=it + 1)
        if x_prev is None:
            change = np.full(active.size, np.inf)
        elif shared:
            change = np.full(
                active.size,
                np.linalg.norm(x1 - x_prev) / max(np.linalg.norm(x1), np.finfo(float).tiny),
            )
        else:
            change = np.linalg.norm(x1 - x_prev, axis=0) / np.maximum(
                np.linalg.norm(x1, axis=0), np.finfo(float).tiny
            )
        iters[active] = it + 1
        x_out[:, active] = x1
        var_out[active] = 1.0 / gp1
        stop = change < opts.tol
        if np.any(stop):
            done[active[stop]] = True
            keep = ~stop
            active = active[keep]
            r1, g1, r2, g2, x1 = r1n[:, keep], g1n[keep], r2[:, keep], g2[keep], x1[:, keep]
            if active.size == 0:
                break
        else:
            r1, g1 = r1n, g1n
        x_prev = x1
    return x_out, var_out, iters, done
