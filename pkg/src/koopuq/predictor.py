"""Rolling fitted models forward and cutting the result into batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TimeSeriesData
from .errors import ConfigError, DataError, InsufficientHistoryError, RolloutDivergedError
from .koopman import KoopmanModel, lift_matrix


@dataclass
class RolloutState:
    h: np.ndarray
    g: np.ndarray
    upsilon: np.ndarray
    k: int


@dataclass
class Rollout:
    """Output of :func:`rollout`.

    Row ``j`` of ``regressors`` is ``r^{k0+j} = [g; u; upsilon]`` and row ``j``
    of ``predicted`` is the model output ``g^{k0+j+1}``. ``inverse_X`` and
    ``inverse_Y`` hold the same quantities in the coordinates the operator
    acts on (identical to the raw ones unless the model is standardized), so
    ``inverse_Y[j] = A @ inverse_X[j]`` holds exactly.
    """

    predicted: np.ndarray
    regressors: np.ndarray
    inverse_X: np.ndarray
    inverse_Y: np.ndarray
    delays: np.ndarray
    inputs: np.ndarray
    k0: int
    dt: float
    t0: float
    p: int
    m: int

    def __len__(self):
        return self.predicted.shape[0]

    @property
    def series(self) -> TimeSeriesData:
        """Predicted observables as a time series starting at step ``k0 + 1``."""
        n = len(self)
        inputs = np.zeros((n, self.m))
        if n > 1:
            inputs[:-1] = self.inputs[1:]
        return TimeSeriesData(
            dt=self.dt,
            observables=self.predicted.copy(),
            inputs=inputs,
            t0=self.t0 + (self.k0 + 1) * self.dt,
        )

    @property
    def states(self):
        p, m = self.p, self.m
        return [
            RolloutState(h=self.delays[j], g=r[:p], upsilon=r[p + m :], k=self.k0 + j)
            for j, r in enumerate(self.regressors)
        ]


def rollout(
    model: KoopmanModel,
    warmup: TimeSeriesData,
    inputs=None,
    n_steps: int | None = None,
    truth: TimeSeriesData | None = None,
    resync_period: int | None = None,
) -> Rollout:
    """Iterate the fitted model from the end of ``warmup``.

    Each step forms ``r^k = [g^k; u^k; f_lift(g^k, h^k)]``, predicts
    ``g^{k+1} = A r^k``, then shifts ``g^k`` and ``u^k`` into the delay
    buffer. The loop is closed: predictions feed the next step. In
    ``linear_full`` mode the lifted coordinates are propagated by the
    operator rather than recomputed.

    Parameters
    ----------
    warmup : TimeSeriesData
        At least ``z + 1`` samples; the last row is the current state ``g^{k0}``.
    inputs : array_like, shape (n_steps, m)
        ``inputs[j]`` is ``u^{k0+j}``, the input applied during step ``j``.
        May be omitted when ``m == 0``.
    truth : TimeSeriesData, optional
        Observables aligned with ``warmup`` (same ``t0``) used to re-seed the
        current observable from the true value every ``resync_period`` steps.
        ``resync_period=1`` gives teacher-forced one-step prediction.
    """
    z, p, m = model.embedding.z, model.p, model.m
    if warmup.q < z + 1:
        raise InsufficientHistoryError(f"warmup has {warmup.q} samples; need at least z+1={z + 1}")
    if warmup.p != p or warmup.m != m:
        raise DataError("warmup dimensions do not match the model")
    if inputs is None:
        if m and n_steps:
            raise DataError("model has inputs; supply the future input sequence")
        inputs = np.zeros((n_steps or 0, m))
    inputs = np.asarray(inputs, dtype=float).reshape(-1, m) if m else np.zeros((n_steps or 0, 0))
    if n_steps is None:
        n_steps = inputs.shape[0]
    if inputs.shape[0] < n_steps:
        raise DataError(f"input sequence covers {inputs.shape[0]} of {n_steps} steps")
    if resync_period is not None:
        if truth is None:
            raise ConfigError("resync_period needs a truth series")
        if resync_period < 1:
            raise ConfigError("resync_period must be >= 1")

    k0 = warmup.q - 1
    A = model.sensing_matrix
    N = model.n_regressors
    Mdim = model.M
    G_hist = [row.copy() for row in warmup.observables[-(z + 1) :]]
    U_hist = [row.copy() for row in warmup.inputs[-(z + 1) :]]
    g = G_hist.pop()
    U_hist.pop()

    predicted = np.empty((n_steps, p))
    regs = np.empty((n_steps, N))
    xs = np.empty((n_steps, N))
    ys = np.empty((n_steps, p))
    delays = np.empty((n_steps, Mdim))
    ups_linear = None
    for j in range(n_steps):
        k = k0 + j
        if resync_period is not None and j > 0 and j % resync_period == 0:
            g = truth.observables[k].copy()
            ups_linear = None
        u = inputs[j]
        h = np.concatenate(G_hist[::-1] + U_hist[::-1])
        # an exploding state overflows here first; the finiteness check below reports it
        with np.errstate(over="ignore", invalid="ignore"):
            if model.mode != "linear_full" or ups_linear is None:
                ups = lift_matrix(model.lift, g[None, :], h[None, :])[0]
            else:
                ups = ups_linear
            r = np.concatenate([g, u, ups])
            x = model.to_inverse_coords(r)
            y = A @ x
            g_next = model.output_from_inverse(y)
        if model.mode == "linear_full":
            ups_linear = model.operator[p:] @ x
            if model.standardized:
                rows = model._state_rows()[p:]
                ups_linear = model.target_mean[p:] + model.feature_scale[rows] * ups_linear
        if not np.all(np.isfinite(g_next)):
            raise RolloutDivergedError(f"rollout produced non-finite output at step {j}", step=j)
        regs[j] = r
        xs[j] = x
        ys[j] = y
        delays[j] = h
        predicted[j] = g_next
        G_hist.pop(0)
        G_hist.append(g)
        U_hist.pop(0)
        U_hist.append(u)
        g = g_next
    return Rollout(
        predicted=predicted,
        regressors=regs,
        inverse_X=xs,
        inverse_Y=ys,
        delays=delays,
        inputs=inputs[:n_steps].copy(),
        k0=k0,
        dt=warmup.dt,
        t0=warmup.t0,
        p=p,
        m=m,
    )


@dataclass
class PredictionBatch:
    """Matched columns of the pseudo-measurement problem ``Y = A X``."""

    Y: np.ndarray
    X: np.ndarray
    t0: int

    @property
    def T(self):
        return self.Y.shape[1]


def make_batches(ro: Rollout, T_batch: int, stride: int | None = None, projection=None):
    """Consecutive windows of ``T_batch`` rollout steps.

    Column ``j`` of ``X`` is the regressor at ``t0 + j`` and column ``j`` of
    ``Y`` the prediction it produced (observable at ``t0 + j + 1``), both in
    rollout-local indices and in the operator's coordinates. ``stride`` defaults to ``T_batch`` (disjoint,
    contiguous windows). If ``projection`` (e.g. ``Phi``) is given, the
    regressor columns are stored as ``projection.T @ r``.
    """
    n = len(ro)
    if T_batch < 1:
        raise ConfigError("T_batch must be >= 1")
    stride = T_batch if stride is None else stride
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    if T_batch > n:
        raise DataError(f"T_batch={T_batch} longer than rollout of {n} steps")
    batches = []
    for t0 in range(0, n - T_batch + 1, stride):
        X = ro.inverse_X[t0 : t0 + T_batch].T
        if projection is not None:
            X = projection.T @ X
        batches.append(
            PredictionBatch(Y=ro.inverse_Y[t0 : t0 + T_batch].T.copy(), X=X.copy(), t0=t0)
        )
    return batches
