"""Prediction-error quantification through a Bayesian inverse problem.

A fitted model is rolled forward, its predictions are grouped into batches
``Y = A X`` and each batch is inverted with VAMP. The scalar posterior
variance of the recovered regressors, divided by the prior variance, is the
uncertainty score of the batch. Batches whose score exceeds a threshold are
flagged, and the share of prediction steps covered by flagged batches is the
uncertainty window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import TimeSeriesData
from .errors import ConfigError, DataError, InsufficientHistoryError, SolverDivergedError
from .koopman import KoopmanModel
from .predictor import PredictionBatch, Rollout, make_batches, rollout
from .vamp import PriorSpec, SensingModel, VampOptions, vamp_solve, vamp_solve_columns


@dataclass(frozen=True)
class UqConfig:
    """Settings for one uncertainty-quantification run.

    Parameters
    ----------
    T_batch : int
        Prediction steps per batch.
    thresholds : sequence of float
        Strictly increasing values in (0, 1), compared with the normalized
        posterior variance.
    prior : PriorSpec
        Prior on each regressor entry (in the operator's coordinates).
    noise_precision : float, optional
        ``gamma_w``. Defaults to the inverse of the model's one-step training
        residual variance.
    vamp : VampOptions
    stride : int, optional
        Batch stride; ``None`` means ``T_batch`` (a partition).
    projected : bool
        Invert ``Y = A_R C`` for the POD coefficients ``C`` instead of the
        full regressors. Only meaningful for ``nonlinear_pod`` models.
    joint : bool
        Solve each batch as one stacked problem with shared scalar
        precisions instead of column by column.
    """

    T_batch: int = 20
    thresholds: tuple = (0.1, 0.3, 0.5, 0.7, 0.9)
    prior: PriorSpec = field(default_factory=PriorSpec)
    noise_precision: float | None = None
    vamp: VampOptions = field(default_factory=VampOptions)
    stride: int | None = None
    projected: bool = False
    joint: bool = False

    def __post_init__(self):
        if int(self.T_batch) != self.T_batch or self.T_batch < 1:
            raise ConfigError(f"T_batch must be a positive integer, got {self.T_batch}")
        th = tuple(float(t) for t in self.thresholds)
        if not th:
            raise ConfigError("at least one threshold is required")
        if any(not 0 < t < 1 for t in th):
            raise ConfigError(f"thresholds must lie in (0, 1), got {th}")
        if any(b <= a for a, b in zip(th, th[1:])):
            raise ConfigError(f"thresholds must be strictly increasing, got {th}")
        object.__setattr__(self, "thresholds", th)
        if self.noise_precision is not None and not self.noise_precision > 0:
            raise ConfigError("noise_precision must be positive")
        if self.stride is not None and self.stride < 1:
            raise ConfigError("stride must be >= 1")

    def with_batch(self, T_batch):
        return UqConfig(
            T_batch=T_batch,
            thresholds=self.thresholds,
            prior=self.prior,
            noise_precision=self.noise_precision,
            vamp=self.vamp,
            stride=self.stride,
            projected=self.projected,
            joint=self.joint,
        )


@dataclass
class BatchRecord:
    t0: int
    time: float
    variance: float
    normalized: float
    flags: tuple
    converged: float
    error: float | None = None


@dataclass
class UncertaintyReport:
    """Per-batch scores and window percentages of one run.

    ``t0`` of a record is the rollout-local index of the batch's first
    column; ``time`` is the time stamp of the regressor in that column.
    ``per_step_error[j]`` is ``||g_hat - g_true||`` for prediction ``j``.
    ``window_curve`` maps batch size to ``{threshold: percent}``.
    """

    T_batch: int
    thresholds: tuple
    prior_variance: float
    noise_precision: float
    per_batch: list
    n_steps: int
    per_step_error: np.ndarray | None = None
    prediction_times: np.ndarray | None = None
    window_curve: dict = field(default_factory=dict)

    @property
    def variances(self):
        return np.array([b.variance for b in self.per_batch])

    @property
    def normalized(self):
        return np.array([b.normalized for b in self.per_batch])

    @property
    def flags(self):
        return np.array([b.flags for b in self.per_batch], dtype=bool).reshape(-1, len(self.thresholds))

    def window(self, threshold=None):
        """Uncertainty window (percent) at one threshold, or all as a dict."""
        if threshold is None:
            return dict(self.window_curve[self.T_batch])
        return self.window_curve[self.T_batch][float(threshold)]

    def to_dict(self):
        out = {
            "T_batch": self.T_batch,
            "thresholds": list(self.thresholds),
            "prior_variance": self.prior_variance,
            "noise_precision": self.noise_precision,
            "n_steps": self.n_steps,
            "per_batch": [
                {
                    "t0": b.t0,
                    "time": b.time,
                    "variance": b.variance,
                    "normalized": b.normalized,
                    "flags": list(b.flags),
                    "converged_fraction": b.converged,
                    "error": b.error,
                }
                for b in self.per_batch
            ],
            "window_curve": {
                str(T): {repr(th): pct for th, pct in curve.items()}
                for T, curve in sorted(self.window_curve.items())
            },
        }
        if self.per_step_error is not None:
            out["per_step_error"] = self.per_step_error.tolist()
        return out


def uncertainty_window(starts, T_batch, flags, n_steps):
    """Percent of covered prediction steps that lie in a flagged batch.

    ``starts`` are batch start indices, ``flags`` a boolean array with one
    entry per batch. Steps not covered by any batch (a tail shorter than
    ``T_batch``) are excluded from numerator and denominator.
    """
    covered = np.zeros(n_steps, dtype=bool)
    hit = np.zeros(n_steps, dtype=bool)
    for t0, f in zip(starts, flags):
        covered[t0 : t0 + T_batch] = True
        if f:
            hit[t0 : t0 + T_batch] = True
    total = int(covered.sum())
    if total == 0:
        raise DataError("no prediction step is covered by a batch")
    return 100.0 * int(hit.sum()) / total


def _sensing(model: KoopmanModel, cfg: UqConfig):
    if cfg.projected:
        if model.mode != "nonlinear_pod":
            raise ConfigError("projected inversion needs a nonlinear_pod model")
        return model.operator, model.pod.Phi
    return model.sensing_matrix, None


def _noise_precision(model: KoopmanModel, cfg: UqConfig):
    if cfg.noise_precision is not None:
        return float(cfg.noise_precision)
    rv = model.residual_variance
    if not np.isfinite(rv) or rv <= 0:
        raise ConfigError(
            "model has no positive residual variance; set noise_precision explicitly"
        )
    return 1.0 / rv


def solve_batch_inverse(batch: PredictionBatch, A, cfg: UqConfig, noise_precision=None, index=None):
    """Invert one batch with VAMP.

    Each column of ``batch.Y`` is solved as its own instance with the shared
    sensing matrix (or, with ``cfg.joint``, all columns share one scalar
    precision). Returns ``(X_hat, variance, converged_fraction)`` where
    ``variance`` is the mean of the per-column posterior variances.

    ``A`` may be an array or a prepared :class:`SensingModel`; for an array
    the noise precision comes from ``noise_precision`` or the config.
    """
    if isinstance(A, SensingModel):
        sm = A
    else:
        gw = noise_precision if noise_precision is not None else cfg.noise_precision
        if gw is None:
            raise ConfigError("noise precision is required to build the sensing model")
        sm = SensingModel(np.asarray(A, dtype=float), gw)
    M, N = sm.shape
    if batch.X.shape[0] != N:
        raise DataError(f"sensing matrix has {N} columns but batch regressors have {batch.X.shape[0]} rows")
    if batch.Y.shape[0] != M:
        raise DataError(f"sensing matrix has {M} rows but batch outputs have {batch.Y.shape[0]}")
    try:
        X_hat, var, _, done = vamp_solve_columns(sm, batch.Y, cfg.prior, cfg.vamp, shared=cfg.joint)
    except SolverDivergedError as exc:
        where = f"batch {index} (t0={batch.t0})" if index is not None else f"batch t0={batch.t0}"
        raise SolverDivergedError(f"{where}: {exc}", step=exc.step, trace=exc.trace) from exc
    return X_hat, float(np.mean(var)), float(np.mean(done))


@dataclass
class _Prepared:
    ro: Rollout
    truth_obs: np.ndarray | None
    times: np.ndarray
    sensing: SensingModel
    projection: np.ndarray | None
    column_var: np.ndarray | None = None
    column_done: np.ndarray | None = None


def _split(model: KoopmanModel, truth: TimeSeriesData, warmup):
    z = model.embedding.z
    warmup = z + 1 if warmup is None else int(warmup)
    if warmup < z + 1:
        raise InsufficientHistoryError(f"warmup of {warmup} samples is shorter than z+1={z + 1}")
    if truth.q < warmup + 1:
        raise InsufficientHistoryError(
            f"series has {truth.q} samples; need warmup {warmup} plus at least one prediction"
        )
    return warmup


def prepare(model: KoopmanModel, truth: TimeSeriesData, cfg: UqConfig, warmup=None, n_steps=None):
    """Roll the model forward over ``truth`` and build the sensing model.

    The first ``warmup`` samples (default ``z + 1``) seed the delay buffer;
    predictions then run to the end of ``truth`` or for ``n_steps``.
    """
    warmup = _split(model, truth, warmup)
    k0 = warmup - 1
    avail = truth.q - warmup
    n = avail if n_steps is None else int(n_steps)
    if n < 1 or n > avail:
        raise DataError(f"n_steps={n} outside 1..{avail} for this series")
    ro = rollout(model, truth.slice(0, warmup), inputs=truth.inputs[k0 : k0 + n], n_steps=n)
    A, proj = _sensing(model, cfg)
    sm = SensingModel(A, _noise_precision(model, cfg))
    truth_obs = truth.observables[k0 + 1 : k0 + 1 + n]
    times = truth.t0 + truth.dt * (k0 + np.arange(n))
    return _Prepared(ro=ro, truth_obs=truth_obs, times=times, sensing=sm, projection=proj)


def _columns(prep: _Prepared, cfg: UqConfig):
    # per-column solves do not depend on batching, so do them once
    if prep.column_var is None:
        X = prep.ro.inverse_Y.T
        try:
            _, var, _, done = vamp_solve_columns(prep.sensing, X, cfg.prior, cfg.vamp, shared=False)
        except SolverDivergedError as exc:
            raise SolverDivergedError(f"column solve: {exc}", step=exc.step) from exc
        prep.column_var, prep.column_done = var, done.astype(float)
    return prep.column_var, prep.column_done


def _report(prep: _Prepared, cfg: UqConfig) -> UncertaintyReport:
    ro = prep.ro
    n = len(ro)
    T = cfg.T_batch
    if T > n:
        raise DataError(f"T_batch={T} longer than the {n}-step prediction horizon")
    prior_var = cfg.prior.total_variance
    err = np.linalg.norm(ro.predicted - prep.truth_obs, axis=1) if prep.truth_obs is not None else None
    records = []
    if cfg.joint:
        batches = make_batches(ro, T, cfg.stride, projection=prep.projection)
        for i, b in enumerate(batches):
            _, var, conv = solve_batch_inverse(b, prep.sensing, cfg, index=i)
            records.append((b.t0, var, conv))
    else:
        cv, cd = _columns(prep, cfg)
        stride = T if cfg.stride is None else cfg.stride
        for t0 in range(0, n - T + 1, stride):
            records.append((t0, float(np.mean(cv[t0 : t0 + T])), float(np.mean(cd[t0 : t0 + T]))))
    per_batch = []
    for t0, var, conv in records:
        nv = var / prior_var
        per_batch.append(
            BatchRecord(
                t0=t0,
                time=float(prep.times[t0]),
                variance=var,
                normalized=nv,
                flags=tuple(bool(nv > th) for th in cfg.thresholds),
                converged=conv,
                error=None if err is None else float(np.mean(err[t0 : t0 + T])),
            )
        )
    report = UncertaintyReport(
        T_batch=T,
        thresholds=cfg.thresholds,
        prior_variance=prior_var,
        noise_precision=prep.sensing.noise_precision,
        per_batch=per_batch,
        n_steps=n,
        per_step_error=err,
        prediction_times=prep.times + ro.dt,
    )
    starts = [b.t0 for b in per_batch]
    flags = report.flags
    report.window_curve[T] = {
        th: uncertainty_window(starts, T, flags[:, i], n) for i, th in enumerate(cfg.thresholds)
    }
    return report


def run_uq(model: KoopmanModel, truth: TimeSeriesData, cfg: UqConfig, warmup=None, n_steps=None):
    """Rollout, batch, invert and score.

    Parameters
    ----------
    model : KoopmanModel
    truth : TimeSeriesData
        Measured series. The first ``warmup`` samples start the rollout; the
        inputs of the remaining samples drive it and their observables are
        used for the per-step error.
    cfg : UqConfig
    """
    return _report(prepare(model, truth, cfg, warmup, n_steps), cfg)


def trace_step(model: KoopmanModel, truth: TimeSeriesData, cfg: UqConfig, step=0, warmup=None):
    """Solve the inverse problem of one prediction step and return the :class:`VampResult`.

    Used for convergence diagnostics; the result carries the per-iteration trace.
    """
    prep = prepare(model, truth, cfg, warmup)
    if not 0 <= step < len(prep.ro):
        raise DataError(f"step {step} outside 0..{len(prep.ro) - 1}")
    return vamp_solve(prep.sensing, prep.ro.inverse_Y[step], cfg.prior, cfg.vamp)


def sweep_batch_sizes(model, truth, cfg: UqConfig, batch_sizes, warmup=None, n_steps=None):
    """Uncertainty window versus batch size.

    Returns ``(window_curve, reports)`` where ``window_curve`` maps each
    batch size to ``{threshold: percent}`` and ``reports`` holds the
    individual :class:`UncertaintyReport` objects. The rollout is shared by
    all batch sizes.
    """
    sizes = [int(b) for b in batch_sizes]
    if not sizes or any(b < 1 for b in sizes):
        raise ConfigError(f"batch sizes must be positive integers, got {batch_sizes}")
    prep = prepare(model, truth, cfg, warmup, n_steps)
    curve, reports = {}, {}
    for T in sizes:
        rep = _report(prep, cfg.with_batch(T))
        curve[T] = rep.window_curve[T]
        reports[T] = rep
    return curve, reports
