"""Glue between a :class:`PipelineConfig` and the numerical modules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import PipelineConfig
from .data import TimeSeriesData
from .errors import ConfigError, DataError
from .io import ingest_csv, project_pod_observables, read_timeseries_csv
from .koopman import EmbeddingConfig, KoopmanModel, LiftSpec, draw_rbf_centers, fit_model
from .sim import (
    HopfParams,
    HopfState,
    NeuronParams,
    NeuronState,
    compute_ftle,
    hopf_drift,
    hopf_jacobian,
    simulate_hopf,
    simulate_neuron,
)
from .uq import UqConfig
from .vamp import PriorSpec, VampOptions


@dataclass
class Segments:
    """Index bookkeeping of one experiment, in samples."""

    burn_in: int
    train: int
    predict: int
    warmup: int

    @property
    def start(self):
        # index of the last sample before the prediction region
        return self.burn_in + self.train

    @property
    def total(self):
        return self.start + self.predict + 1


def neuron_input(cfg: PipelineConfig):
    inp = cfg.neuron.input
    if inp.kind == "none":
        return None
    if inp.kind == "constant":
        return float(inp.offset)
    A, P, c, off = inp.amplitude, inp.period, inp.chirp, inp.offset
    return lambda t: A * np.sin(2 * np.pi * t / P + c * t * t) + off


def segments(cfg: PipelineConfig, dt: float) -> Segments:
    s = cfg.split
    warm = cfg.model.z + 1 if s.warmup is None else s.warmup
    if warm < cfg.model.z + 1:
        raise ConfigError(f"split.warmup={warm} is shorter than z+1={cfg.model.z + 1}")
    seg = Segments(
        burn_in=int(round(s.burn_in / dt)),
        train=int(round(s.train / dt)),
        predict=int(round(s.predict / dt)),
        warmup=warm,
    )
    if seg.predict < 1 or seg.train < 2:
        raise ConfigError("split durations are shorter than the sample interval")
    return seg


def neuron_params(cfg: PipelineConfig):
    try:
        return NeuronParams(**cfg.neuron.params), NeuronState(**cfg.neuron.initial_state)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"neuron section: {exc}") from None


def hopf_params(cfg: PipelineConfig):
    h = cfg.hopf
    return HopfParams(mu=h.mu, rho=h.rho, sigma=h.sigma, D=h.D), HopfState(*h.x0)


def build_data(cfg: PipelineConfig) -> TimeSeriesData:
    """Simulate (or load) the full series the experiment works on."""
    if cfg.system == "neuron":
        seg = segments(cfg, cfg.neuron.dt)
        P, x0 = neuron_params(cfg)
        return simulate_neuron(
            P, x0, u=neuron_input(cfg), dt=cfg.neuron.dt, n_steps=seg.total - 1, substeps=cfg.neuron.substeps
        )
    if cfg.system == "hopf":
        P, x0 = hopf_params(cfg)
        seg = segments(cfg, cfg.hopf.dt)
        return simulate_hopf(
            P, x0, dt=cfg.hopf.dt, n_steps=seg.total - 1, seed=cfg.seed, substeps=cfg.hopf.substeps
        )
    ext = cfg.external
    if ext.n_modes is not None:
        snaps = ingest_csv(ext.path, ext.nan_policy)
        return project_pod_observables(snaps, ext.n_modes).series
    return read_timeseries_csv(ext.path, ext.nan_policy)


def split_data(cfg: PipelineConfig, data: TimeSeriesData):
    """Return ``(train, evaluation)`` slices.

    The evaluation slice starts ``warmup`` samples before the prediction
    region so it can seed the delay buffer.
    """
    seg = segments(cfg, data.dt)
    if data.q < seg.total:
        raise DataError(
            f"series has {data.q} samples; the split needs {seg.total} "
            f"(burn-in {seg.burn_in}, train {seg.train}, predict {seg.predict} + 1)"
        )
    train = data.slice(seg.burn_in, seg.start)
    evaluation = data.slice(seg.start - seg.warmup + 1, seg.start + 1 + seg.predict)
    return train, evaluation


def lift_spec(cfg: PipelineConfig, p: int) -> LiftSpec:
    lc = cfg.model.lift
    centers = None
    if lc.kind == "rbf_then_polynomial":
        if len(lc.rbf_ranges) != p:
            raise ConfigError(f"lift.rbf_ranges has {len(lc.rbf_ranges)} entries; the data has {p} observables")
        centers = draw_rbf_centers(lc.rbf_count, lc.rbf_ranges, lc.rbf_seed)
    return LiftSpec(
        kind=lc.kind,
        max_degree=lc.max_degree,
        include_linear=lc.include_linear,
        use_history=lc.use_history,
        rbf_count=lc.rbf_count,
        rbf_centers=centers,
        max_dim=lc.max_dim,
    )


def fit(cfg: PipelineConfig, train: TimeSeriesData) -> KoopmanModel:
    mc = cfg.model
    model = fit_model(
        train,
        EmbeddingConfig(mc.z),
        lift_spec(cfg, train.p),
        mode=mc.mode,
        zeta=mc.zeta if mc.mode == "nonlinear_pod" else None,
        rcond=mc.rcond,
        standardize=mc.standardize,
    )
    model.meta["system"] = cfg.system
    return model


def uq_config(cfg: PipelineConfig, T_batch=None) -> UqConfig:
    u = cfg.uq
    v = u.vamp
    return UqConfig(
        T_batch=u.T_batch if T_batch is None else T_batch,
        thresholds=tuple(u.thresholds),
        prior=PriorSpec(
            kind=u.prior.kind, mean=u.prior.mean, variance=u.prior.variance, sparsity_rho=u.prior.sparsity_rho
        ),
        noise_precision=u.noise_precision,
        vamp=VampOptions(
            max_iters=v.max_iters,
            damping=v.damping,
            tol=v.tol,
            gamma_floor=v.gamma_floor,
            gamma_ceiling=v.gamma_ceiling,
            path=v.path,
        ),
        stride=u.stride,
        projected=u.projected,
        joint=u.joint,
    )


def ftle_for(cfg: PipelineConfig, data: TimeSeriesData, window=None):
    """FTLE along a simulated trajectory of the configured system."""
    if data.states is None:
        raise DataError("FTLE needs the full simulator state")
    dt = data.dt
    w = window or cfg.ftle.window or cfg.uq.T_batch * dt
    if cfg.system == "neuron":
        P, _ = neuron_params(cfg)
        return compute_ftle(P, data, w, output_selector=cfg.ftle.output_selector)
    if cfg.system == "hopf":
        P, _ = hopf_params(cfg)
        sel = [i for i in cfg.ftle.output_selector if i < 2] or [0]
        return compute_ftle(
            None,
            data,
            w,
            output_selector=sel,
            jacobian=lambda t, x: hopf_jacobian(P, x),
            rhs=lambda t, x, u: hopf_drift(P, x),
        )
    raise ConfigError("FTLE is only defined for the simulated systems")
