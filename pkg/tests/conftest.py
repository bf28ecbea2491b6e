"""Shared fixtures: the two configured pipelines, each run once per session."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from koopuq.config import load_config
from koopuq.pipeline import build_data, fit, ftle_for, segments, split_data, uq_config
from koopuq.uq import prepare, sweep_batch_sizes

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@dataclass
class PipelineRun:
    cfg: object
    data: object
    train: object
    ev: object
    warmup: int
    model: object
    ucfg: object
    curve: dict
    reports: dict


def run_pipeline(name):
    cfg = load_config(CONFIGS / f"{name}.yaml")
    data = build_data(cfg)
    train, ev = split_data(cfg, data)
    warm = segments(cfg, data.dt).warmup
    model = fit(cfg, train)
    ucfg = uq_config(cfg)
    curve, reports = sweep_batch_sizes(model, ev, ucfg, cfg.uq.batch_sizes, warmup=warm)
    return PipelineRun(cfg, data, train, ev, warm, model, ucfg, curve, reports)


def batch_max_ftle(report, ftle, dt):
    """Largest FTLE inside each batch's prediction interval."""
    out = []
    for b in report.per_batch:
        t_lo = b.time + dt
        t_hi = t_lo + (report.T_batch - 1) * dt
        sel = (ftle.times >= t_lo - 1e-9) & (ftle.times <= t_hi + 1e-9)
        out.append(np.max(ftle.lam[sel]) if sel.any() else np.nan)
    return np.array(out)


@pytest.fixture(scope="session")
def hopf_run():
    return run_pipeline("hopf")


@pytest.fixture(scope="session")
def neuron_run():
    return run_pipeline("neuron")


@pytest.fixture(scope="session")
def neuron_ftle(neuron_run):
    return ftle_for(neuron_run.cfg, neuron_run.data)


@pytest.fixture(scope="session")
def neuron_prepared(neuron_run):
    return prepare(neuron_run.model, neuron_run.ev, neuron_run.ucfg, warmup=neuron_run.warmup)


ACCEPTANCE = {}


@pytest.fixture
def record():
    """``record(key, ok, detail)`` stores one acceptance line for the summary."""

    def _record(key, ok, detail):
        line = f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[key] = line
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    order = lambda k: (int("".join(c for c in k if c.isdigit())), k)  # noqa: E731
    for key in sorted(ACCEPTANCE, key=order):
        terminalreporter.write_line(ACCEPTANCE[key])
