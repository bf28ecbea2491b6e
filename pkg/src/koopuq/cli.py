"""Command-line interface.

Every subcommand reads one experiment config (``--config``; built-in
defaults otherwise), applies ``--set key=value`` overrides and writes its
artifacts into the output directory. Exit codes: 0 success, 2 config
error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig, apply_overrides, dump_config, load_config
from .data import TimeSeriesData
from .errors import ConfigError, DataError, KoopUQError
from .io import (
    load_model,
    read_timeseries_csv,
    save_model,
    write_ftle_csv,
    write_report,
    write_timeseries_csv,
    write_trace_csv,
    write_window_csv,
)
from .pipeline import build_data, fit, ftle_for, segments, split_data, uq_config
from .predictor import rollout
from .uq import run_uq, sweep_batch_sizes, trace_step

log = logging.getLogger("koopuq")

DATA_FILE = "data.csv"
MODEL_FILE = "model.kqm"


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    cfg = apply_overrides(cfg, args.set)
    if args.output:
        cfg = apply_overrides(cfg, [f"output_dir={args.output}"])
    return cfg


def _outdir(cfg):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data(cfg, args):
    path = Path(args.data) if getattr(args, "data", None) else Path(cfg.output_dir) / DATA_FILE
    if path.is_file():
        return read_timeseries_csv(path)
    if getattr(args, "data", None):
        raise DataError(f"{path}: data file not found")
    log.info("no %s found; generating the series from the config", path)
    return build_data(cfg)


def _model(cfg, args):
    path = Path(args.model) if args.model else Path(cfg.output_dir) / MODEL_FILE
    if not path.is_file():
        raise DataError(f"{path}: model artifact not found; run 'fit' first")
    return load_model(path)


def _write_json(path, obj):
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def cmd_simulate(cfg, args):
    if cfg.system == "external":
        raise ConfigError("'simulate' needs system neuron or hopf")
    data = build_data(cfg)
    out = _outdir(cfg)
    data.meta["observable_names"] = ["V", "q"] if cfg.system == "neuron" else ["x1"]
    data.meta["state_names"] = ["V", "q", "n", "w"] if cfg.system == "neuron" else ["x1", "x2"]
    data.meta["input_names"] = ["u"] if cfg.system == "neuron" else []
    write_timeseries_csv(out / DATA_FILE, data)
    print(f"wrote {out / DATA_FILE} ({data.q} rows)")


def cmd_fit(cfg, args):
    data = _data(cfg, args)
    train, _ = split_data(cfg, data)
    model = fit(cfg, train)
    out = _outdir(cfg)
    save_model(out / MODEL_FILE, model)
    summary = {
        "mode": model.mode,
        "L": model.L,
        "n_regressors": model.n_regressors,
        "zeta": None if model.pod is None else model.pod.zeta,
        "pod_energy_fraction": None if model.pod is None else model.pod.energy_fraction,
        "residual_variance": model.residual_variance,
        "residual_rms": model.meta.get("residual_rms"),
        "n_snapshots": model.meta.get("n_snapshots"),
    }
    _write_json(out / "fit_summary.json", summary)
    print(f"wrote {out / MODEL_FILE} (L={model.L}, mode={model.mode})")


def cmd_predict(cfg, args):
    data = _data(cfg, args)
    model = _model(cfg, args)
    _, ev = split_data(cfg, data)
    seg = segments(cfg, data.dt)
    k0 = seg.warmup - 1
    ro = rollout(model, ev.slice(0, seg.warmup), inputs=ev.inputs[k0 : k0 + seg.predict], n_steps=seg.predict)
    pred = ro.series
    truth = ev.slice(seg.warmup, seg.warmup + seg.predict)
    # truth rows for the warmup, then predicted rows; true values kept alongside
    warm = ev.slice(0, seg.warmup)
    obs = np.vstack([warm.observables, pred.observables])
    inputs = np.vstack([warm.inputs, truth.inputs])
    names = data.meta.get("observable_names") or [f"g{i}" for i in range(data.p)]
    merged = TimeSeriesData(
        dt=data.dt,
        observables=np.hstack([obs, np.vstack([warm.observables, truth.observables])]),
        inputs=inputs,
        t0=ev.t0,
        meta={
            "observable_names": list(names) + [f"{n}_true" for n in names],
            "input_names": data.meta.get("input_names") or [f"u{i}" for i in range(data.m)],
        },
    )
    out = _outdir(cfg)
    region = ["truth"] * seg.warmup + ["predicted"] * seg.predict
    write_timeseries_csv(out / "prediction.csv", merged, region=region)
    err = pred.observables - truth.observables
    rms = np.sqrt(np.mean(err**2, axis=0))
    _write_json(out / "prediction_summary.json", {"rms_error": rms.tolist(), "n_steps": seg.predict})
    print(f"wrote {out / 'prediction.csv'} (rms error {', '.join(f'{r:.6g}' for r in rms)})")


def _uq_inputs(cfg, args):
    data = _data(cfg, args)
    model = _model(cfg, args)
    _, ev = split_data(cfg, data)
    return model, ev, segments(cfg, data.dt).warmup


def cmd_uq(cfg, args):
    model, ev, warm = _uq_inputs(cfg, args)
    ucfg = uq_config(cfg, T_batch=args.T_batch)
    report = run_uq(model, ev, ucfg, warmup=warm)
    out = _outdir(cfg)
    write_report(out, report)
    if args.trace:
        res = trace_step(model, ev, ucfg, step=args.trace_step, warmup=warm)
        write_trace_csv(args.trace, res.trace)
        print(f"wrote solver trace for step {args.trace_step} to {args.trace} ({res.iterations_run} iterations)")
    print(
        f"wrote report.json, variance_vs_time.csv, window_vs_batchsize.csv to {out} "
        f"({len(report.per_batch)} batches of {report.T_batch})"
    )


def _batch_sizes(text):
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--batch-sizes expects comma-separated integers, got {text!r}") from None
    if not sizes or any(s < 1 for s in sizes):
        raise ConfigError(f"--batch-sizes must be positive integers, got {text!r}")
    return sizes


def cmd_sweep(cfg, args):
    sizes = _batch_sizes(args.batch_sizes) if args.batch_sizes else list(cfg.uq.batch_sizes)
    model, ev, warm = _uq_inputs(cfg, args)
    curve, reports = sweep_batch_sizes(model, ev, uq_config(cfg), sizes, warmup=warm)
    out = _outdir(cfg)
    write_window_csv(out / "window_vs_batchsize.csv", curve)
    T = cfg.uq.T_batch if cfg.uq.T_batch in reports else sizes[0]
    write_report(out, reports[T], window_curve=curve)
    print(f"wrote {out / 'window_vs_batchsize.csv'} ({len(sizes)} batch sizes x {len(cfg.uq.thresholds)} thresholds)")


def cmd_ftle(cfg, args):
    data = _data(cfg, args)
    ft = ftle_for(cfg, data, window=args.window)
    out = _outdir(cfg)
    write_ftle_csv(out / "ftle.csv", ft)
    print(f"wrote {out / 'ftle.csv'} ({len(ft.lam)} rows, window {ft.window:g})")


def cmd_config(cfg, args):
    sys.stdout.write(dump_config(cfg, fmt=args.format))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="experiment config (YAML or JSON)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
    common.add_argument("-o", "--output", help="output directory (overrides output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="koopuq", description="Koopman model identification with VAMP-based uncertainty scores.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate the configured system to data.csv")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", parents=[common], help="fit a model and save model.kqm")
    s.add_argument("--data", help="time-series CSV (default: <output>/data.csv)")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("predict", parents=[common], help="roll the model over the prediction region")
    s.add_argument("--data")
    s.add_argument("--model", help="model artifact (default: <output>/model.kqm)")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("uq", parents=[common], help="batch posterior variances for one batch size")
    s.add_argument("--data")
    s.add_argument("--model")
    s.add_argument("--T-batch", dest="T_batch", type=int, help="batch length (default: uq.T_batch)")
    s.add_argument("--trace", metavar="PATH", help="also write the per-iteration solver trace of one step as CSV")
    s.add_argument("--trace-step", dest="trace_step", type=int, default=0, help="prediction step to trace (default 0)")
    s.set_defaults(func=cmd_uq)

    s = sub.add_parser("sweep", parents=[common], help="uncertainty window versus batch size")
    s.add_argument("--data")
    s.add_argument("--model")
    s.add_argument("--batch-sizes", help="comma-separated, e.g. 5,10,20,50,100")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("ftle", parents=[common], help="finite-time Lyapunov exponents along the trajectory")
    s.add_argument("--data")
    s.add_argument("--window", type=float, help="backward horizon (default: ftle.window or one batch)")
    s.set_defaults(func=cmd_ftle)

    s = sub.add_parser("config", parents=[common], help="print the resolved config in canonical form")
    s.add_argument("--format", choices=("yaml", "json"), default="yaml")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        cfg = _config(args)
        args.func(cfg, args)
    except KoopUQError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
