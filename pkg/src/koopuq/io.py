"""File formats: time-series CSV, snapshot CSV, model artifacts, reports.

Time-series and snapshot CSV files share one layout. Leading ``#`` lines
carry ``key=value`` metadata (``dt`` is required), then one header row
names the columns with a role prefix:

``t``          time stamp
``x:<name>``   raw state entry
``g:<name>``   observable
``u:<name>``   input
``region``     free-text tag (``truth`` / ``predicted`` in prediction exports)

Numbers are written with ``repr`` so a write/read round trip is exact and
independent of the locale. See ``docs/formats.md`` for the full description.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import TimeSeriesData
from .errors import DataError
from .koopman import EmbeddingConfig, KoopmanModel, LiftSpec, PodBasis, numerical_rank

CSV_MAGIC = "koopuq-csv"
CSV_VERSION = 1
ROLES = ("x", "g", "u")

MODEL_MAGIC = b"KOOPUQM\x00"
MODEL_VERSION = 1


def _fmt(v):
    return repr(float(v))


# CSV =========================================================================
@dataclass
class _Table:
    meta: dict
    columns: list
    values: np.ndarray
    tags: list | None


def _parse_table(path, nan_policy="reject") -> _Table:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    if nan_policy not in ("reject", "allow"):
        raise DataError(f"unknown nan_policy {nan_policy!r}")
    meta = {}
    with path.open(newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    line_no = 0
    while line_no < len(lines) and lines[line_no].startswith("#"):
        for tok in lines[line_no][1:].split():
            if "=" in tok:
                k, v = tok.split("=", 1)
                meta[k] = v
        line_no += 1
    if line_no >= len(lines):
        raise DataError(f"{path}: missing header row")
    header = next(csv.reader([lines[line_no]]))
    header = [h.strip() for h in header]
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    for name in header:
        if name not in ("t", "region") and name.split(":", 1)[0] not in ROLES:
            raise DataError(f"{path}: column {name!r} has no recognised role prefix")
    tag_col = header.index("region") if "region" in header else None
    num_idx = [i for i, h in enumerate(header) if h != "region"]
    rows, tags = [], []
    first_data_line = line_no + 2  # 1-based file line of data row 1
    for i, rec in enumerate(csv.reader(lines[line_no + 1 :])):
        row_no = i + 1
        if not rec or all(not c.strip() for c in rec):
            continue
        if len(rec) != len(header):
            raise DataError(
                f"{path}: row {row_no} (line {first_data_line + i}) has {len(rec)} fields; "
                f"expected {len(header)}"
            )
        vals = []
        for j in num_idx:
            cell = rec[j].strip()
            try:
                v = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: row {row_no} (line {first_data_line + i}), column {header[j]!r}: "
                    f"not a number: {cell!r}"
                ) from None
            if nan_policy == "reject" and not np.isfinite(v):
                raise DataError(
                    f"{path}: row {row_no} (line {first_data_line + i}), column {header[j]!r}: "
                    f"non-finite value {cell!r}"
                )
            vals.append(v)
        rows.append(vals)
        if tag_col is not None:
            tags.append(rec[tag_col].strip())
    columns = [header[j] for j in num_idx]
    values = np.array(rows, dtype=float).reshape(len(rows), len(columns))
    if "dt" not in meta:
        raise DataError(f"{path}: metadata line must declare dt=<value>")
    return _Table(meta=meta, columns=columns, values=values, tags=tags if tag_col is not None else None)


def _role_block(table: _Table, role):
    idx = [i for i, c in enumerate(table.columns) if c.startswith(role + ":")]
    names = [table.columns[i].split(":", 1)[1] for i in idx]
    return table.values[:, idx], names


def _meta_float(table, key, path, default=None):
    if key not in table.meta:
        if default is None:
            raise DataError(f"{path}: metadata is missing {key}")
        return default
    try:
        return float(table.meta[key])
    except ValueError:
        raise DataError(f"{path}: metadata {key}={table.meta[key]!r} is not a number") from None


def read_timeseries_csv(path, nan_policy="reject") -> TimeSeriesData:
    """Load a series written by :func:`write_timeseries_csv` (or by hand)."""
    tab = _parse_table(path, nan_policy)
    if tab.values.shape[0] == 0:
        raise DataError(f"{path}: no data rows")
    dt = _meta_float(tab, "dt", path)
    G, gnames = _role_block(tab, "g")
    if not gnames:
        raise DataError(f"{path}: no observable (g:) columns")
    U, unames = _role_block(tab, "u")
    X, xnames = _role_block(tab, "x")
    t0 = tab.values[0, tab.columns.index("t")] if "t" in tab.columns else _meta_float(tab, "t0", path, 0.0)
    meta = {"observable_names": gnames, "input_names": unames}
    if xnames:
        meta["state_names"] = xnames
    if tab.tags is not None:
        meta["region"] = tab.tags
    for k, v in tab.meta.items():
        if k not in ("dt", "t0", CSV_MAGIC):
            meta.setdefault(k, v)
    return TimeSeriesData(dt=dt, observables=G, inputs=U, states=X if xnames else None, t0=t0, meta=meta)


def _write_table(path, meta: dict, columns, values, tags=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {CSV_MAGIC}={CSV_VERSION} " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(columns) + (["region"] if tags is not None else []))
        for i, row in enumerate(values):
            out = [_fmt(v) for v in row]
            if tags is not None:
                out.append(tags[i])
            w.writerow(out)


def _names(data, key, prefix, n):
    names = data.meta.get(key)
    if names is None or len(names) != n:
        names = [f"{prefix}{i}" for i in range(n)]
    return list(names)


def write_timeseries_csv(path, data: TimeSeriesData, region=None):
    """Write one row per sample: ``t, x:..., g:..., u:...[, region]``."""
    cols = ["t"]
    blocks = [data.times[:, None]]
    if data.states is not None:
        cols += ["x:" + n for n in _names(data, "state_names", "x", data.states.shape[1])]
        blocks.append(data.states)
    cols += ["g:" + n for n in _names(data, "observable_names", "g", data.p)]
    blocks.append(data.observables)
    cols += ["u:" + n for n in _names(data, "input_names", "u", data.m)]
    blocks.append(data.inputs)
    if region is not None and len(region) != data.q:
        raise DataError("region tags must have one entry per row")
    _write_table(path, {"dt": _fmt(data.dt)}, cols, np.hstack(blocks), region)


@dataclass
class SnapshotDataset:
    """Raw state snapshots (e.g. pixel intensities), one row per time step."""

    dt: float
    snapshots: np.ndarray
    inputs: np.ndarray = None
    t0: float = 0.0
    names: list = field(default_factory=list)
    input_names: list = field(default_factory=list)

    def __post_init__(self):
        X = np.asarray(self.snapshots, dtype=float)
        if X.ndim != 2:
            raise DataError(f"snapshots must be a 2-D array, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise DataError("snapshots contain non-finite entries")
        self.snapshots = X
        U = np.zeros((X.shape[0], 0)) if self.inputs is None else np.asarray(self.inputs, dtype=float)
        if U.ndim == 1:
            U = U[:, None]
        if U.shape[0] != X.shape[0]:
            raise DataError("snapshots and inputs differ in length")
        self.inputs = U
        if not self.dt > 0:
            raise DataError("dt must be positive")
        if not self.names:
            self.names = [f"x{i}" for i in range(X.shape[1])]
        if not self.input_names:
            self.input_names = [f"u{i}" for i in range(U.shape[1])]

    @property
    def q(self):
        return self.snapshots.shape[0]

    @property
    def n(self):
        return self.snapshots.shape[1]


def ingest_csv(path, nan_policy="reject") -> SnapshotDataset:
    """Read raw snapshots (``x:`` columns) and optional inputs (``u:``).

    Raises :class:`DataError` naming the data row (1-based, header excluded)
    and the file line of the first malformed or non-finite cell.
    """
    tab = _parse_table(path, nan_policy)
    dt = _meta_float(tab, "dt", path)
    X, xnames = _role_block(tab, "x")
    if not xnames:
        raise DataError(f"{path}: no snapshot (x:) columns")
    U, unames = _role_block(tab, "u")
    t0 = (
        tab.values[0, tab.columns.index("t")]
        if "t" in tab.columns and tab.values.shape[0]
        else _meta_float(tab, "t0", path, 0.0)
    )
    if nan_policy == "allow":
        # SnapshotDataset insists on finite entries
        bad = ~np.all(np.isfinite(X), axis=1)
        if bad.any():
            raise DataError(f"{path}: row {int(np.argmax(bad)) + 1} holds non-finite snapshot values")
    return SnapshotDataset(dt=dt, snapshots=X, inputs=U, t0=t0, names=xnames, input_names=unames)


def export_snapshots_csv(path, data: SnapshotDataset):
    cols = ["t"] + ["x:" + n for n in data.names] + ["u:" + n for n in data.input_names]
    t = data.t0 + data.dt * np.arange(data.q)
    _write_table(path, {"dt": _fmt(data.dt)}, cols, np.hstack([t[:, None], data.snapshots, data.inputs]))


@dataclass
class PodProjection:
    """Observables built from the leading POD coefficients of snapshots."""

    series: TimeSeriesData
    modes: np.ndarray
    mean: np.ndarray
    eigenvalues: np.ndarray
    energy_fraction: float

    def reconstruct(self, coefficients=None):
        C = self.series.observables if coefficients is None else np.asarray(coefficients, float)
        return self.mean + C @ self.modes.T


def project_pod_observables(data: SnapshotDataset, n_modes: int, center=True) -> PodProjection:
    """Use the top ``n_modes`` POD coefficients as observables.

    Modes are eigenvectors of the (mean-removed when ``center``) snapshot
    covariance; the energy fraction is the share of its eigenvalue sum kept.
    """
    X = data.snapshots
    mean = X.mean(axis=0) if center else np.zeros(X.shape[1])
    Xc = X - mean
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    rank = numerical_rank(s, Xc.shape)
    if n_modes < 1 or n_modes > rank:
        raise DataError(f"n_modes={n_modes} not available; snapshot rank is {rank}")
    lam = s**2 / max(X.shape[0] - 1, 1)
    modes = Vt[:n_modes].T.copy()
    signs = np.sign(modes[np.argmax(np.abs(modes), axis=0), np.arange(n_modes)])
    modes *= signs
    coeffs = Xc @ modes
    energy = float(lam[:n_modes].sum() / lam.sum())
    series = TimeSeriesData(
        dt=data.dt,
        observables=coeffs,
        inputs=data.inputs,
        t0=data.t0,
        meta={
            "observable_names": [f"pod{i}" for i in range(n_modes)],
            "input_names": list(data.input_names),
            "energy_fraction": energy,
        },
    )
    return PodProjection(series=series, modes=modes, mean=mean, eigenvalues=lam, energy_fraction=energy)


# Model artifacts =============================================================
def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    return v


def save_model(path, model: KoopmanModel):
    """Write ``model`` in the versioned binary artifact format.

    Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
    header, then every array as little-endian float64 in row-major order at
    the offsets listed in the header.
    """
    arrays = {"operator": model.operator}
    if model.pod is not None:
        arrays["pod_Phi"] = model.pod.Phi
        arrays["pod_eigenvalues"] = model.pod.eigenvalues
        if model.pod.all_eigenvalues is not None:
            arrays["pod_all_eigenvalues"] = model.pod.all_eigenvalues
    if model.feature_mean is not None:
        arrays["feature_mean"] = model.feature_mean
        arrays["feature_scale"] = model.feature_scale
        arrays["target_mean"] = model.target_mean
    if model.lift.rbf_centers is not None:
        arrays["rbf_centers"] = model.lift.rbf_centers
    table, offset, blobs = {}, 0, []
    for name, a in arrays.items():
        a = np.ascontiguousarray(a, dtype="<f8")
        table[name] = {"shape": list(a.shape), "offset": offset}
        blobs.append(a.tobytes(order="C"))
        offset += a.nbytes
    lift = model.lift
    header = {
        "format": "koopuq-model",
        "version": MODEL_VERSION,
        "mode": model.mode,
        "dt": model.dt,
        "p": model.p,
        "m": model.m,
        "z": model.embedding.z,
        "lift": {
            "kind": lift.kind,
            "max_degree": lift.max_degree,
            "include_linear": lift.include_linear,
            "use_history": lift.use_history,
            "rbf_count": lift.rbf_count,
            "max_dim": lift.max_dim,
        },
        "residual_variance": model.residual_variance,
        "rcond": model.rcond,
        "pod_energy_fraction": None if model.pod is None else model.pod.energy_fraction,
        "meta": _jsonable(model.meta),
        "arrays": table,
    }
    hbytes = json.dumps(header, sort_keys=True, allow_nan=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def load_model(path) -> KoopmanModel:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: model artifact not found")
    raw = path.read_bytes()
    if raw[:8] != MODEL_MAGIC:
        raise DataError(f"{path}: not a model artifact (bad magic)")
    if len(raw) < 16:
        raise DataError(f"{path}: truncated artifact")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt header: {exc}") from None
    if header.get("version") != MODEL_VERSION:
        raise DataError(f"{path}: unsupported artifact version {header.get('version')}")
    body = raw[16 + hlen :]
    arrays = {}
    for name, info in header["arrays"].items():
        shape = tuple(info["shape"])
        n = int(np.prod(shape)) * 8
        start = info["offset"]
        if start + n > len(body):
            raise DataError(f"{path}: array {name!r} runs past the end of the file")
        arrays[name] = np.frombuffer(body[start : start + n], dtype="<f8").reshape(shape).astype(float)
    lf = header["lift"]
    lift = LiftSpec(
        kind=lf["kind"],
        max_degree=lf["max_degree"],
        include_linear=lf["include_linear"],
        use_history=lf["use_history"],
        rbf_count=lf["rbf_count"],
        rbf_centers=arrays.get("rbf_centers"),
        max_dim=lf["max_dim"],
    )
    pod = None
    if "pod_Phi" in arrays:
        pod = PodBasis(
            Phi=arrays["pod_Phi"],
            eigenvalues=arrays["pod_eigenvalues"],
            energy_fraction=header["pod_energy_fraction"],
            all_eigenvalues=arrays.get("pod_all_eigenvalues"),
        )
    return KoopmanModel(
        mode=header["mode"],
        operator=arrays["operator"],
        embedding=EmbeddingConfig(header["z"]),
        lift=lift,
        dt=header["dt"],
        p=header["p"],
        m=header["m"],
        pod=pod,
        residual_variance=header["residual_variance"],
        rcond=header["rcond"],
        feature_mean=arrays.get("feature_mean"),
        feature_scale=arrays.get("feature_scale"),
        target_mean=arrays.get("target_mean"),
        meta=header["meta"],
    )


# Reports =====================================================================
def write_report(outdir, report, window_curve=None):
    """Write ``report.json``, ``variance_vs_time.csv`` and ``window_vs_batchsize.csv``.

    ``window_curve`` (batch size -> threshold -> percent) defaults to the
    report's own curve.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    curve = report.window_curve if window_curve is None else window_curve
    d = report.to_dict()
    d["window_curve"] = {str(T): {repr(float(th)): p for th, p in c.items()} for T, c in sorted(curve.items())}
    with (outdir / "report.json").open("w", encoding="utf-8") as fh:
        json.dump(d, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with (outdir / "variance_vs_time.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t0", "step", "posterior_variance", "normalized_variance", "error"])
        for b in report.per_batch:
            w.writerow(
                [_fmt(b.time), b.t0, _fmt(b.variance), _fmt(b.normalized), "" if b.error is None else _fmt(b.error)]
            )
    write_window_csv(outdir / "window_vs_batchsize.csv", curve)


def write_window_csv(path, window_curve):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["batch_size", "threshold", "window_pct"])
        for T in sorted(window_curve):
            for th in sorted(window_curve[T]):
                w.writerow([int(T), _fmt(th), _fmt(window_curve[T][th])])


def write_ftle_csv(path, ftle):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {CSV_MAGIC}={CSV_VERSION} window={_fmt(ftle.window)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "ftle"])
        for t, v in zip(ftle.times, ftle.lam):
            w.writerow([_fmt(t), _fmt(v)])


TRACE_FIELDS = ("iteration", "gamma_p_plus", "gamma_p_minus", "gamma_e_plus", "gamma_e_minus", "change", "clipped")


def write_trace_csv(path, trace):
    """Write a per-iteration solver trace (a list of dicts) as CSV."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for row in trace:
            w.writerow([int(row[k]) if k == "iteration" else row[k] if k == "clipped" else _fmt(row[k]) for k in TRACE_FIELDS])
