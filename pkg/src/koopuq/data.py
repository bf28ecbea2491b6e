"""Uniformly sampled time series container shared by all stages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass
class TimeSeriesData:
    """Observables and inputs sampled every ``dt``.

    Parameters
    ----------
    dt : float
        Sample interval.
    observables : ndarray, shape (q, p)
        Row ``k`` is the observable vector g(x^k).
    inputs : ndarray, shape (q, m)
        Row ``k`` is the input u^k. ``m`` may be zero.
    states : ndarray, shape (q, n), optional
        Full simulator state, kept for diagnostics such as FTLE.
    t0 : float
        Time of row 0.
    """

    dt: float
    observables: np.ndarray
    inputs: np.ndarray = None
    states: np.ndarray | None = None
    t0: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        obs = np.asarray(self.observables, dtype=float)
        if obs.ndim == 1:
            obs = obs[:, None]
        if obs.ndim != 2 or obs.shape[1] < 1:
            raise DataError(f"observables must be (q, p) with p >= 1, got {obs.shape}")
        if self.inputs is None:
            inp = np.zeros((obs.shape[0], 0))
        else:
            inp = np.asarray(self.inputs, dtype=float)
            if inp.ndim == 1:
                inp = inp[:, None]
        if inp.shape[0] != obs.shape[0]:
            raise DataError(
                f"observables and inputs differ in length: {obs.shape[0]} vs {inp.shape[0]}"
            )
        if not self.dt > 0:
            raise DataError(f"dt must be positive, got {self.dt}")
        self.observables = obs
        self.inputs = inp
        if self.states is not None:
            self.states = np.asarray(self.states, dtype=float)
            if self.states.shape[0] != obs.shape[0]:
                raise DataError("states and observables differ in length")

    @property
    def q(self):
        return self.observables.shape[0]

    @property
    def p(self):
        return self.observables.shape[1]

    @property
    def m(self):
        return self.inputs.shape[1]

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.q)

    def __len__(self):
        return self.q

    def slice(self, start=None, stop=None):
        """Rows ``start:stop`` as a new series with ``t0`` shifted accordingly."""
        start, stop, _ = slice(start, stop).indices(self.q)
        return TimeSeriesData(
            dt=self.dt,
            observables=self.observables[start:stop],
            inputs=self.inputs[start:stop],
            states=None if self.states is None else self.states[start:stop],
            t0=self.t0 + start * self.dt,
            meta=dict(self.meta),
        )
