"""Koopman-style model identification from time series.

The regressor stack for step ``k`` is ``r^k = [g^k; u^k; upsilon^k]`` where
``upsilon^k = f_lift(g^k, h^k)`` and ``h^k`` is the delay embedding

    h^k = [g^{k-1}; ...; g^{k-z}; u^{k-1}; ...; u^{k-z}].

Three least-squares estimators are available:

``linear_full``
    ``[g^{k+1}; upsilon^{k+1}] = A_lin r^k`` (EDMD with control).
``nonlinear_full``
    ``g^{k+1} = A_N r^k``; the lifted state is recomputed from the
    observables at every step instead of being propagated.
``nonlinear_pod``
    ``g^{k+1} = A_R Phi^T r^k`` with ``Phi`` the leading POD modes of the
    regressor snapshots.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb

import numpy as np

from .data import TimeSeriesData
from .errors import ConfigError, DataError, InsufficientHistoryError

FIT_MODES = ("linear_full", "nonlinear_full", "nonlinear_pod")
LIFT_KINDS = ("none", "polynomial", "rbf_then_polynomial")


# Configuration types =========================================================
@dataclass(frozen=True)
class EmbeddingConfig:
    z: int = 1

    def __post_init__(self):
        if self.z < 1:
            raise ConfigError(f"delay length z must be >= 1, got {self.z}")

    def dimension(self, p, m):
        return self.z * (p + m)


@dataclass
class LiftSpec:
    """Nonlinear lifting ``f_lift``.

    ``polynomial`` takes monomials of total degree 2..max_degree (1..max_degree
    when ``include_linear``) of ``[g; h]`` (or of ``g`` alone when
    ``use_history`` is false). ``rbf_then_polynomial`` first maps ``g`` to the
    distances ``||g - c_j||`` to ``rbf_count`` centers and then takes the same
    monomials of those distances; it never looks at ``h``.

    Monomials are enumerated in graded lexicographic order: by degree, then
    lexicographically over sorted variable-index tuples, i.e. the order of
    ``itertools.combinations_with_replacement``.
    """

    kind: str = "polynomial"
    max_degree: int = 4
    include_linear: bool = False
    use_history: bool = True
    rbf_count: int = 10
    rbf_centers: np.ndarray | None = None
    max_dim: int = 20000

    def __post_init__(self):
        if self.kind not in LIFT_KINDS:
            raise ConfigError(f"unknown lift kind {self.kind!r}; expected one of {LIFT_KINDS}")
        if self.max_degree < 1:
            raise ConfigError("max_degree must be >= 1")
        if self.rbf_centers is not None:
            c = np.atleast_2d(np.asarray(self.rbf_centers, dtype=float))
            self.rbf_centers = c
            self.rbf_count = c.shape[0]

    def n_vars(self, p, M):
        if self.kind == "none":
            return 0
        if self.kind == "rbf_then_polynomial":
            return self.rbf_count
        return p + M if self.use_history else p

    def dimension(self, p, M=0):
        """Output dimension ``L`` computed without evaluating anything."""
        if self.kind == "none":
            return 0
        d = self.n_vars(p, M)
        L = comb(d + self.max_degree, self.max_degree) - 1
        if not self.include_linear:
            L -= d
        return L


def draw_rbf_centers(count, ranges, seed):
    """Centers drawn uniformly per coordinate from ``ranges = [(lo, hi), ...]``."""
    rng = np.random.default_rng(seed)
    lo = np.array([r[0] for r in ranges], dtype=float)
    hi = np.array([r[1] for r in ranges], dtype=float)
    return lo + (hi - lo) * rng.random((count, len(ranges)))


_INDEX_CACHE: dict = {}


def monomial_indices(n_vars, max_degree, include_linear):
    """Variable-index tuples of each monomial, grouped by degree (graded lex)."""
    key = (n_vars, max_degree, include_linear)
    if key not in _INDEX_CACHE:
        lo = 1 if include_linear else 2
        _INDEX_CACHE[key] = [
            np.array(
                list(itertools.combinations_with_replacement(range(n_vars), d)), dtype=np.intp
            ).reshape(-1, d)
            for d in range(lo, max_degree + 1)
        ]
    return _INDEX_CACHE[key]


def _monomials(Z, max_degree, include_linear):
    # Z: (n_samples, n_vars)
    blocks = []
    for idx in monomial_indices(Z.shape[1], max_degree, include_linear):
        if idx.size == 0:
            continue
        blocks.append(np.prod(Z[:, idx], axis=2))
    if not blocks:
        return np.zeros((Z.shape[0], 0))
    return np.concatenate(blocks, axis=1)


def lift_matrix(spec: LiftSpec, G, H):
    """Row-wise lift: ``G`` is (n, p), ``H`` is (n, M); returns (n, L)."""
    G = np.atleast_2d(G)
    H = np.atleast_2d(H) if H is not None else np.zeros((G.shape[0], 0))
    L = spec.dimension(G.shape[1], H.shape[1])
    if L > spec.max_dim:
        raise ConfigError(f"lift dimension {L} exceeds the configured cap {spec.max_dim}")
    if spec.kind == "none":
        return np.zeros((G.shape[0], 0))
    if spec.kind == "rbf_then_polynomial":
        if spec.rbf_centers is None:
            raise ConfigError("rbf_then_polynomial lift needs rbf_centers")
        if spec.rbf_centers.shape[1] != G.shape[1]:
            raise DataError(
                f"rbf centers have dimension {spec.rbf_centers.shape[1]}, observables {G.shape[1]}"
            )
        Z = np.linalg.norm(G[:, None, :] - spec.rbf_centers[None, :, :], axis=2)
    elif spec.use_history:
        Z = np.concatenate([G, H], axis=1)
    else:
        Z = G
    return _monomials(Z, spec.max_degree, spec.include_linear)


def evaluate_lift(spec: LiftSpec, g_k, h_k=None):
    """Lifted vector ``upsilon^k = f_lift(g^k, h^k)``."""
    g_k = np.atleast_1d(np.asarray(g_k, dtype=float))
    h_k = np.zeros(0) if h_k is None else np.atleast_1d(np.asarray(h_k, dtype=float))
    return lift_matrix(spec, g_k[None, :], h_k[None, :])[0]


# Delay embedding and snapshots ===============================================
def build_delay_embedding(data: TimeSeriesData, cfg: EmbeddingConfig, k: int):
    """``h^k`` stacking ``g^{k-1}..g^{k-z}`` then ``u^{k-1}..u^{k-z}``."""
    if k < cfg.z:
        raise InsufficientHistoryError(f"step {k} has fewer than z={cfg.z} past samples")
    if k > data.q:
        raise InsufficientHistoryError(f"step {k} is beyond the series length {data.q}")
    past = slice(k - 1, k - cfg.z - 1 if k - cfg.z - 1 >= 0 else None, -1)
    return np.concatenate(
        [data.observables[past].ravel(), data.inputs[past].ravel()]
    )


def delay_matrix(G, U, z, ks):
    """Delay embeddings for every index in ``ks`` as rows."""
    ks = np.asarray(ks)
    g_blocks = [G[ks - j] for j in range(1, z + 1)]
    u_blocks = [U[ks - j] for j in range(1, z + 1)]
    return np.concatenate(g_blocks + u_blocks, axis=1)


@dataclass
class Snapshots:
    """Column-aligned snapshot matrices; column ``j`` belongs to step ``k_j``."""

    X: np.ndarray
    X_plus: np.ndarray
    U: np.ndarray
    Upsilon: np.ndarray
    Upsilon_plus: np.ndarray
    steps: np.ndarray

    def __iter__(self):
        return iter((self.X, self.X_plus, self.U, self.Upsilon, self.Upsilon_plus))

    @property
    def regressors(self):
        """``[X; U; Upsilon]``."""
        return np.vstack([self.X, self.U, self.Upsilon])


def assemble_snapshots(data: TimeSeriesData, cfg: EmbeddingConfig, spec: LiftSpec) -> Snapshots:
    """Snapshot matrices over steps ``k = z .. q-2`` (zero-based).

    Column ``j`` of ``X_plus`` is the observable one step after column ``j``
    of ``X``; there are ``q - 1 - z`` columns.
    """
    z = cfg.z
    if data.q < z + 2:
        raise DataError(f"series of length {data.q} too short for z={z}; need at least {z + 2}")
    G, U = data.observables, data.inputs
    ks = np.arange(z, data.q)  # lift is needed at k and k+1
    H = delay_matrix(G, U, z, ks)
    Ups = lift_matrix(spec, G[ks], H)
    return Snapshots(
        X=G[z:-1].T.copy(),
        X_plus=G[z + 1 :].T.copy(),
        U=U[z:-1].T.copy(),
        Upsilon=Ups[:-1].T.copy(),
        Upsilon_plus=Ups[1:].T.copy(),
        steps=ks[:-1],
    )


# POD =========================================================================
@dataclass
class PodBasis:
    Phi: np.ndarray
    eigenvalues: np.ndarray
    energy_fraction: float
    all_eigenvalues: np.ndarray = field(repr=False, default=None)

    @property
    def zeta(self):
        return self.Phi.shape[1]


def numerical_rank(s, shape, rcond=None):
    if s.size == 0 or s[0] == 0:
        return 0
    tol = (max(shape) * np.finfo(float).eps if rcond is None else rcond) * s[0]
    return int(np.sum(s > tol))


def pod_from_matrix(B, zeta) -> PodBasis:
    """Leading ``zeta`` left singular vectors of ``B`` (eigenvectors of B B^T)."""
    W, s, _ = np.linalg.svd(B, full_matrices=False)
    rank = numerical_rank(s, B.shape)
    if zeta < 1 or zeta > rank:
        raise DataError(f"zeta={zeta} not achievable; snapshot matrix rank is {rank}")
    lam = s**2
    # fix the sign so each mode's largest-magnitude entry is positive
    Phi = W[:, :zeta].copy()
    signs = np.sign(Phi[np.argmax(np.abs(Phi), axis=0), np.arange(zeta)])
    Phi *= signs
    return PodBasis(
        Phi=Phi,
        eigenvalues=lam[:zeta].copy(),
        energy_fraction=float(lam[:zeta].sum() / lam.sum()),
        all_eigenvalues=lam,
    )


def compute_pod(X, U, Upsilon, zeta) -> PodBasis:
    """POD basis of ``B = [X; U; Upsilon]``."""
    return pod_from_matrix(np.vstack([X, U, Upsilon]), zeta)


# Fitting =====================================================================
def pinv(A, rcond=1e-10):
    """Moore-Penrose pseudoinverse with singular values below ``rcond * s_max`` dropped."""
    return np.linalg.pinv(A, rcond=rcond)


@dataclass
class KoopmanModel:
    """A fitted estimator plus everything needed to roll it forward.

    ``operator`` is ``A_lin`` ((p+L) x (p+m+L)), ``A_N`` (p x (p+m+L)) or
    ``A_R`` (p x zeta) depending on ``mode``. ``residual_variance`` is the
    mean squared one-step training residual per observable entry.
    """

    mode: str
    operator: np.ndarray
    embedding: EmbeddingConfig
    lift: LiftSpec
    dt: float
    p: int
    m: int
    pod: PodBasis | None = None
    residual_variance: float = float("nan")
    rcond: float = 1e-10
    feature_mean: np.ndarray | None = None
    feature_scale: np.ndarray | None = None
    target_mean: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        N = self.n_regressors
        r, c = self.operator.shape
        if self.mode == "linear_full":
            ok = (r, c) == (self.p + self.L, N)
        elif self.mode == "nonlinear_full":
            ok = (r, c) == (self.p, N)
        elif self.mode == "nonlinear_pod":
            ok = self.pod is not None and (r, c) == (self.p, self.pod.zeta) and (
                self.pod.Phi.shape[0] == N
            )
        else:
            raise ConfigError(f"unknown fit mode {self.mode!r}; expected one of {FIT_MODES}")
        if not ok:
            raise DataError(f"operator shape {self.operator.shape} inconsistent with mode {self.mode}")
        self._A = None

    @property
    def M(self):
        return self.embedding.dimension(self.p, self.m)

    @property
    def L(self):
        return self.lift.dimension(self.p, self.M)

    @property
    def n_regressors(self):
        return self.p + self.m + self.L

    @property
    def sensing_matrix(self):
        """``A`` with ``g^{k+1} = A r^k`` (``A_R Phi^T`` in POD mode)."""
        if self._A is None:
            if self.mode == "nonlinear_pod":
                self._A = self.operator @ self.pod.Phi.T
            else:
                self._A = self.operator[: self.p]
        return self._A

    @property
    def standardized(self):
        return self.feature_mean is not None

    def to_inverse_coords(self, r):
        """Regressor(s) in the coordinates the operator acts on (last axis = features)."""
        if self.feature_mean is None:
            return r
        return (r - self.feature_mean) / self.feature_scale

    def output_from_inverse(self, y):
        """Map operator output back to observable units."""
        if self.feature_mean is None:
            return y
        p = self.p
        return self.target_mean[:p] + self.feature_scale[:p] * y

    def output_to_inverse(self, g):
        if self.feature_mean is None:
            return g
        p = self.p
        return (g - self.target_mean[:p]) / self.feature_scale[:p]

    def _state_rows(self):
        # rows of the regressor that linear_full propagates: [g; upsilon]
        return np.r_[0 : self.p, self.p + self.m : self.n_regressors]

    def regressor(self, g, u, upsilon):
        return np.concatenate([g, u, upsilon])


def fit_model(
    data: TimeSeriesData,
    cfg: EmbeddingConfig,
    spec: LiftSpec,
    mode: str = "nonlinear_pod",
    zeta: int | None = None,
    rcond: float = 1e-10,
    standardize: bool = False,
) -> KoopmanModel:
    """Least-squares fit of one of the estimators listed in the module docstring.

    With ``standardize=True`` every regressor row is shifted and scaled to
    zero mean and unit variance over the training snapshots. Targets are
    centered on their own mean and divided by the scale of the matching
    regressor row, so the fitted map is affine in raw units while the
    operator stays linear in the standardized coordinates. Without it the
    fit is on raw values.
    """
    if mode not in FIT_MODES:
        raise ConfigError(f"unknown fit mode {mode!r}; expected one of {FIT_MODES}")
    snaps = assemble_snapshots(data, cfg, spec)
    R = snaps.regressors
    if not np.any(R):
        raise DataError("regressor matrix is identically zero")
    p, m = data.p, data.m
    X_plus = snaps.X_plus
    Ups_plus = snaps.Upsilon_plus
    mu = scale = t_mu = None
    if standardize:
        mu = R.mean(axis=1)
        scale = R.std(axis=1)
        scale[scale < np.finfo(float).tiny ** 0.5] = 1.0
        R = (R - mu[:, None]) / scale[:, None]
        t_mu = np.concatenate([X_plus.mean(axis=1), Ups_plus.mean(axis=1)])
        X_plus = (X_plus - t_mu[:p, None]) / scale[:p, None]
        Ups_plus = (Ups_plus - t_mu[p:, None]) / scale[p + m :, None]
        if mode != "linear_full":
            t_mu = t_mu[:p]
    pod = None
    if mode == "linear_full":
        target = np.vstack([X_plus, Ups_plus])
        op = target @ pinv(R, rcond)
        pred = (op @ R)[:p]
    elif mode == "nonlinear_full":
        op = X_plus @ pinv(R, rcond)
        pred = op @ R
    else:
        if zeta is None:
            raise ConfigError("nonlinear_pod mode requires zeta")
        pod = pod_from_matrix(R, zeta)
        coeffs = pod.Phi.T @ R
        op = X_plus @ pinv(coeffs, rcond)
        pred = op @ coeffs
    resid = X_plus - pred
    resid_raw = resid if scale is None else resid * scale[:p, None]
    return KoopmanModel(
        mode=mode,
        operator=op,
        embedding=cfg,
        lift=spec,
        dt=data.dt,
        p=data.p,
        m=data.m,
        pod=pod,
        residual_variance=float(np.mean(resid**2)),
        rcond=rcond,
        feature_mean=mu,
        feature_scale=scale,
        target_mean=t_mu,
        meta={
            "residual_rms": np.sqrt(np.mean(resid_raw**2, axis=1)).tolist(),
            "n_snapshots": int(R.shape[1]),
        },
    )
