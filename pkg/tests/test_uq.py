"""Batch posterior variances, flags and uncertainty windows."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from koopuq.errors import ConfigError, DataError, InsufficientHistoryError
from koopuq.koopman import EmbeddingConfig, LiftSpec, fit_model
from koopuq.predictor import PredictionBatch
from koopuq.sim import HopfParams, simulate_hopf
from koopuq.uq import UqConfig, run_uq, solve_batch_inverse, sweep_batch_sizes, trace_step, uncertainty_window
from koopuq.vamp import PriorSpec, SensingModel, vamp_solve


@pytest.fixture(scope="module")
def small():
    d = simulate_hopf(HopfParams(D=0.01), n_steps=2000, seed=2)
    spec = LiftSpec(kind="polynomial", max_degree=2)
    model = fit_model(d.slice(0, 1500), EmbeddingConfig(2), spec, mode="nonlinear_full", standardize=True)
    return model, d.slice(1500 - 3, 2000)


def identity_batch(Y):
    Y = np.asarray(Y, dtype=float)
    return PredictionBatch(Y=Y, X=Y.copy(), t0=0)


class TestWindow:
    def test_all_and_none(self):
        assert uncertainty_window([0, 5, 10], 5, [True] * 3, 15) == 100.0
        assert uncertainty_window([0, 5, 10], 5, [False] * 3, 15) == 0.0

    def test_tail_excluded(self):
        # 17 steps, three batches of 5; the last two steps are not covered
        assert uncertainty_window([0, 5, 10], 5, [True, False, False], 17) == pytest.approx(100 / 3)

    def test_overlapping_batches_count_steps_once(self):
        assert uncertainty_window([0, 2], 4, [True, True], 6) == 100.0
        assert uncertainty_window([0, 2], 4, [False, True], 6) == pytest.approx(400 / 6)

    def test_empty(self):
        with pytest.raises(DataError):
            uncertainty_window([], 5, [], 3)

    @given(
        nv=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40),
        th=st.lists(st.floats(0.01, 0.99), min_size=2, max_size=6, unique=True),
        T=st.integers(1, 7),
    )
    @settings(max_examples=200, deadline=None)
    def test_monotone_in_threshold(self, nv, th, T):
        th = sorted(th)
        nv = np.array(nv)
        starts = [T * i for i in range(len(nv))]
        w = [uncertainty_window(starts, T, nv > t, T * len(nv) + T - 1) for t in th]
        assert all(b <= a for a, b in zip(w, w[1:]))
        assert all(0.0 <= x <= 100.0 for x in w)


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            dict(T_batch=0),
            dict(T_batch=2.5),
            dict(thresholds=()),
            dict(thresholds=(0.5, 0.3)),
            dict(thresholds=(0.0, 0.5)),
            dict(thresholds=(0.5, 1.0)),
            dict(noise_precision=-1.0),
            dict(stride=0),
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            UqConfig(**kw)

    def test_with_batch_keeps_the_rest(self):
        c = UqConfig(thresholds=(0.2, 0.4), stride=3, joint=True).with_batch(7)
        assert (c.T_batch, c.thresholds, c.stride, c.joint) == (7, (0.2, 0.4), 3, True)


class TestSolveBatch:
    def test_identity_sensing_fuses_prior_and_noise(self):
        # with A = I and a Gaussian prior every component has variance 1/(gamma_w + 1/v)
        cfg = UqConfig(prior=PriorSpec("gaussian", variance=2.0))
        Y = np.random.default_rng(0).standard_normal((6, 4))
        X, var, conv = solve_batch_inverse(identity_batch(Y), np.eye(6), cfg, noise_precision=3.0)
        assert var == pytest.approx(1 / (3.0 + 0.5), rel=1e-10)
        np.testing.assert_allclose(X, 3.0 * Y / 3.5, atol=1e-8)
        assert conv == 1.0

    def test_precise_measurements_never_flag(self):
        cfg = UqConfig()
        Y = np.random.default_rng(1).standard_normal((8, 5))
        _, var, _ = solve_batch_inverse(identity_batch(Y), np.eye(8), cfg, noise_precision=1e6)
        assert var / cfg.prior.total_variance < min(cfg.thresholds)

    def test_shape_checks(self):
        b = identity_batch(np.zeros((3, 2)))
        with pytest.raises(DataError):
            solve_batch_inverse(b, np.eye(4), UqConfig(), noise_precision=1.0)
        with pytest.raises(ConfigError):
            solve_batch_inverse(b, np.eye(3), UqConfig())

    def test_accepts_sensing_model(self):
        Y = np.ones((3, 2))
        a = solve_batch_inverse(identity_batch(Y), SensingModel(np.eye(3), 2.0), UqConfig())
        b = solve_batch_inverse(identity_batch(Y), np.eye(3), UqConfig(), noise_precision=2.0)
        np.testing.assert_array_equal(a[0], b[0])
        assert a[1] == b[1]


class TestRunUq:
    def test_partition(self, small):
        model, ev = small
        rep = run_uq(model, ev, UqConfig(T_batch=20))
        n = ev.q - 3
        assert rep.n_steps == n
        assert [b.t0 for b in rep.per_batch] == list(range(0, n - 19, 20))
        assert rep.per_step_error.shape == (n,)

    def test_deterministic(self, small):
        model, ev = small
        a = run_uq(model, ev, UqConfig(T_batch=10)).to_dict()
        b = run_uq(model, ev, UqConfig(T_batch=10)).to_dict()
        assert a == b

    def test_single_step_batches_are_single_solves(self, small, hopf_run):
        # compared on converged problems only; a cycling solve amplifies round-off
        model, ev = small
        cfg = UqConfig(T_batch=1, prior=PriorSpec("gaussian"))
        runs = [(model, ev, cfg, None), (hopf_run.model, hopf_run.ev, hopf_run.ucfg.with_batch(1), hopf_run.warmup)]
        for m, e, c, w in runs:
            rep = run_uq(m, e, c, warmup=w, n_steps=5)
            for j in range(5):
                res = trace_step(m, e, c, step=j, warmup=w)
                assert res.converged
                assert rep.per_batch[j].variance == pytest.approx(res.posterior_variance, rel=1e-10)

    def test_batch_variance_is_mean_of_steps(self, small):
        model, ev = small
        one = run_uq(model, ev, UqConfig(T_batch=1), n_steps=40).variances
        four = run_uq(model, ev, UqConfig(T_batch=4), n_steps=40).variances
        np.testing.assert_allclose(four, one.reshape(10, 4).mean(axis=1), rtol=1e-12)

    def test_gaussian_prior_never_exceeds_prior(self, small):
        model, ev = small
        rep = run_uq(model, ev, UqConfig(T_batch=10, prior=PriorSpec("gaussian")))
        assert np.all(rep.normalized > 0) and np.all(rep.normalized <= 1 + 1e-12)

    def test_joint_mode_runs(self, small):
        model, ev = small
        rep = run_uq(model, ev, UqConfig(T_batch=10, joint=True, prior=PriorSpec("gaussian")), n_steps=30)
        assert len(rep.per_batch) == 3
        assert np.all(rep.normalized > 0) and np.all(rep.normalized <= 1 + 1e-12)

    def test_flags_follow_thresholds(self, small):
        model, ev = small
        rep = run_uq(model, ev, UqConfig(T_batch=10))
        expect = rep.normalized[:, None] > np.array(rep.thresholds)[None, :]
        np.testing.assert_array_equal(rep.flags, expect)
        w = [rep.window(t) for t in rep.thresholds]
        assert all(b <= a for a, b in zip(w, w[1:]))

    def test_sweep_matches_individual_runs(self, small):
        model, ev = small
        curve, reports = sweep_batch_sizes(model, ev, UqConfig(), [5, 10])
        for T in (5, 10):
            single = run_uq(model, ev, UqConfig(T_batch=T))
            np.testing.assert_allclose(reports[T].variances, single.variances, rtol=1e-12)
            assert curve[T] == single.window()

    def test_errors(self, small):
        model, ev = small
        with pytest.raises(InsufficientHistoryError):
            run_uq(model, ev, UqConfig(), warmup=2)
        with pytest.raises(DataError):
            run_uq(model, ev, UqConfig(T_batch=1000))
        with pytest.raises(ConfigError):
            run_uq(model, ev, UqConfig(projected=True))
        with pytest.raises(ConfigError):
            sweep_batch_sizes(model, ev, UqConfig(), [])

    def test_trace_step(self, small):
        model, ev = small
        res = trace_step(model, ev, UqConfig(), step=3)
        assert len(res.trace) == res.iterations_run
        with pytest.raises(DataError):
            trace_step(model, ev, UqConfig(), step=10**6)


class TestNeuronPipeline:
    def test_solver_converges_everywhere(self, neuron_run):
        for rep in neuron_run.reports.values():
            assert all(b.converged == 1.0 for b in rep.per_batch)

    def test_spiking_batches_score_higher_than_quiescent(self, neuron_run, neuron_prepared):
        # the effect is small in absolute terms but far above the solver tolerance
        rep = neuron_run.reports[20]
        V = neuron_prepared.ro.predicted[:, 0]
        spiking = np.array([V[b.t0 : b.t0 + 20].max() > 0.0 for b in rep.per_batch])
        assert spiking.any() and (~spiking).any()
        v = rep.variances
        assert v[spiking].mean() > v[~spiking].mean()

    def test_single_solve_matches_trace_helper(self, neuron_run):
        r = neuron_run
        res = trace_step(r.model, r.ev, r.ucfg, step=0, warmup=r.warmup)
        assert res.converged
        assert r.reports[5].per_batch[0].variance == pytest.approx(
            np.mean([trace_step(r.model, r.ev, r.ucfg, step=j, warmup=r.warmup).posterior_variance for j in range(5)]),
            rel=1e-12,
        )

    def test_vamp_single_agrees_with_columns(self, neuron_prepared, neuron_run):
        prep = neuron_prepared
        res = vamp_solve(prep.sensing, prep.ro.inverse_Y[7], neuron_run.ucfg.prior, neuron_run.ucfg.vamp)
        rep = run_uq(neuron_run.model, neuron_run.ev, neuron_run.ucfg.with_batch(1), warmup=neuron_run.warmup, n_steps=8)
        assert rep.per_batch[7].variance == pytest.approx(res.posterior_variance, rel=1e-10)
