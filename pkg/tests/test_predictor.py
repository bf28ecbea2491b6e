"""Closed-loop rollout and batching."""

import numpy as np
import pytest

from koopuq.data import TimeSeriesData
from koopuq.errors import ConfigError, DataError, InsufficientHistoryError, RolloutDivergedError
from koopuq.koopman import EmbeddingConfig, LiftSpec, assemble_snapshots, evaluate_lift, fit_model
from koopuq.predictor import make_batches, rollout
from koopuq.sim import HopfParams, simulate_hopf


@pytest.fixture(scope="module")
def contraction_model():
    g = 0.5 ** np.arange(30)
    return fit_model(TimeSeriesData(dt=1.0, observables=g), EmbeddingConfig(1), LiftSpec(kind="none"), mode="nonlinear_full")


@pytest.fixture(scope="module")
def hopf_setup():
    d = simulate_hopf(HopfParams(D=0.01), n_steps=1500, seed=3)
    cfg, spec = EmbeddingConfig(4), LiftSpec(kind="polynomial", max_degree=3)
    model = fit_model(d.slice(0, 1200), cfg, spec, mode="nonlinear_pod", zeta=10, standardize=True)
    return d, model


class TestRollout:
    def test_scalar_contraction(self, contraction_model):
        warm = TimeSeriesData(dt=1.0, observables=[2.0, 1.0])
        ro = rollout(contraction_model, warm, n_steps=5)
        np.testing.assert_allclose(ro.predicted[:, 0], 0.5 ** np.arange(1, 6), rtol=1e-10)

    def test_zero_steps(self, contraction_model):
        warm = TimeSeriesData(dt=1.0, observables=[2.0, 1.0])
        ro = rollout(contraction_model, warm, n_steps=0)
        assert ro.predicted.shape == (0, 1)
        assert len(ro) == 0 and ro.k0 == 1

    def test_insufficient_warmup(self, contraction_model):
        with pytest.raises(InsufficientHistoryError):
            rollout(contraction_model, TimeSeriesData(dt=1.0, observables=[1.0]), n_steps=3)

    def test_missing_inputs(self):
        rng = np.random.default_rng(0)
        d = TimeSeriesData(dt=1.0, observables=rng.standard_normal(40), inputs=rng.standard_normal(40))
        model = fit_model(d, EmbeddingConfig(2), LiftSpec(kind="none"), mode="nonlinear_full")
        with pytest.raises(DataError):
            rollout(model, d.slice(0, 5), n_steps=3)
        with pytest.raises(DataError):
            rollout(model, d.slice(0, 5), inputs=np.zeros(2), n_steps=3)

    def test_divergence_reports_step(self):
        g = 10.0 ** np.arange(20)
        model = fit_model(TimeSeriesData(dt=1.0, observables=g), EmbeddingConfig(1), LiftSpec(kind="none"), mode="nonlinear_full")
        with pytest.raises(RolloutDivergedError) as exc:
            rollout(model, TimeSeriesData(dt=1.0, observables=[1.0, 10.0]), n_steps=400)
        assert exc.value.step is not None and exc.value.step > 0

    def test_resync_requires_truth(self, contraction_model):
        warm = TimeSeriesData(dt=1.0, observables=[2.0, 1.0])
        with pytest.raises(ConfigError):
            rollout(contraction_model, warm, n_steps=3, resync_period=1)

    def test_deterministic(self, hopf_setup):
        d, model = hopf_setup
        a = rollout(model, d.slice(1200, 1205), n_steps=100)
        b = rollout(model, d.slice(1200, 1205), n_steps=100)
        np.testing.assert_array_equal(a.predicted, b.predicted)
        np.testing.assert_array_equal(a.regressors, b.regressors)

    def test_states_consistent_with_lift(self, hopf_setup):
        d, model = hopf_setup
        ro = rollout(model, d.slice(1200, 1205), n_steps=20)
        for st in ro.states:
            assert st.h.shape == (model.M,)
            np.testing.assert_allclose(st.upsilon, evaluate_lift(model.lift, st.g, st.h))
        # the delay buffer shifts the previous observable in
        np.testing.assert_array_equal(ro.delays[1][0], ro.regressors[0][0])
        np.testing.assert_array_equal(ro.delays[1][1:], ro.delays[0][:-1])

    def test_one_step_mode_reproduces_training_residuals(self, hopf_setup):
        d, model = hopf_setup
        train = d.slice(0, 1200)
        z = model.embedding.z
        ro = rollout(model, train.slice(0, z + 1), n_steps=train.q - z - 1, truth=train, resync_period=1)
        s = assemble_snapshots(train, model.embedding, model.lift)
        resid = ro.predicted.T - s.X_plus
        rms = np.sqrt(np.mean(resid**2, axis=1))
        np.testing.assert_allclose(rms, model.meta["residual_rms"], rtol=1e-8)

    def test_series_times(self, contraction_model):
        warm = TimeSeriesData(dt=0.5, observables=[2.0, 1.0], t0=3.0)
        ser = rollout(contraction_model, warm, n_steps=3).series
        np.testing.assert_allclose(ser.times, [4.0, 4.5, 5.0])


class TestBatches:
    @pytest.fixture
    def ro10(self, contraction_model):
        return rollout(contraction_model, TimeSeriesData(dt=1.0, observables=[2.0, 1.0]), n_steps=10)

    def test_disjoint(self, ro10):
        b = make_batches(ro10, 5)
        assert [x.t0 for x in b] == [0, 5]
        assert all(x.T == 5 for x in b)

    def test_single_batch(self, ro10):
        assert len(make_batches(ro10, 10)) == 1

    def test_sliding(self, ro10):
        assert len(make_batches(ro10, 5, stride=1)) == 6

    def test_too_long(self, ro10):
        with pytest.raises(DataError):
            make_batches(ro10, 11)
        with pytest.raises(ConfigError):
            make_batches(ro10, 0)

    def test_self_consistency(self, hopf_setup):
        d, model = hopf_setup
        ro = rollout(model, d.slice(1200, 1205), n_steps=200)
        A = model.sensing_matrix
        for b in make_batches(ro, 20, stride=7):
            err = np.max(np.abs(b.Y - A @ b.X))
            assert err <= 1e-12 * max(1.0, np.max(np.abs(b.Y)))

    def test_projected_consistency(self, hopf_setup):
        d, model = hopf_setup
        ro = rollout(model, d.slice(1200, 1205), n_steps=60)
        for b in make_batches(ro, 20, projection=model.pod.Phi):
            assert b.X.shape == (model.pod.zeta, 20)
            np.testing.assert_allclose(b.Y, model.operator @ b.X, atol=1e-12)

    def test_columns_are_shifted_predictions(self, hopf_setup):
        d, model = hopf_setup
        ro = rollout(model, d.slice(1200, 1205), n_steps=40)
        b = make_batches(ro, 10)[1]
        np.testing.assert_allclose(model.output_from_inverse(b.Y[:, 0]), ro.predicted[10])
        np.testing.assert_array_equal(b.X[:, 0], ro.inverse_X[10])
