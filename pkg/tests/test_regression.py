import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from targetcorr import _linalg
from targetcorr.errors import DegenerateDecayError, DimensionError, ExplicitFeaturesRequired, NumericalError, TargetCorrError
from targetcorr.kernels import RBF, ExplicitFeature, Precomputed, extended_features, gram, indices, linear_kernel
from targetcorr.regression import (
    HyperParams,
    OrderedDataset,
    fit_minibatch,
    fit_offline,
    fit_online,
    minibatch_closed_form,
    offline_coefficients,
    offline_predict,
    online_closed_form,
    repeat_epochs,
    sgd_run,
)


def scaled_tanh(J):
    """Random features normalized so that k(x, x) <= 1 (keeps SGD with eta <= 0.5 stable)."""
    return ExplicitFeature(lambda X: np.tanh(J @ X) / np.sqrt(J.shape[0]), d_x=J.shape[1], name="scaled_tanh")


class TestOfflinePredict:
    def test_scalar(self):
        f = offline_predict(Precomputed(np.array([[1.0]])), indices(1), np.array([[2.0]]), 1.0, indices(1))
        assert f[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_ridge_washout(self, gp_task):
        train, test, _ = gp_task
        f = offline_predict(RBF(0.1), train.X, train.Y, 1e9, test.X)
        assert np.max(np.abs(f)) < 1e-6 * np.max(np.abs(train.Y))

    def test_normal_equations_oracle(self, gp_task, tanh_kernel):
        train, test, _ = gp_task
        gamma = 1.0
        Phi, Phi_s = tanh_kernel.features(train.X), tanh_kernel.features(test.X)
        w = np.linalg.solve(gamma * np.eye(Phi.shape[0]) + Phi @ Phi.T, Phi @ train.Y.T)
        f = offline_predict(tanh_kernel, train.X, train.Y, gamma, test.X)
        assert np.max(np.abs(f - w.T @ Phi_s)) < 1e-8

    def test_stationarity(self, gp_task):
        train, _, _ = gp_task
        K = gram(RBF(0.1), train.X)
        alpha = offline_coefficients(K, train.Y, 0.5)
        np.testing.assert_allclose(alpha @ (0.5 * np.eye(train.n) + K), train.Y, rtol=0, atol=1e-8)

    def test_singular_system_carries_condition(self):
        X = np.array([[0.0, 0.0, 1.0]])
        with pytest.raises(NumericalError) as info:
            offline_predict(linear_kernel(), X, np.ones((1, 3)), 0.0, X)
        assert info.value.condition > 1e12

    def test_column_mismatch(self):
        with pytest.raises(DimensionError):
            offline_predict(RBF(0.1), np.zeros((1, 3)), np.zeros((1, 2)), 1.0, np.zeros((1, 1)))


class TestOnlineClosedForm:
    def test_single_sample(self):
        f = online_closed_form(Precomputed(np.array([[1.0]])), indices(1), np.array([[2.0]]), 0.5, 0.0, indices(1))
        assert f[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_degenerate_decay(self, gp_task):
        train, test, _ = gp_task
        with pytest.raises(DegenerateDecayError, match="degenerate decay"):
            online_closed_form(RBF(0.1), train.X, train.Y, 0.5, 2.0, test.X)

    @pytest.mark.parametrize("eta,gamma", [(0.5, 0.0), (0.1, 1.0)])
    def test_gp_task_matches_sgd(self, gp_task, tanh_kernel, eta, gamma):
        # the tanh random-feature kernel diverges under these rates, so both legs run in 512-bit arithmetic
        train, test, _ = gp_task
        with _linalg.extended_precision():
            ext = extended_features(tanh_kernel)
            W = sgd_run(ext, train, eta, gamma, record=False).predictor(test.X)
            C = online_closed_form(ext, train.X, train.Y, eta, gamma, test.X)
            assert np.max(np.abs(_linalg.to_float(W - C))) < 1e-8

    def test_scalar_consistency_with_offline(self):
        # one sample, eta = 1/(gamma + k11): online and offline coincide
        k11, gamma = 0.7, 0.4
        kern = Precomputed(np.array([[k11]]))
        Y = np.array([[1.3]])
        on = online_closed_form(kern, indices(1), Y, 1.0 / (gamma + k11), 0.0, indices(1))
        off = offline_predict(kern, indices(1), Y, gamma, indices(1))
        assert on[0, 0] == pytest.approx(off[0, 0], abs=1e-15)

    @given(
        n=st.integers(1, 128),
        d_phi=st.integers(1, 256),
        eta=st.sampled_from([0.01, 0.1, 0.5]),
        gamma=st.sampled_from([0.0, 0.1, 1.0]),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_sgd_equivalence_property(self, n, d_phi, eta, gamma, seed):
        rng = np.random.default_rng(seed)
        k = scaled_tanh(rng.standard_normal((d_phi, 2)))
        ds = OrderedDataset(rng.standard_normal((2, n)), rng.standard_normal((2, n)))
        X_s = rng.standard_normal((2, 20))
        W = sgd_run(k, ds, eta, gamma, record=False).predictor(X_s)
        C = online_closed_form(k, ds.X, ds.Y, eta, gamma, X_s)
        assert np.max(np.abs(W - C)) < 1e-8 * max(1.0, np.max(np.abs(ds.Y)))


class TestMinibatchClosedForm:
    def test_block_one_equals_online(self, gp_task):
        train, test, _ = gp_task
        a = minibatch_closed_form(RBF(0.1), train.X, train.Y, 0.3, 1, test.X)
        b = online_closed_form(RBF(0.1), train.X, train.Y, 0.3, 0.0, test.X)
        np.testing.assert_array_equal(a, b)

    def test_single_batch(self, gp_task):
        train, test, _ = gp_task
        f = minibatch_closed_form(RBF(0.1), train.X, train.Y, 0.3, train.n, test.X)
        np.testing.assert_allclose(f, 0.3 * train.Y @ gram(RBF(0.1), train.X, test.X), rtol=0, atol=1e-14)

    def test_gp_task_block_four(self, gp_task, tanh_kernel):
        train, test, _ = gp_task
        with _linalg.extended_precision():
            ext = extended_features(tanh_kernel)
            W = sgd_run(ext, train, 0.5, 0.0, 4, record=False).predictor(test.X)
            C = minibatch_closed_form(ext, train.X, train.Y, 0.5, 4, test.X)
            assert np.max(np.abs(_linalg.to_float(W - C))) < 1e-8

    @given(
        n=st.integers(8, 96),
        b=st.sampled_from([2, 4, 8]),
        eta=st.sampled_from([0.01, 0.1, 0.5]),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_minibatch_equivalence_property(self, n, b, eta, seed):
        rng = np.random.default_rng(seed)
        k = scaled_tanh(rng.standard_normal((64, 2)))
        ds = OrderedDataset(rng.standard_normal((2, n)), rng.standard_normal((1, n)))
        X_s = rng.standard_normal((2, 10))
        W = sgd_run(k, ds, eta, 0.0, b, record=False).predictor(X_s)
        C = minibatch_closed_form(k, ds.X, ds.Y, eta, b, X_s)
        assert np.max(np.abs(W - C)) < 1e-8 * max(1.0, np.max(np.abs(ds.Y)))

    def test_block_out_of_range(self):
        with pytest.raises(TargetCorrError):
            minibatch_closed_form(RBF(0.1), np.zeros((1, 3)), np.zeros((1, 3)), 0.1, 4, np.zeros((1, 1)))


class TestSgdRun:
    def test_first_step(self, rng):
        k = scaled_tanh(rng.standard_normal((8, 1)))
        ds = OrderedDataset(rng.standard_normal((1, 3)), rng.standard_normal((2, 3)))
        run = sgd_run(k, ds, 0.3)
        expected = 0.3 * np.outer(ds.Y[:, 0], k.features(ds.X[:, :1])[:, 0])
        np.testing.assert_allclose(run.trajectory[1].W, expected, rtol=0, atol=1e-15)
        assert [s.step for s in run.trajectory] == [0, 1, 2, 3]
        np.testing.assert_array_equal(run.trajectory[0].W, 0.0)

    @pytest.mark.parametrize("gamma", [0.0, 0.7])
    def test_zero_targets_fixed_point(self, rng, gamma):
        ds = OrderedDataset(rng.standard_normal((1, 5)), np.zeros((1, 5)))
        run = sgd_run(scaled_tanh(rng.standard_normal((4, 1))), ds, 0.4, gamma)
        assert all(np.all(s.W == 0) for s in run.trajectory)

    def test_needs_features(self):
        with pytest.raises(ExplicitFeaturesRequired, match="explicit features required"):
            sgd_run(RBF(0.1), OrderedDataset(np.zeros((1, 2)), np.zeros((1, 2))), 0.1)

    def test_targets_override(self, rng):
        k = scaled_tanh(rng.standard_normal((6, 1)))
        ds = OrderedDataset(rng.standard_normal((1, 4)), rng.standard_normal((1, 4)))
        Z = rng.standard_normal((1, 4))
        a = sgd_run(k, ds, 0.2, targets_override=Z).final.W
        b = sgd_run(k, ds.with_targets(Z), 0.2).final.W
        np.testing.assert_array_equal(a, b)

    def test_no_recording(self, rng):
        ds = OrderedDataset(rng.standard_normal((1, 4)), rng.standard_normal((1, 4)))
        run = sgd_run(linear_kernel(), ds, 0.1, record=False)
        assert run.trajectory == [] and run.final.step == 4

    def test_epochs_equal_concatenation(self, rng):
        k = scaled_tanh(rng.standard_normal((16, 1)))
        ds = OrderedDataset(rng.standard_normal((1, 10)), rng.standard_normal((1, 10)))
        X_s = rng.standard_normal((1, 5))
        W = sgd_run(k, ds, 0.3, epochs=3, record=False).predictor(X_s)
        rep = repeat_epochs(ds, 3)
        C = online_closed_form(k, rep.X, rep.Y, 0.3, 0.0, X_s)
        assert np.max(np.abs(W - C)) < 1e-10


class TestPredictor:
    def test_online_prefix(self, gp_task):
        train, test, _ = gp_task
        full = fit_online(RBF(0.1), train.X, train.Y, 0.4)
        part = fit_online(RBF(0.1), train.X[:, :15], train.Y[:, :15], 0.4)
        np.testing.assert_allclose(full.prefix(15)(test.X), part(test.X), rtol=0, atol=1e-12)

    def test_minibatch_prefix_at_block_boundary(self, gp_task):
        train, test, _ = gp_task
        full = fit_minibatch(RBF(0.1), train.X, train.Y, 0.4, 4)
        part = fit_minibatch(RBF(0.1), train.X[:, :16], train.Y[:, :16], 0.4, 4)
        np.testing.assert_allclose(full.prefix(16)(test.X), part(test.X), rtol=0, atol=1e-12)

    def test_decayed_prefix_refused(self, gp_task):
        train, _, _ = gp_task
        with pytest.raises(TargetCorrError):
            fit_online(RBF(0.1), train.X, train.Y, 0.4, 0.5).prefix(3)
        with pytest.raises(TargetCorrError):
            fit_offline(RBF(0.1), train.X, train.Y, 0.5).prefix(3)

    def test_descriptor_is_json(self, gp_task):
        train, _, _ = gp_task
        d = fit_offline(RBF(0.1), train.X, train.Y, 1.0).descriptor("data.csv", "coef.csv")
        back = json.loads(json.dumps(d))
        assert back["form"] == "offline" and back["kernel"]["kind"] == "rbf" and back["dataset"] == "data.csv"


class TestTypes:
    @pytest.mark.parametrize("kw", [{"eta": 0.0}, {"gamma": -1.0}, {"gamma_o": -1.0}, {"b": 0}, {"b": 1.5}])
    def test_hyperparams_validation(self, kw):
        with pytest.raises(TargetCorrError):
            HyperParams(**kw)

    def test_dataset_columns(self):
        with pytest.raises(DimensionError):
            OrderedDataset(np.zeros((1, 3)), np.zeros((1, 4)))

    def test_take_preserves_pairs(self, rng):
        ds = OrderedDataset(rng.standard_normal((2, 5)), rng.standard_normal((1, 5)), np.arange(5))
        sub = ds.take([4, 0])
        np.testing.assert_array_equal(sub.X, ds.X[:, [4, 0]])
        np.testing.assert_array_equal(sub.labels, [4, 0])
