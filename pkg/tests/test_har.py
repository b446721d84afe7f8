import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from volaflow.errors import InputError, SingularDesignError
from volaflow.har import (
    HarDataset,
    HarParams,
    build_har_dataset,
    design_matrix,
    har_predict,
    lag_features,
    lag_features_vjp,
    ols_fit,
    predict_rows,
    residuals,
)

BETA = HarParams(0.1, 0.4, 0.03, 0.01)


def normal_equations(data):
    X = design_matrix(data.features)
    return np.linalg.solve(X.T @ X, X.T @ data.targets)


def ar_panel(rng, n_series=3, length=200):
    return rng.normal(size=(n_series, length)).cumsum(axis=1) * 0.1 + rng.normal(size=(n_series, length))


class TestDataset:
    def test_constant_series(self):
        d = build_har_dataset(np.full(40, 2.5))
        assert_allclose(d.features, np.tile([2.5, 12.5, 55.0], (18, 1)))
        assert_allclose(d.targets, 2.5)

    def test_ramp(self):
        d = build_har_dataset(np.arange(1.0, 31.0))
        row = int(np.flatnonzero(d.targets == 24)[0])
        assert_array_equal(d.features[row], [23, 105, 275])

    def test_first_target_needs_22_lags(self):
        d = build_har_dataset(np.arange(30.0))
        assert d.targets[0] == 22.0  # 0-based index 22 is the 23rd value
        assert len(d) == 8
        with pytest.raises(InputError):
            build_har_dataset(np.arange(30.0), start=21)

    def test_short_series_named(self):
        with pytest.raises(InputError, match="series short"):
            build_har_dataset([np.arange(40.0), np.arange(20.0)], names=["long", "short"])

    def test_no_cross_series_leakage(self):
        a = np.full(30, 1.0)
        b = np.full(30, 1000.0)
        d = build_har_dataset([a, b])
        assert len(d) == 2 * 8
        first_b = d.origin[:, 0] == 1
        assert_allclose(d.features[first_b], np.tile([1000, 5000, 22000], (8, 1)))
        assert_allclose(d.features[~first_b], np.tile([1, 5, 22], (8, 1)))

    def test_stack_matches_loop(self, rng):
        z = rng.normal(size=(4, 60))
        feats = lag_features(z, 22, 60)
        for i in range(4):
            assert_allclose(feats[i], lag_features(z[i], 22, 60), rtol=0, atol=1e-12)

    def test_vjp_is_adjoint(self, rng):
        z = rng.normal(size=50)
        g = rng.normal(size=(28, 3))
        lhs = np.sum(lag_features(z, 22, 50) * g)
        rhs = z @ lag_features_vjp(g, 22, 50)
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestOls:
    def test_matches_normal_equations(self, rng):
        for _ in range(20):
            d = build_har_dataset(ar_panel(rng))
            assert_allclose(ols_fit(d).as_array(), normal_equations(d), rtol=0, atol=1e-8)

    def test_noiseless_recovery(self, rng):
        z = rng.normal(size=(3, 150))
        d = build_har_dataset(z)
        clean = HarDataset(d.features, predict_rows(d.features, BETA), d.origin)
        assert_allclose(ols_fit(clean).as_array(), BETA.as_array(), rtol=0, atol=1e-10)

    def test_zero_targets(self, rng):
        d = build_har_dataset(ar_panel(rng))
        zero = HarDataset(d.features, np.zeros(len(d)), d.origin)
        assert_allclose(ols_fit(zero).as_array(), 0, atol=1e-12)

    def test_constant_series_singular(self):
        with pytest.raises(SingularDesignError):
            ols_fit(build_har_dataset(np.full(60, 3.0)))

    def test_too_few_rows(self):
        d = build_har_dataset(np.arange(25.0))
        with pytest.raises(SingularDesignError):
            ols_fit(d)

    def test_optimality(self, rng):
        d = build_har_dataset(ar_panel(rng))
        beta = ols_fit(d).as_array()
        sse = np.sum(residuals(d, HarParams.from_array(beta)) ** 2)
        for j in range(4):
            for s in (-1e-3, 1e-3):
                b = beta.copy()
                b[j] += s
                assert np.sum(residuals(d, HarParams.from_array(b)) ** 2) >= sse

    def test_residuals_orthogonal(self, rng):
        d = build_har_dataset(ar_panel(rng))
        r = residuals(d, ols_fit(d))
        X = design_matrix(d.features)
        assert np.max(np.abs(X.T @ r)) / np.abs(X).max() < 1e-8
        assert abs(r.sum()) < 1e-8

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.1, 10), st.floats(-5, 5), st.integers(0, 1000))
    def test_affine_equivariance(self, a, c, seed):
        z = ar_panel(np.random.default_rng(seed), 2, 80)
        p = ols_fit(build_har_dataset(z))
        q = ols_fit(build_har_dataset(a * z + c))
        f1 = lag_features(z, 22, 80)
        f2 = lag_features(a * z + c, 22, 80)
        assert_allclose(predict_rows(f2, q), a * predict_rows(f1, p) + c, rtol=0, atol=1e-9 * max(1, a, abs(c)))

    def test_pooled_equals_concatenated(self, rng):
        z = ar_panel(rng, 3, 90)
        parts = [build_har_dataset(s) for s in z]
        pooled = ols_fit(build_har_dataset(z))
        perm = rng.permutation(3)
        concat = ols_fit(HarDataset.concat([parts[i] for i in perm]))
        assert_allclose(pooled.as_array(), concat.as_array(), rtol=0, atol=1e-10)


class TestPredict:
    def test_random_walk(self, rng):
        h = rng.normal(size=30)
        assert har_predict(h, HarParams(0, 1, 0, 0)) == pytest.approx(h[-1])

    def test_constant(self, rng):
        assert har_predict(rng.normal(size=22), HarParams(1.5, 0, 0, 0)) == 1.5

    def test_ramp(self):
        assert har_predict(np.arange(1.0, 23.0), BETA) == pytest.approx(14.43, abs=1e-12)

    def test_short_history(self):
        with pytest.raises(InputError):
            har_predict(np.ones(21), BETA)

    def test_residual_identities(self, rng):
        d = build_har_dataset(rng.normal(size=60))
        assert_array_equal(residuals(d, HarParams(0, 0, 0, 0)), d.targets)
        clean = HarDataset(d.features, predict_rows(d.features, BETA), d.origin)
        assert_allclose(residuals(clean, BETA), 0, atol=1e-14)

    def test_json(self):
        assert HarParams.from_dict(BETA.to_dict()) == BETA
        assert set(BETA.to_dict()) == {"beta0", "beta_d", "beta_w", "beta_m"}
        with pytest.raises(ValueError):
            HarParams(np.nan, 0, 0, 0)
