import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate, stats

from volaflow.cotrain import (
    Adam,
    ResidualModel,
    Snapshot,
    TrainConfig,
    batch_objective,
    estimate_residual_variance,
    fit_latent_model,
    fit_student_df,
    gaussian_logpdf,
    in_sample_residuals,
    loglik_terms,
    predict_panel,
    region_loglik,
    student_t_logpdf,
    train,
    window_loglik,
)
from volaflow.errors import InputError
from volaflow.har import HarParams, build_har_dataset, ols_fit
from volaflow.synth import SynthConfig, generate_panel
from volaflow.transforms import Identity, TanhMix, Transform, YeoJohnson, initial_transform


class Scaled(Transform):
    """a * inner(x) + c, for the change-of-variable cancellation check."""

    family = "scaled"

    def __init__(self, inner, a, c):
        self.inner, self.a, self.c = inner, a, c

    def params(self):
        return np.zeros(0)

    def with_params(self, theta):
        return self

    def forward(self, x):
        return self.a * self.inner.forward(x) + self.c

    def log_deriv(self, x):
        return self.inner.log_deriv(x) + math.log(self.a)

    def inverse_or_nan(self, z):
        return self.inner.inverse_or_nan((np.asarray(z) - self.c) / self.a)

    def to_dict(self):
        return {}


@pytest.fixture(scope="module")
def small():
    cfg = SynthConfig(n_stocks=6, n_days=160, split=(100, 30, 30), seed=3)
    return generate_panel(cfg)


FAST = TrainConfig(iterations=20, eval_every=5, stocks_per_batch=4, seed=11)


# -- densities -------------------------------------------------------------------


def test_gaussian_logpdf_examples():
    c = -0.5 * math.log(2 * math.pi)
    assert gaussian_logpdf(0.0, 1.0) == pytest.approx(c, abs=1e-12)
    assert gaussian_logpdf(0.0, 1.0) == pytest.approx(-0.91894, abs=1e-5)
    assert gaussian_logpdf(1.0, 1.0) == pytest.approx(c - 0.5, abs=1e-12)
    assert gaussian_logpdf(2.0, 4.0) == pytest.approx(-0.5 * math.log(8 * math.pi) - 0.5, abs=1e-12)
    assert_allclose(gaussian_logpdf(np.array([0.3, -1.2]), 2.5), stats.norm.logpdf([0.3, -1.2], scale=math.sqrt(2.5)))


@pytest.mark.parametrize("v", [0.0, -1.0])
def test_gaussian_logpdf_rejects_nonpositive_variance(v):
    with pytest.raises(ValueError):
        gaussian_logpdf(0.0, v)


def test_student_t_logpdf_exact_gamma_value():
    assert student_t_logpdf(0.0, 1.0, 3.0) == pytest.approx(math.log(2 / math.pi), abs=1e-12)
    assert student_t_logpdf(0.0, 1.0, 3.0) == pytest.approx(-0.45158, abs=1e-5)


def test_student_t_matches_scipy_scaled_t():
    eps = np.linspace(-4, 4, 9)
    v, d = 1.7, 6.5
    # scipy's t with scale s has variance s^2 d/(d-2); ours has variance v
    s = math.sqrt(v * (d - 2) / d)
    expected = stats.t.logpdf(eps, d, scale=s)
    assert_allclose(student_t_logpdf(eps, v, d), expected, rtol=1e-12)


@pytest.mark.parametrize("eps", [0.0, 1.0, 2.0])
def test_student_t_gaussian_limit(eps):
    assert abs(student_t_logpdf(eps, 1.0, 1e6) - gaussian_logpdf(eps, 1.0)) < 1e-3


def test_student_t_normalizes():
    total, _ = integrate.quad(lambda e: math.exp(student_t_logpdf(e, 1.0, 5.0)), -np.inf, np.inf,
                              epsabs=1e-12, epsrel=1e-12)
    assert abs(total - 1.0) < 1e-6


@pytest.mark.parametrize("df", [2.0, 1.5])
def test_student_t_rejects_small_df(df):
    with pytest.raises(ValueError):
        student_t_logpdf(0.0, 1.0, df)


def test_residual_variance_examples():
    assert estimate_residual_variance([1.0, -1.0]) == 2.0
    c = 0.7
    assert estimate_residual_variance([c] * 4) == pytest.approx(4 * c * c / 3, rel=1e-15)
    assert estimate_residual_variance([0.0, 0.0, 0.0]) == 0.0
    with pytest.raises(ValueError):
        estimate_residual_variance([1.0])


def test_variance_floor_on_perfect_fit():
    res = ResidualModel.fit(np.zeros(10))
    assert res.variance == 1e-8


def test_fit_student_df_gaussian_sample():
    eps = np.random.default_rng(0).standard_normal(10000)
    assert fit_student_df(eps, estimate_residual_variance(eps)) >= 100


def test_fit_student_df_t5_sample():
    eps = np.random.default_rng(1).standard_t(5, 10000)
    df = fit_student_df(eps, estimate_residual_variance(eps))
    assert 3.5 <= df <= 7


def test_fit_student_df_two_values():
    eps = np.array([1.0, -1.0] * 20)
    df = fit_student_df(eps, estimate_residual_variance(eps))
    assert np.isfinite(df) and 2.1 <= df <= 1e6


def test_residual_model_validation_and_roundtrip():
    with pytest.raises(ValueError):
        ResidualModel("student_t", 1.0, 2.0)
    with pytest.raises(ValueError):
        ResidualModel("gaussian", 0.0)
    with pytest.raises(ValueError):
        ResidualModel("gaussian", 1.0, mu=0.1)
    with pytest.raises(InputError):
        ResidualModel("laplace", 1.0)
    r = ResidualModel("student_t", 0.8, 4.5)
    assert ResidualModel.from_dict(r.to_dict()) == r


@pytest.mark.parametrize("res", [ResidualModel("gaussian", 0.6), ResidualModel("student_t", 0.6, 4.0)])
def test_dlogpdf_matches_finite_difference(res):
    eps = np.linspace(-3, 3, 13)
    h = 1e-6
    fd = (res.logpdf(eps + h) - res.logpdf(eps - h)) / (2 * h)
    assert_allclose(res.dlogpdf(eps), fd, rtol=1e-6, atol=1e-8)


# -- window log-likelihood -------------------------------------------------------


def test_window_loglik_random_walk():
    rng = np.random.default_rng(5)
    inc = rng.normal(0, 0.5, 59)
    x = np.concatenate([[0.0], np.cumsum(inc)])
    har = HarParams(0.0, 1.0, 0.0, 0.0)
    res = ResidualModel("gaussian", 0.25)
    expected = np.sum(gaussian_logpdf(inc[21:], 0.25))
    assert window_loglik(x, Identity(), har, res) == pytest.approx(expected, abs=1e-10)


def test_window_loglik_decomposes_exactly(rng):
    x = rng.normal(size=40)
    tf = TanhMix.from_weights([1.2, 0.5], [0.4, 1.1], [0.1, -0.3])
    har = HarParams(0.05, 0.4, 0.2, 0.1)
    res = ResidualModel("student_t", 0.7, 6.0)
    dens, jac = (t[0] for t in loglik_terms(x, tf, har, res))
    z = tf.forward(x)
    feats = np.array([[z[s - 1], z[s - 5:s].sum(), z[s - 22:s].sum()] for s in range(22, 40)])
    zhat = 0.05 + feats @ np.array([0.4, 0.2, 0.1])
    assert_allclose(dens, res.logpdf(z[22:] - zhat), rtol=1e-12)
    assert_allclose(jac, tf.log_deriv(x)[22:], rtol=1e-12)
    assert window_loglik(x, tf, har, res) == float(dens.sum() + jac.sum())


def test_window_loglik_short_window():
    with pytest.raises(InputError):
        window_loglik(np.zeros(22), Identity(), HarParams(0, 0, 0, 0), ResidualModel())
    window_loglik(np.zeros(23) + np.arange(23) * 0.01, Identity(), HarParams(0, 0, 0, 0), ResidualModel())


@pytest.mark.parametrize("inner", [Identity(), YeoJohnson(0.6), TanhMix.from_weights([1.0, 0.4], [0.5, 1.5], [0.0, 0.2])])
def test_affine_rescaling_cancels(small, inner):
    x = small.panel.values[:, :100]
    a, c = 3.0, -0.4
    har1, res1 = fit_latent_model(inner, x)
    har2, res2 = fit_latent_model(Scaled(inner, a, c), x)
    d1, j1 = loglik_terms(x, inner, har1, res1)
    d2, j2 = loglik_terms(x, Scaled(inner, a, c), har2, res2)
    assert_allclose(d1 + j1, d2 + j2, rtol=0, atol=1e-9)
    w = x[0, :60]
    assert window_loglik(w, inner, har1, res1) == pytest.approx(
        window_loglik(w, Scaled(inner, a, c), har2, res2), abs=1e-9)


@pytest.mark.parametrize("family", ["wallace", "yeo_johnson", "tanh_mix", "node"])
@pytest.mark.parametrize("kind", ["gaussian", "student_t"])
def test_batch_objective_gradient(small, family, kind):
    tf = initial_transform(family, np.random.default_rng(2), k=2, d=3.0, lam=0.7, init_scale=0.4)
    x = small.panel.values[:3, :60]
    har, res = fit_latent_model(tf, small.panel.values[:, :100], kind)
    value, grad = batch_objective(x, tf, har, res)
    expected = np.mean([window_loglik(w, tf, har, res) for w in x])
    assert value == pytest.approx(expected, rel=1e-12)
    theta = tf.params()
    fd = np.empty_like(theta)
    h = 1e-5
    for i in range(theta.size):
        vals = []
        for s in (2, 1, -1, -2):
            t = theta.copy()
            t[i] += s * h
            vals.append(batch_objective(x, tf.with_params(t), har, res)[0])
        fd[i] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
    scale = max(np.abs(fd).max(), 1e-8)
    assert np.abs(grad - fd).max() / scale < 1e-4


# -- optimizer and training -------------------------------------------------------


def test_adam_first_step_is_lr_times_sign():
    adam = Adam(lr=0.1)
    out = adam.step(np.zeros(3), np.array([2.0, -0.5, 0.0]))
    assert_allclose(out, [-0.1, 0.1, 0.0], atol=1e-8)


def test_adam_minimizes_quadratic():
    adam = Adam(lr=0.05)
    p = np.array([3.0, -2.0])
    for _ in range(2000):
        p = adam.step(p, 2 * p)
    assert np.abs(p).max() < 1e-2


def test_train_config_invariants():
    with pytest.raises(InputError):
        TrainConfig(iterations=3, eval_every=5)
    with pytest.raises(InputError):
        TrainConfig(eval_every=0)
    with pytest.raises(InputError):
        TrainConfig(window_length=10)


def test_identity_training_is_ols(small):
    result = train(small.panel, Identity(), FAST)
    x = small.panel.values[:, :100]
    expected = ols_fit(build_har_dataset(x, 22, 100))
    assert_allclose(result.best.har.as_array(), expected.as_array(), rtol=1e-12)
    assert result.history == [(0, result.best.val_loglik)]


def test_snapshot_schedule_and_selection(small):
    tf = initial_transform("node", np.random.default_rng(0))
    result = train(small.panel, tf, FAST)
    assert [i for i, _ in result.history] == [0, 5, 10, 15, 20]
    assert result.best.val_loglik == max(v for _, v in result.history)
    assert result.best.val_loglik >= result.history[0][1]
    assert all(np.isfinite(v) for _, v in result.history)


def test_validation_loglik_uses_training_fit(small):
    tf = YeoJohnson(0.8)
    result = train(small.panel, tf, TrainConfig(iterations=5, eval_every=5))
    snap0 = result.history[0][1]
    har, res = fit_latent_model(tf, small.panel.values[:, :100])
    assert snap0 == pytest.approx(region_loglik(small.panel.values, 100, 130, tf, har, res), rel=1e-12)


def test_training_is_deterministic(small):
    def run():
        tf = initial_transform("node", np.random.default_rng(4))
        return train(small.panel, tf, FAST).best

    a, b = run(), run()
    assert a.to_dict() == b.to_dict()


def test_co_training_beats_identity_on_warped_panel():
    sp = generate_panel(SynthConfig(n_stocks=16, n_days=200, split=(140, 30, 30), seed=9,
                                    har_beta=HarParams(0.0, 0.4, 0.08, 0.18 / 22), noise_variance=0.1))
    base = train(sp.panel, Identity(), FAST).best.val_loglik
    cfg = TrainConfig(iterations=60, eval_every=5, stocks_per_batch=16, seed=1)
    node = train(sp.panel, initial_transform("node", np.random.default_rng(0)), cfg).best.val_loglik
    assert node >= base


def test_snapshot_roundtrip(small):
    snap = train(small.panel, initial_transform("tanh_mix", np.random.default_rng(1), k=2), FAST).best
    back = Snapshot.from_dict(snap.to_dict())
    assert back.to_dict() == snap.to_dict()
    x = small.panel.values[0]
    assert_allclose(back.transform.forward(x), snap.transform.forward(x), rtol=0, atol=0)


# -- prediction -----------------------------------------------------------------


def test_identity_prediction_is_raw_har(small):
    snap = train(small.panel, Identity(), FAST).best
    pred = predict_panel(small.panel, snap, "test")
    x = small.panel.values
    b = snap.har.as_array()
    s = 137
    manual = b[0] + b[1] * x[2, s - 1] + b[2] * x[2, s - 5:s].sum() + b[3] * x[2, s - 22:s].sum()
    assert pred.predicted.shape == (6, 30)
    assert pred.predicted[2, s - 130] == pytest.approx(manual, abs=1e-12)
    assert_allclose(pred.actual, x[:, 130:160])


@pytest.mark.parametrize("family", ["wallace", "yeo_johnson", "tanh_mix", "node"])
def test_prediction_round_trip_and_ordering(small, family):
    tf = initial_transform(family, np.random.default_rng(6), d=2.0, lam=0.5, k=2, init_scale=0.5)
    har, res = fit_latent_model(tf, small.panel.values[:, :100])
    snap = Snapshot(tf, har, res, 0.0, 0)
    pred = predict_panel(small.panel, snap, "validation")
    ok = np.isfinite(pred.predicted)
    assert_allclose(tf.forward(pred.predicted[ok]), pred.latent_predicted[ok], rtol=0, atol=1e-9)
    zh, xh = pred.latent_predicted[ok], pred.predicted[ok]
    order = np.argsort(zh, kind="stable")
    assert np.all(np.diff(xh[order]) >= 0)


def test_in_sample_residuals_shape_and_mean(small):
    snap = train(small.panel, Identity(), FAST).best
    r = in_sample_residuals(small.panel, snap)
    assert r.shape == (6, 78)
    # OLS with intercept: pooled residuals average to zero
    assert abs(r.mean()) < 1e-10
