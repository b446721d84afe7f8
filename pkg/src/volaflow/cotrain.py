"""Co-training of a transform with the HAR predictor.

Each iteration transforms the training panel with the current parameters,
refits HAR by least squares and the residual density by moments, then takes
one Adam ascent step on the transform parameters along the gradient of the
change-of-variable log-likelihood

    sum_s  log p(z_{s+1} - zhat_{s+1})  +  log f'(x_{s+1})

with the HAR coefficients and residual variance held fixed. Parameter
snapshots are scored on the validation region and the best one is kept.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import gammaln

from .errors import DivergenceError, InputError
from .har import (
    MIN_HISTORY,
    HarParams,
    build_har_dataset,
    lag_features,
    lag_features_vjp,
    ols_fit,
    predict_rows,
    residuals,
)
from .marketdata import RvPanel
from .transforms import Transform, transform_from_dict

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-8
DF_BRACKET = (2.1, 1e6)
_LOG_2PI = math.log(2 * math.pi)


# -- residual densities ---------------------------------------------------------


def gaussian_logpdf(eps, variance):
    if not variance > 0:
        raise ValueError("variance must be positive")
    eps = np.asarray(eps, dtype=float)
    return -0.5 * (_LOG_2PI + math.log(variance)) - eps * eps / (2 * variance)


def student_t_logpdf(eps, variance, df):
    """Student-t parameterized by its variance (not its scale), zero mean."""
    if not variance > 0:
        raise ValueError("variance must be positive")
    if not df > 2:
        raise ValueError("degrees of freedom must exceed 2")
    eps = np.asarray(eps, dtype=float)
    scale2 = (df - 2) * variance
    return (
        gammaln((df + 1) / 2)
        - 0.5 * math.log(math.pi * scale2)
        - gammaln(df / 2)
        - (df + 1) / 2 * np.log1p(eps * eps / scale2)
    )


def estimate_residual_variance(eps) -> float:
    """Sum of squares over (n - 1), with the mean fixed at zero."""
    eps = np.asarray(eps, dtype=float).ravel()
    if eps.size < 2:
        raise ValueError("variance estimate needs at least 2 residuals")
    return float(eps @ eps / (eps.size - 1))


def _golden_max(fn, lo, hi, tol=1e-7):
    inv_phi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = fn(c), fn(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = fn(d)
    best = max((fn(lo), lo), (fc, c), (fd, d), (fn(hi), hi))
    return best[1]


def fit_student_df(eps, variance) -> float:
    """Maximum-likelihood degrees of freedom by golden-section search on log df."""
    eps = np.asarray(eps, dtype=float).ravel()
    if eps.size < 3:
        raise ValueError("df estimate needs at least 3 residuals")

    def loglik(log_df):
        return float(np.sum(student_t_logpdf(eps, variance, math.exp(log_df))))

    lo, hi = (math.log(b) for b in DF_BRACKET)
    return float(min(max(math.exp(_golden_max(loglik, lo, hi)), DF_BRACKET[0]), DF_BRACKET[1]))


@dataclass(frozen=True)
class ResidualModel:
    kind: str = "gaussian"
    variance: float = 1.0
    df: float | None = None
    mu: float = 0.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "student_t"):
            raise InputError(f"unknown residual kind {self.kind!r}")
        if not self.variance > 0:
            raise ValueError("residual variance must be positive")
        if self.kind == "student_t" and not (self.df is not None and self.df > 2):
            raise ValueError("student_t residuals need df > 2")
        if self.mu != 0.0:
            raise ValueError("residual mean is fixed at zero")

    def logpdf(self, eps):
        if self.kind == "gaussian":
            return gaussian_logpdf(eps, self.variance)
        return student_t_logpdf(eps, self.variance, self.df)

    def dlogpdf(self, eps):
        eps = np.asarray(eps, dtype=float)
        if self.kind == "gaussian":
            return -eps / self.variance
        return -(self.df + 1) * eps / ((self.df - 2) * self.variance + eps * eps)

    @classmethod
    def fit(cls, eps, kind: str = "gaussian") -> "ResidualModel":
        variance = max(estimate_residual_variance(eps), VARIANCE_FLOOR)
        if kind == "student_t":
            return cls(kind, variance, fit_student_df(eps, variance))
        return cls(kind, variance)

    def to_dict(self):
        return {"kind": self.kind, "mu": self.mu, "variance": self.variance, "df": self.df}

    @classmethod
    def from_dict(cls, data):
        return cls(data["kind"], float(data["variance"]), data.get("df"), float(data.get("mu", 0.0)))


# -- objective ------------------------------------------------------------------


def _as_windows(x):
    x = np.asarray(x, dtype=float)
    return x[None, :] if x.ndim == 1 else x


def loglik_terms(x_window, transform: Transform, har: HarParams, res: ResidualModel, start=MIN_HISTORY):
    """(residual-density term, Jacobian term) per predictable timestep.

    Targets are ``start..end`` of each window; the window supplies its own lags.
    """
    x = _as_windows(x_window)
    if x.shape[-1] < start + 1:
        raise InputError(f"window of length {x.shape[-1]} has no target after {start} lags")
    z, logd = transform.forward_log_deriv(x)
    zhat = predict_rows(lag_features(z, start, x.shape[-1]), har)
    eps = z[..., start:] - zhat
    return res.logpdf(eps), logd[..., start:]


def window_loglik(x_window, transform: Transform, har: HarParams, res: ResidualModel) -> float:
    """Change-of-variable log-likelihood of one observed window."""
    if np.ndim(x_window) != 1:
        raise InputError("window_loglik takes a single 1-D window")
    if len(x_window) < MIN_HISTORY + 1:
        raise InputError(f"window needs at least {MIN_HISTORY + 1} values, got {len(x_window)}")
    dens, jac = loglik_terms(x_window, transform, har, res)
    return float(dens.sum() + jac.sum())


def batch_objective(windows, transform: Transform, har: HarParams, res: ResidualModel):
    """Mean window log-likelihood over a batch and its gradient w.r.t. theta (frozen har, res)."""
    x = _as_windows(windows)
    n_win, length = x.shape
    start = MIN_HISTORY
    slopes = har.slopes

    def tail(z, logd):
        z = z.reshape(x.shape)
        logd = logd.reshape(x.shape)
        eps = z[:, start:] - predict_rows(lag_features(z, start, length), har)
        value = float((res.logpdf(eps).sum() + logd[:, start:].sum()) / n_win)
        de = res.dlogpdf(eps) / n_win
        dz = lag_features_vjp(-de[..., None] * slopes, start, length)
        dz[:, start:] += de
        dlogd = np.zeros_like(logd)
        dlogd[:, start:] = 1.0 / n_win
        return value, dz.ravel(), dlogd.ravel()

    return transform.value_and_grad(x.ravel(), tail)


# -- optimizer ------------------------------------------------------------------


class Adam:
    """Adam on a flat parameter vector (minimizes)."""

    def __init__(self, lr=1e-2, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params, grad):
        params = np.asarray(params, dtype=float)
        grad = np.asarray(grad, dtype=float)
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)


# -- training -------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 200
    eval_every: int = 5
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    stocks_per_batch: int = 16
    window_length: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.iterations >= self.eval_every >= 1:
            raise InputError("need iterations >= eval_every >= 1")
        if self.stocks_per_batch < 1:
            raise InputError("stocks_per_batch must be >= 1")
        if self.window_length is not None and self.window_length < MIN_HISTORY + 1:
            raise InputError(f"window_length must be >= {MIN_HISTORY + 1}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Snapshot:
    transform: Transform
    har: HarParams
    residual: ResidualModel
    val_loglik: float
    iteration: int

    def to_dict(self):
        return {
            "iteration": self.iteration,
            "val_loglik": self.val_loglik,
            "transform": self.transform.to_dict(),
            "har": self.har.to_dict(),
            "residual": self.residual.to_dict(),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            transform_from_dict(data["transform"]),
            HarParams.from_dict(data["har"]),
            ResidualModel.from_dict(data["residual"]),
            float(data["val_loglik"]),
            int(data["iteration"]),
        )


@dataclass
class TrainResult:
    best: Snapshot
    history: list[tuple[int, float]]
    diagnostics: list[str] = field(default_factory=list)
    aborted: bool = False


def fit_latent_model(transform: Transform, x_train: np.ndarray, residual_kind="gaussian"):
    """OLS HAR and residual density on the pooled transformed training region."""
    z = transform.forward(x_train)
    data = build_har_dataset(z, MIN_HISTORY, x_train.shape[-1])
    har = ols_fit(data)
    return har, ResidualModel.fit(residuals(data, har), residual_kind)


def region_loglik(x, start, stop, transform, har, res) -> float:
    """Mean per-timestep log-likelihood of targets ``start..stop-1``; earlier values serve as lags."""
    x = _as_windows(x)[:, :stop]
    z, logd = transform.forward_log_deriv(x)
    eps = z[:, start:] - predict_rows(lag_features(z, start, stop), har)
    return float(np.mean(res.logpdf(eps) + logd[:, start:]))


def _snapshot(transform, x, split, residual_kind, iteration):
    train, valid, _ = split
    har, res = fit_latent_model(transform, x[:, :train], residual_kind)
    if valid > 0:
        val = region_loglik(x, train, train + valid, transform, har, res)
    else:
        val = region_loglik(x, MIN_HISTORY, train, transform, har, res)
    if not math.isfinite(val):
        raise DivergenceError(f"non-finite validation log-likelihood at iteration {iteration}")
    return Snapshot(transform, har, res, val, iteration)


def train(panel: RvPanel, transform: Transform, cfg: TrainConfig = TrainConfig(),
          residual_kind: str = "gaussian") -> TrainResult:
    """Co-train ``transform`` (starting point) with HAR; return the best validation snapshot.

    A snapshot of the starting parameters is recorded at iteration 0, then
    one every ``cfg.eval_every`` iterations.
    """
    x = panel.values
    n_stocks = x.shape[0]
    train_len = panel.split[0]
    window = cfg.window_length or train_len
    if window > train_len:
        raise InputError(f"window_length {window} exceeds training length {train_len}")
    rng = np.random.default_rng(cfg.seed)

    snapshots = [_snapshot(transform, x, panel.split, residual_kind, 0)]
    diagnostics: list[str] = []
    aborted = False
    if transform.param_count > 0:
        adam = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
        theta = transform.params()
        current = transform
        x_train = x[:, :train_len]
        batch_size = min(cfg.stocks_per_batch, n_stocks)
        for it in range(1, cfg.iterations + 1):
            stocks = np.sort(rng.choice(n_stocks, size=batch_size, replace=False))
            offsets = rng.integers(0, train_len - window + 1, size=batch_size)
            windows = np.stack([x_train[s, o:o + window] for s, o in zip(stocks, offsets)])
            try:
                har, res = fit_latent_model(current, x_train, residual_kind)
                value, grad = batch_objective(windows, current, har, res)
                if not (math.isfinite(value) and np.all(np.isfinite(grad))):
                    raise DivergenceError(f"non-finite objective at iteration {it}")
                theta = adam.step(theta, -grad)
                current = transform.with_params(theta)
                if it % cfg.eval_every == 0:
                    snapshots.append(_snapshot(current, x, panel.split, residual_kind, it))
            except DivergenceError as exc:
                msg = f"training aborted at iteration {it}: {exc}"
                logger.warning(msg)
                diagnostics.append(msg)
                aborted = True
                break
            logger.debug("iteration %d objective %.6f", it, value)

    best = max(snapshots, key=lambda s: s.val_loglik)
    history = [(s.iteration, s.val_loglik) for s in snapshots]
    return TrainResult(best, history, diagnostics, aborted)


# -- prediction -----------------------------------------------------------------


@dataclass
class PanelPrediction:
    symbols: list[str]
    predicted: np.ndarray  # (S, n) standardized RV, NaN where excluded
    actual: np.ndarray
    latent_predicted: np.ndarray
    excluded: int = 0

    def pairs(self, i: int):
        keep = np.isfinite(self.predicted[i])
        return self.predicted[i][keep], self.actual[i][keep]


def predict_panel(panel: RvPanel, snapshot: Snapshot, region: str = "test") -> PanelPrediction:
    """One-step forecasts of every target in ``region`` from true past values."""
    start, stop = panel.region(region)
    start = max(start, MIN_HISTORY)
    x = panel.values[:, :stop]
    tf = snapshot.transform
    z = tf.forward(x)
    zhat = predict_rows(lag_features(z, start, stop), snapshot.har)
    xhat = np.asarray(tf.inverse_or_nan(zhat))
    excluded = int(np.count_nonzero(~np.isfinite(xhat)))
    if excluded:
        warnings.warn(f"{excluded} forecast(s) outside the transform's range were excluded")
    xhat = np.where(np.isfinite(xhat), xhat, np.nan)
    return PanelPrediction(panel.symbols, xhat, x[:, start:stop].copy(), zhat, excluded)


def in_sample_residuals(panel: RvPanel, snapshot: Snapshot) -> np.ndarray:
    """Latent HAR residuals on the training region, (S, train_len - 22)."""
    train_len = panel.split[0]
    z = snapshot.transform.forward(panel.values[:, :train_len])
    return z[:, MIN_HISTORY:] - predict_rows(lag_features(z, MIN_HISTORY, train_len), snapshot.har)


def fit_scalar_param(family: str, panel: RvPanel, cfg: TrainConfig = TrainConfig(),
                     residual_kind="gaussian", **options) -> Transform:
    """Co-train one of the analytical families and return its fitted transform."""
    from .transforms import initial_transform

    start = initial_transform(family, np.random.default_rng(cfg.seed), **options)
    return train(panel, start, cfg, residual_kind).best.transform
