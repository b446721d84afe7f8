"""Heterogeneous autoregression on latent series.

Components are sums over the previous 1, 5 and 22 values (not means). Rows
from several series are pooled into one regression; lags never cross a
series boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import InputError, SingularDesignError

DAY, WEEK, MONTH = 1, 5, 22
MIN_HISTORY = MONTH


@dataclass(frozen=True)
class HarParams:
    beta0: float
    beta_d: float
    beta_w: float
    beta_m: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError("HAR coefficients must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.beta0, self.beta_d, self.beta_w, self.beta_m], dtype=float)

    @property
    def slopes(self) -> np.ndarray:
        return self.as_array()[1:]

    def to_dict(self) -> dict:
        return {"beta0": self.beta0, "beta_d": self.beta_d, "beta_w": self.beta_w, "beta_m": self.beta_m}

    @classmethod
    def from_dict(cls, data: dict) -> "HarParams":
        return cls(*(float(data[k]) for k in ("beta0", "beta_d", "beta_w", "beta_m")))

    @classmethod
    def from_array(cls, beta) -> "HarParams":
        return cls(*(float(b) for b in beta))


@dataclass(frozen=True)
class HarDataset:
    features: np.ndarray  # (n, 3): z_d, z_w, z_m
    targets: np.ndarray  # (n,)
    origin: np.ndarray  # (n, 2): series index, target timestep (0-based)

    def __len__(self):
        return len(self.targets)

    @staticmethod
    def concat(parts) -> "HarDataset":
        parts = list(parts)
        return HarDataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.targets for p in parts]),
            np.concatenate([p.origin for p in parts]),
        )


def lag_features(z: np.ndarray, start: int, stop: int) -> np.ndarray:
    """HAR components predicting targets ``start..stop-1`` along the last axis.

    Works on a single series ``(T,)`` or a stack ``(S, T)``; returns
    ``(..., stop - start, 3)``.
    """
    if start < MIN_HISTORY:
        raise InputError(f"first target index {start} leaves fewer than {MIN_HISTORY} lags")
    z = np.asarray(z, dtype=float)
    c = np.concatenate([np.zeros(z.shape[:-1] + (1,)), np.cumsum(z, axis=-1)], axis=-1)
    j = np.arange(start, stop)
    out = np.stack([c[..., j] - c[..., j - w] for w in (DAY, WEEK, MONTH)], axis=-1)
    # the daily component is a single value; take it exactly rather than by differencing
    out[..., 0] = z[..., j - 1]
    return out


def lag_features_vjp(grad: np.ndarray, start: int, length: int) -> np.ndarray:
    """Adjoint of :func:`lag_features`: pull (..., n, 3) cotangents back to (..., T)."""
    grad = np.asarray(grad, dtype=float)
    n = grad.shape[-2]
    out = np.zeros(grad.shape[:-2] + (length,))
    for col, w in enumerate((DAY, WEEK, MONTH)):
        g = grad[..., col]
        for lag in range(1, w + 1):
            out[..., start - lag : start - lag + n] += g
    return out


def build_har_dataset(latent, start: int = MIN_HISTORY, stop: int | None = None, names=None) -> HarDataset:
    """Pooled HAR rows for targets ``start..stop-1`` of every series."""
    series = [np.asarray(s, dtype=float) for s in (latent if np.ndim(latent[0]) else [latent])]
    names = list(names) if names is not None else [str(i) for i in range(len(series))]
    parts = []
    for idx, (name, z) in enumerate(zip(names, series)):
        end = len(z) if stop is None else stop
        if start < MIN_HISTORY or end > len(z) or end <= start:
            raise InputError(
                f"series {name}: targets [{start}, {end}) need {MIN_HISTORY} lags and "
                f"{end} values, has {len(z)}"
            )
        feats = lag_features(z, start, end)
        origin = np.column_stack([np.full(end - start, idx), np.arange(start, end)])
        parts.append(HarDataset(feats, z[start:end].copy(), origin))
    return HarDataset.concat(parts)


def design_matrix(features: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(len(features)), features])


def ols_fit(data: HarDataset) -> HarParams:
    """Least squares via QR of the design matrix."""
    X = design_matrix(data.features)
    n, k = X.shape
    if n < k:
        raise SingularDesignError(f"{n} rows cannot identify {k} coefficients")
    q, r = np.linalg.qr(X)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(n, k) * np.finfo(float).eps
    if diag.max() == 0 or np.any(diag <= tol):
        raise SingularDesignError("HAR design matrix is rank deficient (collinear components)")
    beta = solve_triangular(r, q.T @ data.targets)
    return HarParams.from_array(beta)


def har_predict(latent_history, p: HarParams) -> float:
    z = np.asarray(latent_history, dtype=float)
    if z.size < MIN_HISTORY:
        raise InputError(f"HAR prediction needs {MIN_HISTORY} past values, got {z.size}")
    feats = lag_features(z[-MIN_HISTORY:], MIN_HISTORY, MIN_HISTORY + 1)[0]
    return float(p.beta0 + feats @ p.slopes)


def predict_rows(features: np.ndarray, p: HarParams) -> np.ndarray:
    return p.beta0 + np.asarray(features) @ p.slopes


def residuals(data: HarDataset, p: HarParams) -> np.ndarray:
    return data.targets - predict_rows(data.features, p)
