"""Monotone scalar transforms mapping observed RV to the latent scale.

Every family exposes the same surface: ``forward``, ``inverse``,
``log_deriv`` (log of the strictly positive first derivative) and the
parameter gradients needed by the co-training loop. Parameters are held as
an unconstrained vector ``theta``; positivity constraints go through
softplus. Instances are immutable: ``with_params`` returns a new object.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod

import numpy as np
from scipy.special import expit, logsumexp

from .errors import InputError, TransformRangeError

# below this distance from 0 (or 2) Yeo-Johnson uses its log branches
YJ_LIMIT_TOL = 1e-7
TANH_BRACKET_CAP = 1e6


def softplus(r):
    return np.logaddexp(0.0, r)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


class Transform(ABC):
    family: str = ""

    @property
    def param_count(self) -> int:
        return self.params().size

    @abstractmethod
    def params(self) -> np.ndarray:
        """Copy of the unconstrained parameter vector."""

    @abstractmethod
    def with_params(self, theta) -> "Transform":
        ...

    @abstractmethod
    def forward(self, x):
        ...

    @abstractmethod
    def log_deriv(self, x):
        ...

    @abstractmethod
    def inverse_or_nan(self, z):
        """Inverse, with NaN wherever ``z`` is outside the attainable range."""

    def attainable_range(self) -> tuple[float, float]:
        return (-math.inf, math.inf)

    def inverse(self, z):
        z_arr = np.asarray(z, dtype=float)
        x = np.asarray(self.inverse_or_nan(z_arr))
        bad = ~np.isfinite(x)
        if np.any(bad):
            lo, hi = self.attainable_range()
            first = float(np.ravel(z_arr)[np.flatnonzero(np.ravel(bad))[0]])
            raise TransformRangeError(
                f"{self.family}: latent value {first!r} outside attainable range ({lo}, {hi})"
            )
        return x if x.ndim else float(x)

    def forward_log_deriv(self, x):
        return self.forward(x), self.log_deriv(x)

    def param_jacobian(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample gradients of forward and log_deriv w.r.t. theta, (n, p) each."""
        n = np.size(x)
        return np.zeros((n, 0)), np.zeros((n, 0))

    def vjp(self, x, dz, dlogd) -> np.ndarray:
        """Gradient of ``sum(dz * forward(x) + dlogd * log_deriv(x))`` w.r.t. theta."""
        jz, jl = self.param_jacobian(np.ravel(x))
        return np.ravel(dz) @ jz + np.ravel(dlogd) @ jl

    def value_and_grad(self, x, tail):
        """``tail(f(x), log f'(x)) -> (value, dvalue/dz, dvalue/dlogd)``; returns value and theta-gradient."""
        z, logd = self.forward_log_deriv(x)
        value, dz, dlogd = tail(z, logd)
        if self.param_count == 0:
            return value, np.zeros(0)
        return value, self.vjp(x, dz, dlogd)

    @abstractmethod
    def to_dict(self) -> dict:
        ...

    def __repr__(self):
        return f"{type(self).__name__}({self.to_dict()})"


class Identity(Transform):
    family = "identity"

    def params(self):
        return np.zeros(0)

    def with_params(self, theta):
        if np.size(theta):
            raise ValueError("identity transform has no parameters")
        return self

    def forward(self, x):
        return np.asarray(x, dtype=float) + 0.0

    def log_deriv(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def inverse_or_nan(self, z):
        return np.asarray(z, dtype=float) + 0.0

    def to_dict(self):
        return {"family": self.family, "params": {}}


def _log1p_ratio(u):
    """log1p(u)/u with the removable singularity at u = 0 filled in."""
    safe = np.where(u == 0, 1.0, u)
    return np.where(u == 0, 1.0, np.log1p(u) / safe)


def _wallace_r(u):
    """(log1p(u) - u/(1+u)) / u, by series where the difference cancels."""
    small = u < 1e-3
    us = np.where(small, u, 0.0)
    series = us / 2 - 2 * us**2 / 3 + 3 * us**3 / 4 - 4 * us**4 / 5
    ul = np.where(small, 1.0, u)
    direct = (np.log1p(ul) - ul / (1 + ul)) / ul
    return np.where(small, series, direct)


class Wallace(Transform):
    """Odd extension of Wallace's Student-t to normal approximation.

    ``f(x) = sign(x) (8d+1)/(8d+3) sqrt(d log(1 + x^2/d))`` with
    ``d = softplus(raw_d)``.
    """

    family = "wallace"

    def __init__(self, raw_d: float):
        self.raw_d = float(raw_d)

    @classmethod
    def from_d(cls, d: float) -> "Wallace":
        if not d > 0:
            raise ValueError("Wallace d must be positive")
        return cls(float(softplus_inv(d)))

    @property
    def d(self) -> float:
        return float(softplus(self.raw_d))

    @property
    def _k(self):
        d = self.d
        return (8 * d + 1) / (8 * d + 3)

    def params(self):
        return np.array([self.raw_d])

    def with_params(self, theta):
        (raw_d,) = np.asarray(theta, dtype=float)
        return Wallace(raw_d)

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        u = x * x / self.d
        return self._k * x * np.sqrt(_log1p_ratio(u))

    def log_deriv(self, x):
        x = np.asarray(x, dtype=float)
        u = x * x / self.d
        return math.log(self._k) - 0.5 * np.log(_log1p_ratio(u)) - np.log1p(u)

    def inverse_or_nan(self, z):
        z = np.asarray(z, dtype=float)
        d, k = self.d, self._k
        with np.errstate(over="ignore"):
            mag = np.sqrt(d * np.expm1((z / k) ** 2 / d))
        x = np.sign(z) * mag
        return np.where(np.isfinite(x), x, np.nan)

    def param_jacobian(self, x):
        x = np.ravel(np.asarray(x, dtype=float))
        d, k = self.d, self._k
        dk = 16.0 / (8 * d + 3) ** 2
        u = x * x / d
        q = _log1p_ratio(u)
        r = _wallace_r(u)
        sq = np.sqrt(q)
        df_dd = dk * x * sq + k * x * r / (2 * d * sq)
        dl_dd = dk / k - 0.5 * r / (q * d) + u / ((1 + u) * d)
        chain = float(expit(self.raw_d))
        return (df_dd * chain)[:, None], (dl_dd * chain)[:, None]

    def to_dict(self):
        return {"family": self.family, "params": {"raw_d": self.raw_d}}


def _expm1_ratio_grad(u):
    """d/du [expm1(u)/u] = (u e^u - expm1(u)) / u^2, series near 0."""
    small = np.abs(u) < 1e-2
    us = np.where(small, u, 0.0)
    series = 0.5 + us / 3 + us**2 / 8 + us**3 / 30 + us**4 / 144
    ul = np.where(small, 1.0, u)
    direct = (ul * np.exp(ul) - np.expm1(ul)) / ul**2
    return np.where(small, series, direct)


class YeoJohnson(Transform):
    family = "yeo_johnson"

    def __init__(self, lam: float):
        self.lam = float(lam)

    def params(self):
        return np.array([self.lam])

    def with_params(self, theta):
        (lam,) = np.asarray(theta, dtype=float)
        return YeoJohnson(lam)

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        lam, mu = self.lam, 2.0 - self.lam
        pos = x >= 0
        lp = np.log1p(np.where(pos, x, 0.0))
        ln = np.log1p(np.where(pos, 0.0, -x))
        if abs(lam) < YJ_LIMIT_TOL:
            fp = lp
        else:
            fp = np.expm1(lam * lp) / lam
        if abs(mu) < YJ_LIMIT_TOL:
            fn = -ln
        else:
            fn = -np.expm1(mu * ln) / mu
        return np.where(pos, fp, fn)

    def log_deriv(self, x):
        x = np.asarray(x, dtype=float)
        lam = self.lam
        return np.where(
            x >= 0,
            (lam - 1) * np.log1p(np.maximum(x, 0.0)),
            (1 - lam) * np.log1p(np.maximum(-x, 0.0)),
        )

    def attainable_range(self):
        lam, mu = self.lam, 2.0 - self.lam
        hi = -1.0 / lam if lam < -YJ_LIMIT_TOL else math.inf
        lo = 1.0 / mu if mu < -YJ_LIMIT_TOL else -math.inf
        return lo, hi

    def inverse_or_nan(self, z):
        z = np.asarray(z, dtype=float)
        lam, mu = self.lam, 2.0 - self.lam
        lo, hi = self.attainable_range()
        pos = z >= 0
        zp = np.where(pos, z, 0.0)
        zn = np.where(pos, 0.0, z)
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            if abs(lam) < YJ_LIMIT_TOL:
                xp = np.expm1(zp)
            else:
                xp = np.expm1(np.log1p(lam * zp) / lam)
            if abs(mu) < YJ_LIMIT_TOL:
                xn = -np.expm1(-zn)
            else:
                xn = -np.expm1(np.log1p(-mu * zn) / mu)
        x = np.where(pos, xp, xn)
        ok = (z > lo) & (z < hi) & np.isfinite(x)
        return np.where(ok, x, np.nan)

    def inverse(self, z):
        try:
            return super().inverse(z)
        except TransformRangeError as exc:
            branch = "x>=0 requires lambda*z+1>0" if self.lam < 0 else "x<0 requires (lambda-2)*z+1>0"
            raise TransformRangeError(f"{exc}; {branch}") from None

    def param_jacobian(self, x):
        x = np.ravel(np.asarray(x, dtype=float))
        lam, mu = self.lam, 2.0 - self.lam
        pos = x >= 0
        lp = np.log1p(np.where(pos, x, 0.0))
        ln = np.log1p(np.where(pos, 0.0, -x))
        df = np.where(pos, lp**2 * _expm1_ratio_grad(lam * lp), ln**2 * _expm1_ratio_grad(mu * ln))
        dl = np.where(pos, lp, -ln)
        return df[:, None], dl[:, None]

    def to_dict(self):
        return {"family": self.family, "params": {"lambda": self.lam}}


class TanhMix(Transform):
    """``f(x) = sum_i u_i tanh(v_i x + b_i)`` with softplus-positive u, v."""

    family = "tanh_mix"

    def __init__(self, raw_u, raw_v, b):
        self.raw_u = np.array(raw_u, dtype=float).ravel()
        self.raw_v = np.array(raw_v, dtype=float).ravel()
        self.b = np.array(b, dtype=float).ravel()
        if not (self.raw_u.size == self.raw_v.size == self.b.size >= 1):
            raise ValueError("tanh mixture needs k >= 1 equally sized u, v, b")
        for arr in (self.raw_u, self.raw_v, self.b):
            arr.flags.writeable = False

    @classmethod
    def from_weights(cls, u, v, b) -> "TanhMix":
        return cls(softplus_inv(u), softplus_inv(v), b)

    @property
    def k(self) -> int:
        return self.raw_u.size

    @property
    def u(self):
        return softplus(self.raw_u)

    @property
    def v(self):
        return softplus(self.raw_v)

    def params(self):
        return np.concatenate([self.raw_u, self.raw_v, self.b])

    def with_params(self, theta):
        theta = np.asarray(theta, dtype=float)
        k = self.k
        return TanhMix(theta[:k], theta[k : 2 * k], theta[2 * k :])

    def _pre(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., None] * self.v + self.b

    def forward(self, x):
        return np.tanh(self._pre(x)) @ self.u

    def _log_terms(self, a):
        abs_a = np.abs(a)
        log_sech2 = math.log(4.0) - 2 * abs_a - 2 * np.log1p(np.exp(-2 * abs_a))
        return np.log(self.u) + np.log(self.v) + log_sech2

    def log_deriv(self, x):
        return logsumexp(self._log_terms(self._pre(x)), axis=-1)

    def attainable_range(self):
        total = float(self.u.sum())
        return -total, total

    def inverse_or_nan(self, z):
        z = np.asarray(z, dtype=float)
        shape = z.shape
        zf = z.ravel()
        total = float(self.u.sum())
        ok = np.isfinite(zf) & (np.abs(zf) < total)
        # bracket doubling from B = 1 up to the cap
        bound = np.ones_like(zf)
        enclosed = np.zeros_like(ok)
        while True:
            enclosed = ok & (self.forward(-bound) < zf) & (zf < self.forward(bound))
            grow = ok & ~enclosed & (bound < TANH_BRACKET_CAP)
            if not grow.any():
                break
            bound = np.where(grow, np.minimum(2 * bound, TANH_BRACKET_CAP), bound)
        ok &= enclosed
        lo, hi = -bound, bound.copy()
        target = np.where(ok, zf, 0.0)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            below = self.forward(mid) < target
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo <= 4e-16 * np.maximum(1.0, np.abs(mid))):
                break
        x = 0.5 * (lo + hi)
        for _ in range(3):
            deriv = np.exp(self.log_deriv(x))
            with np.errstate(divide="ignore", invalid="ignore"):
                step = (self.forward(x) - target) / deriv
            cand = x - np.where(np.isfinite(step), step, 0.0)
            x = np.where((cand >= lo) & (cand <= hi), cand, x)
        return np.where(ok, x, np.nan).reshape(shape)

    def inverse(self, z):
        try:
            return super().inverse(z)
        except TransformRangeError as exc:
            lo, hi = self.attainable_range()
            raise TransformRangeError(f"{exc}; open range is ({lo:.6g}, {hi:.6g})") from None

    def param_jacobian(self, x):
        x = np.ravel(np.asarray(x, dtype=float))
        a = self._pre(x)
        th = np.tanh(a)
        s = 1.0 - th * th
        u, v = self.u, self.v
        su, sv = expit(self.raw_u), expit(self.raw_v)
        jz = np.concatenate([th * su, u * x[:, None] * s * sv, u * s], axis=1)
        terms = self._log_terms(a)
        w = np.exp(terms - logsumexp(terms, axis=1, keepdims=True))
        jl = np.concatenate(
            [w * su / u, w * (1.0 / v - 2 * x[:, None] * th) * sv, w * (-2 * th)], axis=1
        )
        return jz, jl

    def to_dict(self):
        return {
            "family": self.family,
            "params": {"raw_u": self.raw_u.tolist(), "raw_v": self.raw_v.tolist(), "b": self.b.tolist()},
        }


FAMILIES = ("identity", "wallace", "yeo_johnson", "tanh_mix", "node")
_ALIASES = {"tanh": "tanh_mix", "yj": "yeo_johnson"}


def canonical_family(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in FAMILIES:
        raise InputError(f"unknown transform family {name!r}")
    return name


def initial_transform(family: str, rng: np.random.Generator | None = None, **options) -> Transform:
    """Starting point of co-training for a family.

    Every family starts at or near its most linear member: Identity,
    Wallace at large ``d``, Yeo-Johnson at lambda = 1, tanh units in their
    linear region, NODE with a near-zero vector field.
    """
    family = canonical_family(family)
    rng = rng if rng is not None else np.random.default_rng(0)
    if family == "identity":
        return Identity()
    if family == "wallace":
        return Wallace.from_d(options.get("d", 10.0))
    if family == "yeo_johnson":
        return YeoJohnson(options.get("lam", 1.0))
    if family == "tanh_mix":
        k = int(options.get("k", 1))
        if k < 1:
            raise InputError("tanh mixture needs k >= 1")
        # slopes sized so the standardized working range stays unsaturated
        v = np.full(k, 0.3) * np.exp(rng.normal(0.0, 0.1, k))
        u = np.full(k, 1.0 / (0.3 * k)) * np.exp(rng.normal(0.0, 0.1, k))
        b = rng.normal(0.0, 0.3, k)
        return TanhMix.from_weights(u, v, b)
    from .node import NodeConfig, NodeFlow

    cfg = NodeConfig(
        tau=float(options.get("tau", 0.25)),
        steps=options.get("steps"),
        time_conditioning=bool(options.get("time_conditioning", False)),
    )
    return NodeFlow.random(rng, cfg, scale=float(options.get("init_scale", 0.1)))


def transform_from_dict(data: dict) -> Transform:
    family = canonical_family(data["family"])
    if family == "node":
        from .node import NodeFlow

        return NodeFlow.from_dict(data)
    params = data.get("params", {})
    if family == "identity":
        return Identity()
    if family == "wallace":
        return Wallace(params["raw_d"])
    if family == "yeo_johnson":
        return YeoJohnson(params["lambda"])
    return TanhMix(params["raw_u"], params["raw_v"], params["b"])
