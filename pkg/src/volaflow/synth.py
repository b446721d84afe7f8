"""Synthetic RV panels with a known latent HAR process and a known warp.

Latent series follow the HAR recursion with Gaussian innovations. Observed
series are the latent values pushed through the inverse of a monotone
"true transform" and then z-scored, so a perfectly co-trained transform
would recover the true one up to the input standardization and an affine
output map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDataError
from .har import MIN_HISTORY, HarParams
from .marketdata import DEFAULT_SPLIT, RvPanel, make_series
from .transforms import Identity, Transform, YeoJohnson

BURN_IN = 100
STATIONARITY_BOUND = 50.0


class StationarityError(DegenerateDataError):
    pass


class SoftplusSkew:
    """True transform whose inverse is the shifted softplus ``log(1 + e^{a z})/a - c``.

    Observed values are ``softplus_a(z) - c`` (convex in the latent, hence
    right-skewed); the transform itself maps observed back to latent and is
    concave, with a log singularity at the lower bound ``-c``.
    """

    family = "softplus"

    def __init__(self, a: float = 2.0):
        if not a > 0:
            raise ValueError("softplus sharpness must be positive")
        self.a = float(a)
        self.c = math.log(2.0) / self.a

    def inverse(self, z):
        """latent -> observed"""
        z = np.asarray(z, dtype=float)
        return np.logaddexp(0.0, self.a * z) / self.a - self.c

    def forward(self, x):
        """observed -> latent; defined for x > -c"""
        x = np.asarray(x, dtype=float)
        y = self.a * (x + self.c)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (y + np.log(-np.expm1(-y))) / self.a
        return np.where(y > 0, z, np.nan)

    def to_dict(self):
        return {"family": self.family, "params": {"a": self.a}}


def make_warp(name: str, lam: float = 0.25, a: float = 2.0):
    name = {"yj": "yeo_johnson", "softplus_skew": "softplus"}.get(name, name)
    if name == "identity":
        return Identity()
    if name == "softplus":
        return SoftplusSkew(a)
    if name == "yeo_johnson":
        return YeoJohnson(lam)
    raise ValueError(f"unknown warp {name!r}")


@dataclass(frozen=True)
class SynthConfig:
    n_stocks: int = 50
    n_days: int = 480
    # persistence 0.35 + 5*0.06 + 0.25 = 0.9; latent sd about 0.4 when noise variance is 0.08
    har_beta: HarParams = HarParams(0.0, 0.35, 0.06, 0.25 / 22)
    noise_variance: float = 0.08
    warp: str = "softplus"
    warp_lambda: float = 0.25
    warp_a: float = 2.0
    seed: int = 7
    split: tuple[int, int, int] = DEFAULT_SPLIT

    def make_warp(self):
        return make_warp(self.warp, self.warp_lambda, self.warp_a)

    def to_dict(self):
        return {
            "n_stocks": self.n_stocks,
            "n_days": self.n_days,
            "har_beta": self.har_beta.to_dict(),
            "noise_variance": self.noise_variance,
            "warp": self.make_warp().to_dict(),
            "seed": self.seed,
            "split": list(self.split),
        }


@dataclass
class SynthPanel:
    panel: RvPanel
    latent: np.ndarray  # (S, T) latent values after burn-in
    raw: np.ndarray  # (S, T) observed values before z-scoring
    config: SynthConfig
    truth: dict = field(default_factory=dict)


def simulate_latent(beta: HarParams, noise_variance: float, n_days: int,
                    rng: np.random.Generator, burn_in: int = BURN_IN) -> np.ndarray:
    b = beta.as_array()
    persistence = b[1] + 5 * b[2] + 22 * b[3]
    level = b[0] / (1 - persistence) if abs(1 - persistence) > 1e-12 else 0.0
    total = MIN_HISTORY + burn_in + n_days
    z = np.empty(total)
    z[:MIN_HISTORY] = level
    sd = math.sqrt(noise_variance)
    shocks = rng.normal(0.0, 1.0, total) * sd
    for t in range(MIN_HISTORY, total):
        z[t] = (
            b[0] + b[1] * z[t - 1] + b[2] * z[t - 5:t].sum() + b[3] * z[t - MIN_HISTORY:t].sum()
            + shocks[t]
        )
        if not abs(z[t]) < STATIONARITY_BOUND:
            raise StationarityError(
                f"latent HAR recursion left |z| < {STATIONARITY_BOUND} at step {t - MIN_HISTORY}"
            )
    return z[MIN_HISTORY + burn_in:]


def generate_panel(cfg: SynthConfig) -> SynthPanel:
    warp = cfg.make_warp()
    latent = np.stack([
        simulate_latent(cfg.har_beta, cfg.noise_variance, cfg.n_days, np.random.default_rng(cfg.seed + i))
        for i in range(cfg.n_stocks)
    ])
    raw = np.asarray(warp.inverse(latent), dtype=float)
    width = len(str(cfg.n_stocks - 1))
    series = [make_series(f"S{i:0{width}d}", raw[i]) for i in range(cfg.n_stocks)]
    panel = RvPanel(series, tuple(cfg.split), list(range(1, cfg.n_days + 1)))
    truth = {
        "har_beta": cfg.har_beta.to_dict(),
        "noise_variance": cfg.noise_variance,
        "warp": warp.to_dict(),
        "seed": cfg.seed,
    }
    return SynthPanel(panel, latent, raw, cfg, truth)


def true_transform_standardized(sp: SynthPanel, stock: int = 0):
    """The true observed->latent map expressed on stock ``stock``'s standardized scale."""
    s = sp.panel.series[stock]
    warp = sp.config.make_warp()
    scale = math.sqrt(s.raw_variance)

    def f(x):
        return warp.forward(np.asarray(x, dtype=float) * scale + s.raw_mean)

    return f


def panel_to_rv(sp: SynthPanel) -> dict[str, dict[int, float]]:
    return {
        s.symbol: {day: float(v) for day, v in zip(sp.panel.days, sp.raw[i])}
        for i, s in enumerate(sp.panel.series)
    }
