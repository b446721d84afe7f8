"""One-dimensional neural-ODE flow.

The transform is the time-``tau`` map of ``dg/dxi = NN(g)``, where NN is a
1-4-4-1 swish MLP (33 parameters). Integration is classical RK4 on a fixed
grid. The log-derivative is integrated alongside the state through the
sensitivity equation ``d log J / dxi = dNN/dg``, and parameter gradients
are obtained by reverse-mode differentiation of the unrolled RK4 steps, so
they are exact for the discrete map that is actually evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit

from .errors import DivergenceError
from .transforms import Transform

HIDDEN = 4
N_PARAMS = HIDDEN + HIDDEN + HIDDEN * HIDDEN + HIDDEN + HIDDEN + 1
DIVERGENCE_BOUND = 1e8


def default_steps(tau: float) -> int:
    return 32 if tau <= 1.0 else 128


@dataclass(frozen=True)
class NodeConfig:
    tau: float = 0.25
    steps: int | None = None
    time_conditioning: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.steps is None:
            object.__setattr__(self, "steps", default_steps(self.tau))
        if int(self.steps) < 1:
            raise ValueError("steps must be >= 1")
        object.__setattr__(self, "steps", int(self.steps))


@dataclass(frozen=True)
class MlpParams:
    W1: np.ndarray = field(default_factory=lambda: np.zeros(HIDDEN))
    b1: np.ndarray = field(default_factory=lambda: np.zeros(HIDDEN))
    W2: np.ndarray = field(default_factory=lambda: np.zeros((HIDDEN, HIDDEN)))
    b2: np.ndarray = field(default_factory=lambda: np.zeros(HIDDEN))
    W3: np.ndarray = field(default_factory=lambda: np.zeros(HIDDEN))
    b3: float = 0.0

    def __post_init__(self):
        for name, shape in (("W1", (HIDDEN,)), ("b1", (HIDDEN,)), ("W2", (HIDDEN, HIDDEN)),
                            ("b2", (HIDDEN,)), ("W3", (HIDDEN,))):
            arr = np.array(getattr(self, name), dtype=float).reshape(shape)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "b3", float(self.b3))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.W1, self.b1, self.W2.ravel(), self.b2, self.W3, [self.b3]])

    @classmethod
    def from_vector(cls, theta) -> "MlpParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (N_PARAMS,):
            raise ValueError(f"expected {N_PARAMS} parameters, got shape {theta.shape}")
        h = HIDDEN
        return cls(theta[:h], theta[h:2 * h], theta[2 * h:2 * h + h * h].reshape(h, h),
                   theta[2 * h + h * h:3 * h + h * h], theta[3 * h + h * h:4 * h + h * h],
                   theta[-1])

    @classmethod
    def random(cls, rng: np.random.Generator, scale: float = 0.1) -> "MlpParams":
        theta = rng.normal(0.0, scale, N_PARAMS)
        theta[-1] = 0.0
        return cls.from_vector(theta)


# Parameter vector layout: W1[0:4], b1[4:8], W2 row-major [8:24], b2[24:28], W3[28:32], b3[32]
_B1, _W2, _B2, _W3, _B3 = 4, 8, 24, 28, 32


@njit(cache=True)
def _field(theta, g, xi, tc, ws):
    """NN(g) and dNN/dg at one state; fills ``ws`` with the intermediates.

    ws rows: h1, h1', h1'', h2, h2', h2'', t1 = h1' * W1, u2 = W2 @ t1.
    """
    for j in range(4):
        a = theta[j] * g + theta[_B1 + j]
        if tc:
            a += xi
        s = 1.0 / (1.0 + np.exp(-a))
        ds = s * (1.0 - s)
        ws[0, j] = a * s
        ws[1, j] = s + a * ds
        ws[2, j] = ds * (2.0 + a * (1.0 - 2.0 * s))
        ws[6, j] = ws[1, j] * theta[j]
    val = theta[_B3]
    der = 0.0
    for i in range(4):
        a = theta[_B2 + i]
        u = 0.0
        for j in range(4):
            a += theta[_W2 + 4 * i + j] * ws[0, j]
            u += theta[_W2 + 4 * i + j] * ws[6, j]
        s = 1.0 / (1.0 + np.exp(-a))
        ds = s * (1.0 - s)
        ws[3, i] = a * s
        ws[4, i] = s + a * ds
        ws[5, i] = ds * (2.0 + a * (1.0 - 2.0 * s))
        ws[7, i] = u
        val += theta[_W3 + i] * ws[3, i]
        der += theta[_W3 + i] * ws[4, i] * u
    return val, der


@njit(cache=True)
def _field_vjp(theta, g, xi, tc, cv, cd, ws, grad):
    """Accumulate parameter cotangents into ``grad``; return the state cotangent."""
    _field(theta, g, xi, tc, ws)
    a2b = np.empty(4)
    u2b = np.empty(4)
    for i in range(4):
        t2b = cd * theta[_W3 + i]
        u2b[i] = t2b * ws[4, i]
        a2b[i] = cv * theta[_W3 + i] * ws[4, i] + t2b * ws[7, i] * ws[5, i]
        grad[_W3 + i] += cv * ws[3, i] + cd * ws[4, i] * ws[7, i]
        grad[_B2 + i] += a2b[i]
        for j in range(4):
            grad[_W2 + 4 * i + j] += a2b[i] * ws[0, j] + u2b[i] * ws[6, j]
    grad[_B3] += cv
    gbar = 0.0
    for j in range(4):
        h1b = 0.0
        t1b = 0.0
        for i in range(4):
            h1b += a2b[i] * theta[_W2 + 4 * i + j]
            t1b += u2b[i] * theta[_W2 + 4 * i + j]
        a1b = h1b * ws[1, j] + t1b * theta[j] * ws[2, j]
        grad[j] += a1b * g + t1b * ws[1, j]
        grad[_B1 + j] += a1b
        gbar += a1b * theta[j]
    return gbar


@njit(cache=True)
def _k_integrate(theta, tau, steps, tc, backward, x, with_logd, tape, bound):
    n = x.size
    z = np.empty(n)
    logd = np.zeros(n)
    ws = np.empty((8, 4))
    h = tau / steps
    xi0 = 0.0
    if backward:
        h = -h
        xi0 = tau
    record = tape.shape[0] == n
    for k in range(n):
        g = x[k]
        ld = 0.0
        for m in range(steps):
            xi = xi0 + m * h
            k1, d1 = _field(theta, g, xi, tc, ws)
            g2 = g + 0.5 * h * k1
            k2, d2 = _field(theta, g2, xi + 0.5 * h, tc, ws)
            g3 = g + 0.5 * h * k2
            k3, d3 = _field(theta, g3, xi + 0.5 * h, tc, ws)
            g4 = g + h * k3
            k4, d4 = _field(theta, g4, xi + h, tc, ws)
            if record:
                tape[k, m, 0] = g
                tape[k, m, 1] = g2
                tape[k, m, 2] = g3
                tape[k, m, 3] = g4
            if with_logd:
                ld += (h / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
            g = g + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not abs(g) <= bound:
                return z, logd, False
        z[k] = g
        logd[k] = ld
    return z, logd, True


@njit(cache=True)
def _k_backprop(theta, tau, steps, tc, tape, dz, dlogd, per_sample):
    n = dz.size
    grads = np.zeros((n if per_sample else 1, theta.size))
    ws = np.empty((8, 4))
    h = tau / steps
    w0 = h / 6.0
    w1 = h / 3.0
    for k in range(n):
        row = grads[k] if per_sample else grads[0]
        gb = dz[k]
        lb = dlogd[k]
        for m in range(steps - 1, -1, -1):
            xi = m * h
            acc = gb
            b = _field_vjp(theta, tape[k, m, 3], xi + h, tc, w0 * gb, w0 * lb, ws, row)
            acc += b
            b = _field_vjp(theta, tape[k, m, 2], xi + 0.5 * h, tc, w1 * gb + h * b, w1 * lb, ws, row)
            acc += b
            b = _field_vjp(theta, tape[k, m, 1], xi + 0.5 * h, tc, w1 * gb + 0.5 * h * b, w1 * lb, ws, row)
            acc += b
            b = _field_vjp(theta, tape[k, m, 0], xi, tc, w0 * gb + 0.5 * h * b, w0 * lb, ws, row)
            acc += b
            gb = acc
    return grads


_NO_TAPE = np.empty((0, 0, 4))


def _integrate(p: MlpParams, cfg: NodeConfig, x, backward=False, with_logd=False, tape=None):
    x = np.ascontiguousarray(np.ravel(np.asarray(x, dtype=float)))
    if tape is None:
        tape = _NO_TAPE
    z, logd, ok = _k_integrate(p.to_vector(), float(cfg.tau), cfg.steps, cfg.time_conditioning,
                               backward, x, with_logd, tape, DIVERGENCE_BOUND)
    if not ok:
        raise DivergenceError("neural ODE state diverged during integration")
    return z, logd


def mlp_eval(state, xi, p: MlpParams, time_conditioning: bool = False):
    """Vector field value at ``state`` (scalar or array) and time ``xi``."""
    g = np.atleast_1d(np.asarray(state, dtype=float))
    theta = p.to_vector()
    ws = np.empty((8, 4))
    out = np.array([_field(theta, v, float(xi), time_conditioning, ws)[0] for v in g.ravel()])
    out = out.reshape(g.shape)
    return out if np.ndim(state) else float(out[0])


def node_forward(x, p: MlpParams, cfg: NodeConfig):
    z, _ = _integrate(p, cfg, x)
    return z.reshape(np.shape(x)) if np.ndim(x) else float(z[0])


def node_inverse(z, p: MlpParams, cfg: NodeConfig):
    x, _ = _integrate(p, cfg, z, backward=True)
    return x.reshape(np.shape(z)) if np.ndim(z) else float(x[0])


def node_forward_log_deriv(x, p: MlpParams, cfg: NodeConfig):
    z, logd = _integrate(p, cfg, x, with_logd=True)
    shape = np.shape(x)
    if not shape:
        return float(z[0]), float(logd[0])
    return z.reshape(shape), logd.reshape(shape)


def node_log_deriv(x, p: MlpParams, cfg: NodeConfig):
    return node_forward_log_deriv(x, p, cfg)[1]


def _backprop(p: MlpParams, cfg: NodeConfig, x, dz, dlogd, per_sample: bool):
    """Parameter cotangents of the forward map at ``x`` given output cotangents."""
    x = np.ascontiguousarray(np.ravel(np.asarray(x, dtype=float)))
    tape = np.empty((x.size, cfg.steps, 4))
    _integrate(p, cfg, x, with_logd=False, tape=tape)
    grads = _k_backprop(p.to_vector(), float(cfg.tau), cfg.steps, cfg.time_conditioning, tape,
                        np.ascontiguousarray(np.ravel(dz), dtype=float),
                        np.ascontiguousarray(np.ravel(dlogd), dtype=float), per_sample)
    return grads if per_sample else grads[0]


LossTail = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray, np.ndarray]]


def node_param_grad(batch, loss_tail: LossTail, p: MlpParams, cfg: NodeConfig):
    """Value and 33-vector gradient of ``loss_tail(f(batch), log f'(batch))``.

    ``loss_tail`` returns ``(value, d value/d z, d value/d log f')``.
    """
    x = np.ascontiguousarray(np.ravel(np.asarray(batch, dtype=float)))
    tape = np.empty((x.size, cfg.steps, 4))
    z, logd = _integrate(p, cfg, x, with_logd=True, tape=tape)
    value, dz, dlogd = loss_tail(z, logd)
    grads = _k_backprop(p.to_vector(), float(cfg.tau), cfg.steps, cfg.time_conditioning, tape,
                        np.ascontiguousarray(np.ravel(dz), dtype=float),
                        np.ascontiguousarray(np.ravel(dlogd), dtype=float), False)
    return value, grads[0]


class NodeFlow(Transform):
    family = "node"

    def __init__(self, mlp: MlpParams, cfg: NodeConfig = NodeConfig()):
        self.mlp = mlp
        self.cfg = cfg

    @classmethod
    def random(cls, rng, cfg: NodeConfig = NodeConfig(), scale: float = 0.1) -> "NodeFlow":
        return cls(MlpParams.random(rng, scale), cfg)

    def params(self):
        return self.mlp.to_vector()

    def with_params(self, theta):
        return NodeFlow(MlpParams.from_vector(theta), self.cfg)

    def forward(self, x):
        return node_forward(x, self.mlp, self.cfg)

    def inverse_or_nan(self, z):
        return node_inverse(z, self.mlp, self.cfg)

    def log_deriv(self, x):
        return node_log_deriv(x, self.mlp, self.cfg)

    def forward_log_deriv(self, x):
        return node_forward_log_deriv(x, self.mlp, self.cfg)

    def vjp(self, x, dz, dlogd):
        return _backprop(self.mlp, self.cfg, x, dz, dlogd, False)

    def value_and_grad(self, x, tail):
        return node_param_grad(x, tail, self.mlp, self.cfg)

    def param_jacobian(self, x):
        x = np.ravel(np.asarray(x, dtype=float))
        ones, zeros = np.ones_like(x), np.zeros_like(x)
        jz = _backprop(self.mlp, self.cfg, x, ones, zeros, True)
        jl = _backprop(self.mlp, self.cfg, x, zeros, ones, True)
        return jz, jl

    def to_dict(self):
        p = self.mlp
        return {
            "family": self.family,
            "tau": self.cfg.tau,
            "steps": self.cfg.steps,
            "time_conditioning": self.cfg.time_conditioning,
            "W1": p.W1.tolist(),
            "b1": p.b1.tolist(),
            "W2": p.W2.tolist(),
            "b2": p.b2.tolist(),
            "W3": p.W3.tolist(),
            "b3": p.b3,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NodeFlow":
        cfg = NodeConfig(data["tau"], data["steps"], bool(data.get("time_conditioning", False)))
        mlp = MlpParams(data["W1"], data["b1"], data["W2"], data["b2"], data["W3"], data["b3"])
        return cls(mlp, cfg)
