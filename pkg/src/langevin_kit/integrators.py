"""One-step maps for the kinetic and overdamped Langevin discretisations.

Sub-steps, with eta = exp(-gamma h):
    B(t): v <- v - t grad U(x)
    A(t): x <- x + t v
    O(t): v <- exp(-gamma t) v + sqrt(1 - exp(-2 gamma t)) xi
    V_s(t): v <- exp(-gamma t) v - (1 - exp(-gamma t))/gamma grad U(x) + sqrt(1 - exp(-2 gamma t)) xi

Reuse schemes (BAOAB, OBABO, BBK, SVV) carry the closing gradient into the
next step, so K steps cost K + 1 gradient evaluations; the rest cost K.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np


class SchemeId(enum.Enum):
    EM = "EM"
    BBK = "BBK"
    SPV = "SPV"
    SVV = "SVV"
    BAOAB = "BAOAB"
    OBABO = "OBABO"
    ROABAO = "rOABAO"
    SES = "SES"
    OD_EM = "OD-EM"
    OD_LM = "OD-LM"

    @property
    def kinetic(self) -> bool:
        return self not in (SchemeId.OD_EM, SchemeId.OD_LM)

    @property
    def reuses_gradient(self) -> bool:
        return self in (SchemeId.BAOAB, SchemeId.OBABO, SchemeId.BBK, SchemeId.SVV)

    def __str__(self):
        return self.value


KINETIC_SCHEMES = tuple(s for s in SchemeId if s.kinetic)
GLC_SCHEMES = (SchemeId.BAOAB, SchemeId.OBABO, SchemeId.ROABAO)


def parse_scheme(name) -> SchemeId:
    if isinstance(name, SchemeId):
        return name
    key = str(name).strip().upper().replace("_", "-")
    for s in SchemeId:
        if s.value.upper() == key:
            return s
    raise ValueError(f"unknown scheme {name!r}; choose from {[s.value for s in SchemeId]}")


class IntegratorDivergence(FloatingPointError):
    pass


def one_minus_eta(gamma: float, h: float) -> float:
    return -math.expm1(-gamma * h)


def eta(gamma: float, h: float) -> float:
    if not (gamma > 0 and h > 0):
        raise ValueError(f"eta needs gamma > 0 and h > 0, got gamma={gamma}, h={h}")
    return math.exp(-gamma * h)


@dataclass(frozen=True)
class IntegratorParams:
    """Stepsize and friction.  gamma = inf gives eta = 0 exactly (the high-friction limit).

    h and gamma may be arrays broadcastable against the state's leading axes,
    which runs several parameter points in one batch.
    """

    h: float
    gamma: float = 1.0

    def __post_init__(self):
        h, g = np.asarray(self.h, dtype=float), np.asarray(self.gamma, dtype=float)
        if not (np.all(h > 0) and np.all(np.isfinite(h))):
            raise ValueError(f"stepsize must be positive and finite, got {self.h}")
        if not np.all(g > 0):
            raise ValueError(f"friction must be positive, got {self.gamma}")

    @property
    def eta(self):
        return np.exp(-self.gamma * self.h)

    @property
    def eta_half(self):
        return np.exp(-0.5 * self.gamma * self.h)

    @property
    def one_minus_eta(self):
        return -np.expm1(-self.gamma * self.h)

    @property
    def one_minus_eta_half(self):
        return -np.expm1(-0.5 * self.gamma * self.h)

    @property
    def one_minus_eta_sq(self):
        return -np.expm1(-2.0 * self.gamma * self.h)


def _series_or_direct(x, coeff, start, direct, cut):
    """sum_{k >= start} coeff(k) x^k below `cut`, the closed form above it."""
    x = np.asarray(x, dtype=float)
    xs = np.minimum(x, cut)
    total = np.zeros_like(xs)
    fact = 1.0
    for k in range(1, 40):
        fact *= k
        if k >= start:
            total = total + coeff(k) / fact * xs**k
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.where(x < cut, total, direct(np.maximum(x, cut)))
    return out if out.ndim else float(out)


def _gamma_h_minus_one_minus_eta(x):
    """x - (1 - exp(-x))."""
    return _series_or_direct(x, lambda k: (-1.0) ** k, 2, lambda y: y + np.expm1(-y), 0.1)


def _ses_position_variance_scaled(x):
    """2x - 3 + 4exp(-x) - exp(-2x), which is gamma^2 Sigma_1."""
    return _series_or_direct(x, lambda k: (-1.0) ** k * (4.0 - 2.0**k), 3,
                             lambda y: 2.0 * y - 3.0 + 4.0 * np.exp(-y) - np.exp(-2.0 * y), 0.5)


@dataclass(frozen=True)
class SesNoise:
    """Joint law of the (position, velocity) noise pair of one exact-Ornstein-Uhlenbeck step."""

    sigma: np.ndarray
    cholesky: np.ndarray


def ses_covariance(gamma, h) -> SesNoise:
    """Sigma_1 = (2h - (3 - 4 eta + eta^2)/gamma)/gamma, Sigma_2 = (1 - eta)^2/gamma, Sigma_3 = 1 - eta^2.

    Sigma_1 is the position variance.  Array arguments give stacked factors.
    """
    gamma = np.asarray(gamma, dtype=float)
    h = np.asarray(h, dtype=float)
    if not (np.all(gamma > 0) and np.all(h > 0)):
        raise ValueError("ses_covariance needs gamma > 0 and h > 0")
    x = gamma * h
    s1 = np.asarray(_ses_position_variance_scaled(x)) / gamma**2
    s2 = np.expm1(-x) ** 2 / gamma
    s3 = -np.expm1(-2.0 * x)
    if np.any(s1 <= 0):
        raise ValueError(f"SES covariance not positive: Sigma_1 = {s1}")
    l11 = np.sqrt(s1)
    l21 = s2 / l11
    rest = s3 - l21 * l21
    if np.any(rest < -1e-14):
        raise ValueError(f"SES covariance indefinite beyond guard: residual {rest}")
    l22 = np.sqrt(np.maximum(rest, 0.0))
    zero = np.zeros_like(l11)
    sigma = np.stack([np.stack([s1, s2], -1), np.stack([s2, s3], -1)], -2)
    chol = np.stack([np.stack([l11, zero], -1), np.stack([l21, l22], -1)], -2)
    return SesNoise(sigma, chol)


class GradientSource:
    """Counting wrapper around a gradient callable."""

    def __init__(self, fn: Callable):
        self.fn = fn
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        return self.fn(x)


@dataclass(frozen=True)
class IntegratorState:
    """Phase point plus the carried gradient (evaluated at x) and carried noise."""

    x: np.ndarray
    v: np.ndarray | None = None
    force: np.ndarray | None = None
    xi: np.ndarray | None = None

    @classmethod
    def start(cls, x, v=None) -> "IntegratorState":
        x = np.array(x, dtype=float)
        return cls(x, None if v is None else np.array(v, dtype=float))


def _force(state: IntegratorState, grad):
    return grad(state.x) if state.force is None else state.force


def _check(scheme: SchemeId, x, v):
    if not np.isfinite(x).all() or (v is not None and not np.isfinite(v).all()):
        raise IntegratorDivergence(f"{scheme}: non-finite state after step")


def _step_em(s, grad, p, noise):
    x, v = s.x, s.v
    g = grad(x)
    xi = noise.normal(x.shape)
    return IntegratorState(x + p.h * v, v - p.h * g - p.h * p.gamma * v + np.sqrt(2.0 * p.gamma * p.h) * xi)


def _step_baoab(s, grad, p, noise):
    h = p.h
    v = s.v - 0.5 * h * _force(s, grad)
    x = s.x + 0.5 * h * v
    v = p.eta * v + np.sqrt(p.one_minus_eta_sq) * noise.normal(x.shape)
    x = x + 0.5 * h * v
    g = grad(x)
    return IntegratorState(x, v - 0.5 * h * g, g)


def _step_obabo(s, grad, p, noise):
    h = p.h
    c1, c2 = p.eta_half, np.sqrt(p.one_minus_eta)
    v = c1 * s.v + c2 * noise.normal(s.x.shape)
    v = v - 0.5 * h * _force(s, grad)
    x = s.x + h * v
    g = grad(x)
    v = v - 0.5 * h * g
    v = c1 * v + c2 * noise.normal(x.shape)
    return IntegratorState(x, v, g)


def _step_spv(s, grad, p, noise):
    x = s.x + 0.5 * p.h * s.v
    g = grad(x)
    v = p.eta * s.v - p.one_minus_eta / p.gamma * g + np.sqrt(p.one_minus_eta_sq) * noise.normal(x.shape)
    return IntegratorState(x + 0.5 * p.h * v, v)


def _step_svv(s, grad, p, noise):
    c1, c2, c3 = p.eta_half, p.one_minus_eta_half / p.gamma, np.sqrt(p.one_minus_eta)
    v = c1 * s.v - c2 * _force(s, grad) + c3 * noise.normal(s.x.shape)
    x = s.x + p.h * v
    g = grad(x)
    v = c1 * v - c2 * g + c3 * noise.normal(x.shape)
    return IntegratorState(x, v, g)


def _step_ses(s, grad, p, noise):
    gam, h = p.gamma, p.h
    g = grad(s.x)
    L = ses_covariance(gam, h).cholesky
    e1 = noise.normal(s.x.shape)
    e2 = noise.normal(s.x.shape)
    zeta = L[..., 0, 0] * e1
    omega = L[..., 1, 0] * e1 + L[..., 1, 1] * e2
    x = s.x + p.one_minus_eta / gam * s.v - _gamma_h_minus_one_minus_eta(gam * h) / gam**2 * g + zeta
    v = p.eta * s.v - p.one_minus_eta / gam * g + omega
    return IntegratorState(x, v)


def _step_bbk(s, grad, p, noise):
    # xi_{k+1} closes step k and opens step k+1, as in the two-line BBK recursion
    h, gam = p.h, p.gamma
    amp = 0.5 * np.sqrt(2.0 * gam * h)
    xi_k = noise.normal(s.x.shape) if s.xi is None else s.xi
    v = s.v + 0.5 * h * (-_force(s, grad) - gam * s.v) + amp * xi_k
    x = s.x + h * v
    g = grad(x)
    xi_next = noise.normal(x.shape)
    v = (v - 0.5 * h * g + amp * xi_next) / (1.0 + 0.5 * gam * h)
    return IntegratorState(x, v, g, xi_next)


def _step_roabao(s, grad, p, noise):
    h = p.h
    c1, c2 = p.eta_half, np.sqrt(p.one_minus_eta)
    v = c1 * s.v + c2 * noise.normal(s.x.shape)
    u = noise.uniform(s.x.shape[:-1] + (1,), 0.0, h)
    g = grad(s.x + u * v)
    x = s.x + h * v - 0.5 * h * h * g
    v = v - h * g
    v = c1 * v + c2 * noise.normal(x.shape)
    return IntegratorState(x, v)


_KINETIC = {
    SchemeId.EM: _step_em,
    SchemeId.BAOAB: _step_baoab,
    SchemeId.OBABO: _step_obabo,
    SchemeId.SPV: _step_spv,
    SchemeId.SVV: _step_svv,
    SchemeId.SES: _step_ses,
    SchemeId.BBK: _step_bbk,
    SchemeId.ROABAO: _step_roabao,
}


def step(scheme, state: IntegratorState, grad, params: IntegratorParams, noise) -> IntegratorState:
    scheme = parse_scheme(scheme)
    if not scheme.kinetic:
        raise ValueError(f"{scheme} is overdamped; use step_overdamped")
    if state.v is None:
        raise ValueError("kinetic step needs a velocity")
    out = _KINETIC[scheme](state, grad, params, noise)
    _check(scheme, out.x, out.v)
    return out


def step_overdamped(scheme, state: IntegratorState, grad, h: float, noise) -> IntegratorState:
    scheme = parse_scheme(scheme)
    if scheme.kinetic:
        raise ValueError(f"{scheme} is kinetic; use step")
    if not np.all(np.asarray(h) > 0):
        raise ValueError("stepsize must be positive")
    x = state.x
    amp = np.sqrt(2.0 * h)
    g = grad(x)
    if scheme is SchemeId.OD_EM:
        out = IntegratorState(x - h * g + amp * noise.normal(x.shape))
    else:
        xi_k = noise.normal(x.shape) if state.xi is None else state.xi
        xi_next = noise.normal(x.shape)
        out = IntegratorState(x - h * g + amp * 0.5 * (xi_next + xi_k), xi=xi_next)
    _check(scheme, out.x, None)
    return out


def run(scheme, state: IntegratorState, grad, params, noise, steps: int, callback=None) -> IntegratorState:
    """Iterate `steps` times; `params` is an IntegratorParams or, for overdamped schemes, h."""
    scheme = parse_scheme(scheme)
    for k in range(steps):
        if scheme.kinetic:
            state = step(scheme, state, grad, params, noise)
        else:
            state = step_overdamped(scheme, state, grad, params, noise)
        if callback is not None:
            callback(k + 1, state)
    return state


@dataclass(frozen=True)
class GlcReport:
    scheme: SchemeId
    max_deviation: float
    passed: bool
    steps: int


def glc_limit_check(scheme, h: float, tolerance: float = 1e-12, steps: int = 100,
                    potential=None, seed: int = 0) -> GlcReport:
    """Run a scheme with eta = 0 against its overdamped limit map on matched noise."""
    from .core import NoiseStream, RecordingNoise, ReplayNoise
    from .potentials import gaussian_potential

    scheme = parse_scheme(scheme)
    if scheme not in GLC_SCHEMES:
        raise ValueError(f"{scheme} is not GLC: it has no overdamped limit as friction grows "
                         "(BBK, SPV and SVV all fail this)")
    pot = potential if potential is not None else gaussian_potential([1.0, 10.0])
    n = pot.dim
    rng = NoiseStream(seed, 1)
    x0 = rng.normal((n,))
    xi0 = rng.normal((n,))
    params = IntegratorParams(h, math.inf)
    delta = 0.5 * h * h

    rec = RecordingNoise(NoiseStream(seed, 2))
    if scheme is SchemeId.BAOAB:
        # v0 = xi0 - (h/2) grad U(x0) aligns the first step with OD-LM started from xi0
        kin = IntegratorState.start(x0, xi0 - 0.5 * h * pot.grad(x0))
    else:
        kin = IntegratorState.start(x0, rng.normal((n,)))
    xs = [x0]
    for _ in range(steps):
        kin = step(scheme, kin, pot.grad, params, rec)
        xs.append(kin.x)
    kin_path = np.array(xs)

    normals = [a for kind, a in rec.draws if kind == "normal"]
    uniforms = [a for kind, a in rec.draws if kind == "uniform"]
    od = IntegratorState.start(x0)
    ys = [x0]
    if scheme is SchemeId.BAOAB:
        od = replace(od, xi=xi0)
        replay = ReplayNoise(normals)
        for _ in range(steps):
            od = step_overdamped(SchemeId.OD_LM, od, pot.grad, delta, replay)
            ys.append(od.x)
    elif scheme is SchemeId.OBABO:
        replay = ReplayNoise(normals[0::2])
        for _ in range(steps):
            od = step_overdamped(SchemeId.OD_EM, od, pot.grad, delta, replay)
            ys.append(od.x)
    else:
        x = x0
        for k in range(steps):
            xi, u = normals[2 * k], uniforms[k]
            x = x - delta * pot.grad(x + u * xi) + h * xi
            ys.append(x)
    dev = float(np.max(np.abs(kin_path - np.array(ys))))
    return GlcReport(scheme, dev, dev < tolerance, steps)
