"""Contraction constants for each scheme, synchronous-coupling experiments and
grid certificates for the positive-definiteness conditions behind them.

For a coupled pair with difference z = (x, v), each kinetic scheme satisfies

    |z_k|_{a,b}^2 <= C (1 - c(h))^s |z_0|_{a,b}^2,   s = k or k - 1,

inside its region h < h0, gamma >= gamma0, with a = 1/M.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .core import CHAIN_AXIS, ModifiedNorm, NoiseStream, PhaseState, SharedNoise
from .integrators import (
    GradientSource,
    IntegratorDivergence,
    IntegratorParams,
    IntegratorState,
    SchemeId,
    parse_scheme,
    step,
    step_overdamped,
)
from .spectral import bbk_kicks, compose, mode_matrix, roaba_matrix, sub_A, sub_B, sub_O, sub_Vs

DIVERGENCE_THRESHOLD = 1e12

# friction multiple alpha in h0 = (1 - eta)/(alpha sqrt(M)) for the implicit-region schemes
_IMPLICIT_ALPHA = {SchemeId.BAOAB: 2.0, SchemeId.OBABO: 4.0, SchemeId.ROABAO: 2.0}


@dataclass(frozen=True)
class SchemeConstants:
    scheme: SchemeId
    m: float
    M: float
    gamma: float
    h: float
    h0: float
    gamma0: float
    implicit: bool
    a: float
    b: float
    c: float
    C: float
    s_offset: int

    @property
    def in_region(self) -> bool:
        return self.h < self.h0 and self.gamma >= self.gamma0 and (not self.implicit or self.gamma > self.gamma0)

    @property
    def norm_valid(self) -> bool:
        return self.b * self.b < self.a

    @property
    def norm(self) -> ModifiedNorm:
        return ModifiedNorm(self.a, self.b)

    def exponent(self, k):
        return np.maximum(np.asarray(k) - self.s_offset, 0)

    def bound_sq(self, k):
        """C (1 - c)^s: bound on |z_k|^2 / |z_0|^2 in the modified norm."""
        return self.C * (1.0 - self.c) ** self.exponent(k)


def implicit_h0(scheme, M: float, gamma: float) -> float:
    """Supremum of h with h < (1 - exp(-gamma h))/(alpha sqrt(M)); 0 when gamma <= alpha sqrt(M)."""
    s = parse_scheme(scheme)
    k = _IMPLICIT_ALPHA[s] * math.sqrt(M)
    if gamma <= k:
        return 0.0
    f = lambda h: -math.expm1(-gamma * h) - k * h
    lo = 1e-9 / gamma
    if f(lo) <= 0:
        return lo
    return brentq(f, lo, 1.0 / k, xtol=1e-300, rtol=4 * np.finfo(float).eps)


def _check_args(m, M, gamma, h):
    if not 0 < m <= M < math.inf:
        raise ValueError(f"need 0 < m <= M < inf, got m={m}, M={M}")
    if not (gamma > 0 and h > 0):
        raise ValueError(f"gamma and h must be positive, got gamma={gamma}, h={h}")


def constants_for(scheme, m: float, M: float, gamma: float, h: float) -> SchemeConstants:
    s = parse_scheme(scheme)
    if not s.kinetic:
        raise ValueError(f"{s} is overdamped; see overdamped_rate")
    _check_args(m, M, gamma, h)
    a = 1.0 / M
    ome = -math.expm1(-gamma * h)
    sq = math.sqrt(M)
    if s is SchemeId.EM:
        row = (1 / (2 * gamma), 2 * sq, False, 1 / gamma, m * h / (2 * gamma), 1.0, 0)
    elif s is SchemeId.BBK:
        row = (1 / (4 * gamma), math.sqrt(12 * M), False, h / 2 + 1 / gamma, m * h / (4 * gamma), 7.0, 1)
    elif s in (SchemeId.SPV, SchemeId.SVV):
        row = (1 / (2 * gamma), math.sqrt(11 * M), False, h / ome, m * h / (4 * gamma), 7.0, 1)
    elif s is SchemeId.SES:
        row = (1 / (2 * gamma), 5 * sq, False, 1 / gamma, m * h / (4 * gamma), 1.0, 0)
    else:
        alpha = _IMPLICIT_ALPHA[s]
        row = (ome / (alpha * sq), alpha * sq, True, h / ome, h * h * m / (4 * ome), 7.0, 1)
    h0, gamma0, implicit, b, c, C, off = row
    out = SchemeConstants(s, m, M, gamma, h, h0, gamma0, implicit, a, b, c, C, off)
    if out.in_region and not (out.norm_valid and 0 < c < 1):
        raise AssertionError(f"{s}: constants inconsistent inside the region (b^2={b * b}, a={a}, c={c})")
    return out


def region_points(scheme, m: float, M: float, n: int, stream: NoiseStream, h_frac=(0.01, 0.99),
                  gamma_decades: float = 1.0) -> list[tuple[float, float]]:
    """n random (gamma, h) points inside the scheme's contraction region.

    gamma is log-uniform over gamma0 * [1, 10**gamma_decades] (strictly above gamma0 for the
    implicit rows) and h is a uniform fraction of h0(gamma).
    """
    s = parse_scheme(scheme)
    gamma0 = constants_for(s, m, M, 1.0, 1.0).gamma0
    lo = 0.01 if s in _IMPLICIT_ALPHA else 0.0
    logs = stream.uniform((n,), lo, gamma_decades * math.log(10.0))
    fracs = stream.uniform((n,), *h_frac)
    out = []
    for lg, f in zip(logs, fracs):
        gamma = gamma0 * math.exp(lg)
        h0 = implicit_h0(s, M, gamma) if s in _IMPLICIT_ALPHA else constants_for(s, m, M, gamma, 1.0).h0
        out.append((gamma, h0 * float(f)))
    return out


@dataclass(frozen=True)
class StochasticSchemeConstants:
    scheme: SchemeId
    c: float
    C: float
    C_G: float
    s_offset: int
    base: SchemeConstants

    @property
    def vacuous(self) -> bool:
        return not self.c > 0

    def exponent(self, k):
        return np.maximum(np.asarray(k) - self.s_offset, 0)

    def bound_sq(self, k):
        return self.C * (1.0 - self.c) ** self.exponent(k)


def constants_for_sg(scheme, m: float, M: float, gamma: float, h: float, C_G: float) -> StochasticSchemeConstants:
    if not C_G >= 0:
        raise ValueError("C_G must be nonnegative")
    base = constants_for(scheme, m, M, gamma, h)
    s, c0 = base.scheme, base.c
    p = h * h * C_G / M
    eta = math.exp(-gamma * h)
    if s is SchemeId.EM:
        c, C = c0 - 2 * p, 1.0
    elif s is SchemeId.BBK:
        c, C = c0 - 4 * p, 7 + 3 * p
    elif s is SchemeId.SPV:
        c, C = c0 - 4 * p, 7 + 12 * p
    elif s is SchemeId.SVV:
        c, C = c0 - 4 * p, 7 + 6 * p
    elif s is SchemeId.SES:
        c, C = c0 - 4 * p, 1.0
    elif s is SchemeId.BAOAB:
        c, C = c0 - 5 * h * h * C_G * (eta / M + h * h / 4), 7 + 3 * p
    elif s is SchemeId.OBABO:
        c, C = c0 - 4 * p, 8 + 3 * p
    else:
        c, C = c0 - 5 * h * h * C_G * (eta / M + h * h / 4), 8 + 8 * p
    return StochasticSchemeConstants(s, c, C, C_G, base.s_offset, base)


def overdamped_rate(m: float, M: float, h: float, C_G: float = 0.0) -> float:
    """c in E|x_k - y_k|^2 <= (1 - c)^k |x_0 - y_0|^2 for OD-EM / OD-LM."""
    return h * m * (2.0 - h * M) - h * h * C_G


@dataclass
class CoupledTrajectory:
    distance_sq: np.ndarray
    divergent: bool
    diverged_at: int | None = None

    @property
    def distance(self) -> np.ndarray:
        return np.sqrt(self.distance_sq)


@dataclass
class MeanSquareTrajectory:
    mean_sq: np.ndarray
    se: np.ndarray
    replicas: int
    divergent: bool
    diverged_at: int | None = None

    def upper(self, z: float = 1.96) -> np.ndarray:
        return self.mean_sq + z * self.se


def _stack_pair(z0: PhaseState, z1: PhaseState):
    if z0.x.shape != z1.x.shape:
        raise ValueError(f"coupled chains differ in shape: {z0.x.shape} vs {z1.x.shape}")
    return np.stack([z0.x, z1.x], axis=CHAIN_AXIS), np.stack([z0.v, z1.v], axis=CHAIN_AXIS)


def _run_pairs(scheme, grad, X, V, params, K, noise, measure):
    """Advance stacked pairs K steps; measure(state) gives per-pair squared distances."""
    s = parse_scheme(scheme)
    state = IntegratorState(X, V)
    out = np.full((K + 1,) + X.shape[:-2], np.nan)
    shared = SharedNoise(noise)
    out[0] = measure(state)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, K + 1):
            try:
                if s.kinetic:
                    state = step(s, state, grad, params, shared)
                else:
                    state = step_overdamped(s, state, grad, params, shared)
            except IntegratorDivergence:
                return out, True, k
            out[k] = measure(state)
            if np.any(out[k] > DIVERGENCE_THRESHOLD**2):
                return out, True, k
    return out, False, None


def _modified_measure(norm):
    def measure(state):
        d = np.diff(state.x, axis=CHAIN_AXIS)[..., 0, :]
        e = np.diff(state.v, axis=CHAIN_AXIS)[..., 0, :]
        return norm.sq(d, e)
    return measure


def _euclid_measure(state):
    d = np.diff(state.x, axis=CHAIN_AXIS)[..., 0, :]
    return np.sum(d * d, axis=-1)


def coupled_run(scheme, potential, norm: ModifiedNorm, z0: PhaseState, z1: PhaseState,
                params: IntegratorParams, K: int, noise: NoiseStream) -> CoupledTrajectory:
    """Synchronously coupled run with full gradients.  z0, z1 may carry leading pair axes."""
    X, V = _stack_pair(z0, z1)
    out, div, at = _run_pairs(scheme, GradientSource(potential.grad), X, V, params, K, noise,
                              _modified_measure(norm))
    return CoupledTrajectory(out, div, at)


def _replicate(z: PhaseState, R: int):
    return np.broadcast_to(z.x, (R,) + z.x.shape).copy(), np.broadcast_to(z.v, (R,) + z.v.shape).copy()


def coupled_run_sg(scheme, potential, estimator, norm: ModifiedNorm, z0: PhaseState, z1: PhaseState,
                   params: IntegratorParams, K: int, replicas: int, noise: NoiseStream) -> MeanSquareTrajectory:
    """E|z_k|^2 over R independent replicas; both chains share Gaussians and batches."""
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    x0, v0 = _replicate(z0, replicas)
    x1, v1 = _replicate(z1, replicas)
    X, V = _stack_pair(PhaseState(x0, v0), PhaseState(x1, v1))
    if estimator is None or not estimator.stochastic:
        grad = GradientSource(potential.grad)
    else:
        grad = GradientSource(lambda x: estimator(x, shared=True))
    out, div, at = _run_pairs(scheme, grad, X, V, params, K, noise, _modified_measure(norm))
    return _summarize(out, replicas, div, at)


def _summarize(out, R, div, at):
    mean = out.mean(axis=1)
    se = out.std(axis=1, ddof=1) / math.sqrt(R) if R > 1 else np.zeros_like(mean)
    return MeanSquareTrajectory(mean, se, R, div, at)


def coupled_run_overdamped(scheme, potential, estimator, x0, y0, h: float, K: int, replicas: int,
                           noise: NoiseStream) -> MeanSquareTrajectory:
    s = parse_scheme(scheme)
    if s.kinetic:
        raise ValueError(f"{s} is kinetic; use coupled_run")
    x0 = np.asarray(x0, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    if x0.shape != y0.shape:
        raise ValueError("x0 and y0 differ in shape")
    X = np.stack([np.broadcast_to(x0, (replicas,) + x0.shape), np.broadcast_to(y0, (replicas,) + y0.shape)],
                 axis=CHAIN_AXIS)
    if estimator is None or not estimator.stochastic:
        grad = GradientSource(potential.grad)
    else:
        grad = GradientSource(lambda x: estimator(x, shared=True))
    out, div, at = _run_pairs(s, grad, X, None, h, K, noise, _euclid_measure)
    return _summarize(out, replicas, div, at)


def empirical_rate(trajectory, burn_in: int = 0) -> float:
    """exp of the least-squares slope of log distance against k after burn-in."""
    d = np.asarray(trajectory, dtype=float)
    if d.ndim != 1 or d.size <= burn_in + 10:
        raise ValueError("trajectory must be 1D and longer than burn_in + 10")
    tail = d[burn_in:]
    if np.any(tail <= 0):
        raise ValueError("zero distance: chains merged")
    k = np.arange(tail.size, dtype=float)
    slope = np.polyfit(k, np.log(tail), 1)[0]
    return float(math.exp(slope))


# --- certificates -----------------------------------------------------------

CERTIFIED = (SchemeId.BBK, SchemeId.SPV, SchemeId.ROABAO)
EXTENDED = (SchemeId.EM, SchemeId.BAOAB, SchemeId.OBABO, SchemeId.SES)


@dataclass(frozen=True)
class CertificateReport:
    scheme: SchemeId
    m: float
    M: float
    gamma: float
    h: float
    lambda_points: int
    u_points: int
    min_A: float
    min_det: float
    argmin_A: tuple
    argmin_det: tuple
    passed: bool
    route: str

    def to_dict(self) -> dict:
        return {
            "scheme": str(self.scheme), "m": self.m, "M": self.M, "gamma": self.gamma, "h": self.h,
            "lambda_points": self.lambda_points, "u_points": self.u_points,
            "min_A": self.min_A, "min_AC_minus_B2": self.min_det,
            "argmin_A": list(self.argmin_A), "argmin_AC_minus_B2": list(self.argmin_det),
            "pass": self.passed, "route": self.route,
        }


def certificate_polynomials(scheme, lam, u, a: float, b: float, c: float, h: float, gamma: float):
    """Scalar A, B, C of H = (1 - c) M - P^T M P for the inner operator, written out in lam."""
    s = parse_scheme(scheme)
    Q = np.asarray(lam, dtype=float)
    eta = math.exp(-gamma * h)
    if s is SchemeId.ROABAO:
        u = np.asarray(u, dtype=float)
        A = -c + Q * (2 * b * eta * h + h**2) + Q**2 * (-a * eta**2 * h**2 - b * eta * h**3 - h**4 / 4)
        B = (b * (1 - eta) - h - b * c
             + Q * (a * eta**2 * h + 1.5 * b * eta * h**2 + b * eta * h * u + 0.5 * h**2 * u + 0.5 * h**3)
             + Q**2 * (-a * eta**2 * h**2 * u - b * eta * h**3 * u - 0.25 * h**4 * u))
        C = (a * (1 - eta**2) - a * c - 2 * b * eta * h - h**2
             + Q * (2 * a * eta**2 * h * u + 3 * b * eta * h**2 * u + h**3 * u)
             + Q**2 * (-a * eta**2 * h**2 * u**2 - b * eta * h**3 * u**2 - 0.25 * h**4 * u**2))
        return A, B, C
    if s is SchemeId.BBK:
        D = 0.5 * gamma * h + 1
        r = 1 - 0.5 * gamma * h
        A = -c + 2 * b * h * Q / D - a * h**2 * Q**2 / D**2
        B = b * gamma * h / D - h - b * c + Q * (a * h * r / D**2 + 2 * b * h**2 / D) - a * h**3 * Q**2 / D**2
        C = (a * (1 - c) - h**2 - a * r**2 / D**2 - 2 * b * h * r / D
             + Q * (2 * a * h**2 * r / D**2 + 2 * b * h**3 / D) - a * h**4 * Q**2 / D**2)
        return A, B, C
    if s is SchemeId.SPV:
        ome = -math.expm1(-gamma * h)
        A = -c + 2 * b * ome * Q / gamma - a * ome**2 * Q**2 / gamma**2
        B = (b * ome - h - b * c + (a * eta * ome / gamma + 2 * b * h * ome / gamma) * Q
             - a * h * ome**2 * Q**2 / gamma**2)
        C = (a * (1 - eta**2) - a * c - 2 * b * eta * h - h**2 + 2 * h * ome * (a * eta + b * h) * Q / gamma
             - a * ome**2 * h**2 * Q**2 / gamma**2)
        return A, B, C
    raise ValueError(f"no written-out certificate polynomials for {s}")


def inner_operator(scheme, lam, h: float, gamma: float, u=None) -> np.ndarray:
    """Mode matrix of the cyclically shifted step whose powers give the k - 1 bulk of the chain."""
    s = parse_scheme(scheme)
    lam = np.asarray(lam, dtype=float)
    A = lambda t: sub_A(t, lam, gamma)
    B = lambda t: sub_B(t, lam, gamma)
    O = lambda t: sub_O(t, lam, gamma)
    if s in (SchemeId.EM, SchemeId.SES):
        return mode_matrix(s, lam, h, gamma)
    if s is SchemeId.BAOAB:
        return compose(A(h / 2), B(h), A(h / 2), O(h))
    if s is SchemeId.OBABO:
        return compose(A(h), B(h / 2), O(h), B(h / 2))
    if s is SchemeId.BBK:
        b1, b2 = bbk_kicks(lam, h, gamma)
        return compose(A(h), b2, b1)
    if s is SchemeId.SPV:
        return compose(A(h), sub_Vs(h, lam, gamma))
    if s is SchemeId.ROABAO:
        return compose(roaba_matrix(lam, h, u), O(h))
    raise ValueError(f"no inner operator for {s}")


def certificate_entries_direct(P, a: float, b: float, c: float):
    """A, B, C of H = (1 - c) Mn - P^T Mn P from the mode matrix itself."""
    Mn = np.array([[1.0, b], [b, a]])
    H = (1 - c) * Mn - np.swapaxes(P, -1, -2) @ Mn @ P
    return H[..., 0, 0], H[..., 0, 1], H[..., 1, 1]


def certify(scheme, m: float, M: float, gamma: float, h: float, lambda_points: int = 2048,
            u_points: int = 256, extended: bool = False, route: str = "polynomial") -> CertificateReport:
    """Check H(lam[, u]) > 0 on a uniform grid over [m, M] (and u over [0, h] for rOABAO)."""
    s = parse_scheme(scheme)
    if s not in CERTIFIED and not (extended and s in EXTENDED):
        raise ValueError(f"no certificate for {s}; supported: BBK, SPV, rOABAO"
                         + ("" if extended else " (EM, BAOAB, OBABO, SES need extended=True)"))
    if lambda_points < 2:
        raise ValueError("lambda_points must be >= 2")
    if s is SchemeId.ROABAO and u_points < 2:
        raise ValueError("u_points must be >= 2")
    k = constants_for(s, m, M, gamma, h)
    lam = np.linspace(m, M, lambda_points)
    lam[0], lam[-1] = m, M
    if s is SchemeId.ROABAO:
        u = np.linspace(0.0, h, u_points)
        u[-1] = h
        L, U = np.meshgrid(lam, u, indexing="ij")
    else:
        u = np.zeros(1)
        L, U = lam[:, None], np.zeros((lambda_points, 1))
    if s in EXTENDED:
        route = "direct"
    if route == "polynomial":
        A, B, C = certificate_polynomials(s, L, U, k.a, k.b, k.c, h, gamma)
    elif route == "direct":
        P = inner_operator(s, L, h, gamma, U if s is SchemeId.ROABAO else None)
        A, B, C = certificate_entries_direct(P, k.a, k.b, k.c)
    else:
        raise ValueError(f"unknown route {route!r}")
    det = A * C - B * B
    ia = np.unravel_index(np.argmin(A), A.shape)
    idet = np.unravel_index(np.argmin(det), det.shape)
    min_A, min_det = float(A[ia]), float(det[idet])
    return CertificateReport(
        s, m, M, gamma, h, lambda_points, int(u.size), min_A, min_det,
        (float(L[ia]), float(U[ia])), (float(L[idet]), float(U[idet])),
        bool(min_A > 0 and min_det > 0), route,
    )
