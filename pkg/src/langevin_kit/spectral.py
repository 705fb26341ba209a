"""Per-mode transition matrices on quadratic targets, spectral gaps, the
random-product Lyapunov estimate for rOABAO and (gamma, h) contour grids.

With grad U(x) = lam x and the noise dropped, every kinetic scheme acts on a
mode (x, v) as a 2x2 matrix P.  These matrices are composed here from
sub-step matrices, independently of the array code in `integrators`.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .core import NoiseStream, parallel_map
from .integrators import SchemeId, parse_scheme

QR_CADENCE = 32


def _eye(shape):
    out = np.zeros(shape + (2, 2))
    out[..., 0, 0] = 1.0
    out[..., 1, 1] = 1.0
    return out


def _mat(shape, a, b, c, d):
    out = np.empty(shape + (2, 2))
    out[..., 0, 0] = a
    out[..., 0, 1] = b
    out[..., 1, 0] = c
    out[..., 1, 1] = d
    return out


def sub_A(t, lam, gamma):
    shape = np.broadcast(lam, gamma, t).shape
    return _mat(shape, 1.0, t, 0.0, 1.0)


def sub_B(t, lam, gamma):
    shape = np.broadcast(lam, gamma, t).shape
    return _mat(shape, 1.0, 0.0, -t * lam, 1.0)


def sub_O(t, lam, gamma):
    shape = np.broadcast(lam, gamma, t).shape
    return _mat(shape, 1.0, 0.0, 0.0, np.exp(-gamma * t))


def sub_Vs(t, lam, gamma):
    shape = np.broadcast(lam, gamma, t).shape
    return _mat(shape, 1.0, 0.0, np.expm1(-gamma * t) / gamma * lam, np.exp(-gamma * t))


def compose(*mats):
    """Matrix of applying mats[0] first, then mats[1], ..."""
    out = mats[0]
    for m in mats[1:]:
        out = m @ out
    return out


def _phi2(x):
    """x - 1 + exp(-x), vectorized with a series for small x."""
    x = np.asarray(x, dtype=float)
    direct = x + np.expm1(-x)
    xs = np.minimum(x, 0.1)
    series = np.zeros_like(xs)
    term = xs * xs / 2.0
    for k in range(3, 20):
        series = series + term
        term = term * (-xs) / k
    return np.where(x < 0.1, series, direct)


def bbk_kicks(lam, h, gamma):
    """BBK opening kick B1 and closing implicit kick B2 (solved in closed form)."""
    shape = np.broadcast(lam, h, gamma).shape
    half = 0.5 * gamma * h
    b1 = _mat(shape, 1.0, 0.0, -0.5 * h * lam, 1.0 - half)
    b2 = _mat(shape, 1.0, 0.0, -0.5 * h * lam / (1.0 + half), 1.0 / (1.0 + half))
    return b1, b2


def roaba_matrix(lam, h, u):
    """Randomized-midpoint ABA: x' = x + hv - h^2/2 lam (x + uv), v' = v - h lam (x + uv)."""
    shape = np.broadcast(lam, h, u).shape
    return _mat(shape, 1.0 - 0.5 * h * h * lam, h - 0.5 * h * h * lam * u, -h * lam, 1.0 - h * lam * u)


def mode_matrix(scheme, lam, h, gamma, u=None) -> np.ndarray:
    """2x2 matrix P acting on (x, v); broadcasts over array arguments.

    rOABAO needs the midpoint fraction `u` in (0, h).  Overdamped schemes
    return the scalar factor 1 - h lam.
    """
    s = parse_scheme(scheme)
    lam = np.asarray(lam, dtype=float)
    h = np.asarray(h, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("curvature must be positive")
    if not s.kinetic:
        return 1.0 - h * lam
    shape = np.broadcast(lam, h, gamma).shape
    A, B, O, V = (lambda t, f=f: f(t, lam, gamma) for f in (sub_A, sub_B, sub_O, sub_Vs))
    if s is SchemeId.EM:
        return _mat(shape, 1.0, h, -h * lam, 1.0 - h * gamma)
    if s is SchemeId.BAOAB:
        return compose(B(h / 2), A(h / 2), O(h), A(h / 2), B(h / 2))
    if s is SchemeId.OBABO:
        return compose(O(h / 2), B(h / 2), A(h), B(h / 2), O(h / 2))
    if s is SchemeId.SPV:
        return compose(A(h / 2), V(h), A(h / 2))
    if s is SchemeId.SVV:
        return compose(V(h / 2), A(h), V(h / 2))
    if s is SchemeId.SES:
        e1 = -np.expm1(-gamma * h)
        return _mat(shape, 1.0 - _phi2(gamma * h) / gamma**2 * lam, e1 / gamma, -e1 / gamma * lam, np.exp(-gamma * h))
    if s is SchemeId.BBK:
        b1, b2 = bbk_kicks(lam, h, gamma)
        return compose(b1, A(h), b2)
    if s is SchemeId.ROABAO:
        if u is None:
            raise ValueError("rOABAO mode matrix needs the midpoint fraction u")
        return compose(O(h / 2), roaba_matrix(lam, h, u), O(h / 2))
    raise AssertionError(s)


def max_eig_modulus(P) -> np.ndarray:
    """Largest eigenvalue modulus of stacked 2x2 real matrices, in closed form."""
    P = np.asarray(P, dtype=float)
    tr = P[..., 0, 0] + P[..., 1, 1]
    det = P[..., 0, 0] * P[..., 1, 1] - P[..., 0, 1] * P[..., 1, 0]
    disc = tr * tr - 4.0 * det
    real = 0.5 * (np.abs(tr) + np.sqrt(np.maximum(disc, 0.0)))
    cplx = np.sqrt(np.maximum(det, 0.0))
    return np.where(disc >= 0, real, cplx)


def eigenvalues_2x2(P) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    tr = P[..., 0, 0] + P[..., 1, 1]
    det = P[..., 0, 0] * P[..., 1, 1] - P[..., 0, 1] * P[..., 1, 0]
    root = np.sqrt((tr * tr - 4.0 * det).astype(complex))
    return np.stack([(tr + root) / 2, (tr - root) / 2], axis=-1)


@dataclass(frozen=True)
class SpectralGap:
    gap: float
    rho: float
    divergent: bool


def _gap_arrays(scheme, m, M, h, gamma):
    """Vectorized spectral radius over the two extreme modes."""
    s = parse_scheme(scheme)
    if s is SchemeId.ROABAO:
        raise ValueError("rOABAO has a random transition matrix; use lyapunov_rate_roabao")
    if not s.kinetic:
        rho = np.maximum(np.abs(1.0 - h * m), np.abs(1.0 - h * M))
    else:
        rho = np.maximum(max_eig_modulus(mode_matrix(s, m, h, gamma)),
                         max_eig_modulus(mode_matrix(s, M, h, gamma)))
    rho = np.where(np.isfinite(rho), rho, np.inf)
    return rho


def spectral_gap(scheme, m: float, M: float, h: float, gamma: float) -> SpectralGap:
    if not 0 < m <= M:
        raise ValueError(f"need 0 < m <= M, got m={m}, M={M}")
    if not (h > 0 and gamma > 0):
        raise ValueError("h and gamma must be positive")
    rho = float(_gap_arrays(scheme, m, M, h, gamma))
    return SpectralGap(1.0 - rho, rho, bool(rho >= 1.0))


@dataclass(frozen=True)
class LyapunovEstimate:
    rate: float
    ci: tuple[float, float]
    stderr: float
    per_mode: dict

    @property
    def gap(self) -> float:
        return 1.0 - self.rate

    @property
    def ci_width(self) -> float:
        return self.ci[1] - self.ci[0]


def _start_frame(lam, h, gamma) -> np.ndarray:
    """Orthonormal frames whose first column is the dominant real eigenvector of P(h/2); identity otherwise."""
    P = mode_matrix(SchemeId.ROABAO, lam, h, gamma, u=0.5 * h)
    w, V = np.linalg.eig(P)
    top = np.argmax(np.abs(w), axis=-1)
    vec = np.take_along_axis(V, top[..., None, None], axis=-1)[..., 0]
    real = np.all(np.abs(vec.imag) < 1e-300, axis=-1) & (np.abs(w.imag).max(axis=-1) == 0)
    v = np.where(real[..., None], vec.real, np.array([1.0, 0.0]))
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    perp = np.stack([-v[..., 1], v[..., 0]], axis=-1)
    return np.stack([v, perp], axis=-1)


def lyapunov_log_growth(lam, h, gamma, N: int, replicas: int, stream: NoiseStream, u_fixed=None,
                        burn_in: int | None = None) -> np.ndarray:
    """Average log growth of P(u_N)...P(u_1) for arrays of (lam, h, gamma).

    Returns shape (cells, replicas).  Products are QR-renormalized every
    QR_CADENCE factors and the log of |R_11| accumulated.  The frame starts
    at the dominant eigenvector of the mean factor P(h/2) (P is affine in u),
    and the first `burn_in` factors (default N // 4) are not counted.
    """
    lam, h, gamma = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (lam, h, gamma))
    lam, h, gamma = np.broadcast_arrays(lam, h, gamma)
    cells = lam.shape[0]
    shape = (cells, replicas)
    lam_, h_, g_ = (a[:, None] for a in (lam, h, gamma))
    half_o = np.broadcast_to(np.exp(-0.5 * g_ * h_), shape)
    Q = np.broadcast_to(_start_frame(lam, h, gamma)[:, None], shape + (2, 2)).copy()
    logs = np.zeros(shape)
    burn = N // 4 if burn_in is None else int(burn_in)
    total = burn + N
    done = 0
    while done < total:
        k = min(QR_CADENCE, (burn if done < burn else total) - done)
        if u_fixed is None:
            u = stream.uniform((k,) + shape) * h_
        else:
            u = np.broadcast_to(u_fixed * h_, (k,) + shape)
        # O(h/2) rABA(u) O(h/2), applied to the running orthonormal frame
        Y = Q
        for j in range(k):
            a = 1.0 - 0.5 * h_ * h_ * lam_
            b = h_ - 0.5 * h_ * h_ * lam_ * u[j]
            c = -h_ * lam_
            d = 1.0 - h_ * lam_ * u[j]
            y0, y1 = Y[..., 0, :], half_o[..., None] * Y[..., 1, :]
            z0 = a[..., None] * y0 + b[..., None] * y1
            z1 = c[..., None] * y0 + d[..., None] * y1
            Y = np.stack([z0, half_o[..., None] * z1], axis=-2)
        Q, R = np.linalg.qr(Y)
        r11 = np.abs(R[..., 0, 0])
        if not np.all(np.isfinite(r11)) or np.any(r11 == 0):
            raise FloatingPointError("Lyapunov product under/overflowed despite renormalization")
        if done >= burn:
            logs += np.log(r11)
        done += k
    return logs / N


def lyapunov_rate_roabao(m: float, M: float, h: float, gamma: float, N: int = 10000, replicas: int = 8,
                         seed: int = 0, u_fixed: float | None = None) -> LyapunovEstimate:
    """exp(top Lyapunov exponent) of the random rOABAO mode product, max over the extreme modes."""
    if N < 1000:
        raise ValueError("N must be >= 1000")
    if replicas < 2:
        raise ValueError("replicas must be >= 2")
    logs = lyapunov_log_growth([m, M], h, gamma, N, replicas, NoiseStream(seed, 0), u_fixed)
    per_mode = {}
    for lam, row in zip((m, M), logs):
        mean = float(row.mean())
        se = float(row.std(ddof=1) / math.sqrt(replicas))
        per_mode[lam] = (math.exp(mean), math.exp(mean) * se)
    worst = max(range(2), key=lambda i: logs[i].mean())
    mean = float(logs[worst].mean())
    se = float(logs[worst].std(ddof=1) / math.sqrt(replicas))
    rate = math.exp(mean)
    return LyapunovEstimate(rate, (math.exp(mean - 1.96 * se), math.exp(mean + 1.96 * se)), rate * se, per_mode)


def continuous_gap(lam, gamma) -> np.ndarray:
    """Decay rate of the noise-free continuous dynamics: -max Re eig [[0, 1], [-lam, -gamma]]."""
    lam = np.asarray(lam, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    disc = gamma * gamma - 4.0 * lam
    return np.where(disc > 0, 0.5 * (gamma - np.sqrt(np.maximum(disc, 0.0))), 0.5 * gamma)


@dataclass
class ContourGrid:
    scheme: SchemeId
    gammas: np.ndarray
    hs: np.ndarray
    gap: np.ndarray
    divergent: np.ndarray
    ci: np.ndarray | None = None

    @property
    def value(self) -> np.ndarray:
        """ln(gap/h), NaN where divergent."""
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(self.gap / self.hs[None, :])
        return np.where(self.divergent, np.nan, out)

    def rows(self):
        val = self.value
        for i, g in enumerate(self.gammas):
            for j, h in enumerate(self.hs):
                row = {"gamma": g, "h": h, "value": val[i, j], "divergent": int(self.divergent[i, j]),
                       "gap": self.gap[i, j]}
                if self.ci is not None:
                    row["ci"] = self.ci[i, j]
                yield row

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = list(self.rows())
        w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: fmt_number(v) for k, v in r.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"scheme": str(self.scheme), "rows": [{k: _json_num(v) for k, v in r.items()}
                                                                 for r in self.rows()]}, indent=1)


def fmt_number(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.17g}"


def _json_num(v):
    if isinstance(v, (int, np.integer)):
        return int(v)
    v = float(v)
    return v if math.isfinite(v) else None


def contour_grid(scheme, m: float, M: float, h_range, gamma_range, resolution=(50, 50),
                 lyapunov_N: int = 10000, replicas: int = 8, seed: int = 0) -> ContourGrid:
    """Spectral gap over a log-spaced (gamma, h) grid; rows are gammas, columns are hs."""
    s = parse_scheme(scheme)
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    n_g, n_h = resolution
    hs = _axis(h_range, n_h)
    gammas = _axis(gamma_range, n_g)
    G, H = np.meshgrid(gammas, hs, indexing="ij")
    if s is not SchemeId.ROABAO:
        rho = _gap_arrays(s, m, M, H, G)
        return ContourGrid(s, gammas, hs, 1.0 - rho, rho >= 1.0)

    def row(i):
        logs = lyapunov_log_growth(np.repeat([m, M], n_h), np.tile(hs, 2), gammas[i], lyapunov_N, replicas,
                                   NoiseStream(seed, i))
        logs = logs.reshape(2, n_h, replicas)
        mean = logs.mean(axis=-1)
        se = logs.std(axis=-1, ddof=1) / math.sqrt(replicas)
        worst = np.argmax(mean, axis=0)
        cols = np.arange(n_h)
        return np.exp(mean[worst, cols]), np.exp(mean[worst, cols]) * se[worst, cols]

    out = parallel_map(row, list(range(n_g)))
    rate = np.array([r for r, _ in out])
    err = np.array([e for _, e in out])
    return ContourGrid(s, gammas, hs, 1.0 - rate, rate >= 1.0, err)


def _axis(rng, n):
    lo, hi = float(rng[0]), float(rng[1])
    if not (0 < lo <= hi):
        raise ValueError(f"axis range must be positive and ordered, got {rng}")
    if n < 1:
        raise ValueError("resolution must be >= 1")
    if n == 1:
        return np.array([lo])
    return np.geomspace(lo, hi, n)
