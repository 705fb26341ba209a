"""Targets (diagonal Gaussians, Bayesian logistic regression), gradient oracles,
stochastic-gradient estimators and dataset ingestion."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .core import CHAIN_AXIS, NoiseStream


class Potential:
    """U with gradient and Hessian; m, M are the convexity and smoothness constants."""

    dim: int
    m: float
    M: float

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def hessian(self, x):
        raise NotImplementedError


class FiniteSumPotential(Potential):
    """U(x) = U_0(x) + sum_i U_i(x).  U_0 is never subsampled (the prior)."""

    n_terms: int

    def base_grad(self, x):
        raise NotImplementedError

    def data_grad(self, x):
        raise NotImplementedError

    def term_grads(self, x, idx):
        """sum_{i in idx} grad U_i(x); idx has shape lead + (b,) broadcastable with x.shape[:-1]."""
        raise NotImplementedError

    def base_hessian(self, x):
        raise NotImplementedError

    def term_hessians(self, x, idx):
        """sum_{i in idx} hess U_i(x) with shape lead + (d, d)."""
        raise NotImplementedError

    def grad(self, x):
        return self.base_grad(x) + self.data_grad(x)


class GaussianPotential(Potential):
    """U(x) = 0.5 sum_i lam_i x_i^2."""

    def __init__(self, eigenvalues):
        lam = np.asarray(eigenvalues, dtype=float).ravel()
        if lam.size == 0 or np.any(~(lam > 0)) or not np.isfinite(lam).all():
            raise ValueError(f"eigenvalues must be positive and finite, got {lam}")
        self.eigenvalues = np.sort(lam)
        self.dim = lam.size
        self.m = float(self.eigenvalues[0])
        self.M = float(self.eigenvalues[-1])

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.sum(self.eigenvalues * x * x, axis=-1)

    def grad(self, x):
        return self.eigenvalues * np.asarray(x, dtype=float)

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.diag(self.eigenvalues), x.shape[:-1] + (self.dim, self.dim))


def gaussian_potential(eigenvalues) -> GaussianPotential:
    return GaussianPotential(eigenvalues)


class GaussianSumPotential(GaussianPotential, FiniteSumPotential):
    """Diagonal quadratic split into N diagonal quadratic terms.

    Term weights are lam/N plus zero-sum perturbations, so the sum is exactly
    diag(lam) up to rounding while individual terms differ (and may be
    non-convex).  Used as a finite-sum test target with known Jacobians.
    """

    def __init__(self, eigenvalues, n_terms: int, spread: float, seed: int = 0):
        super().__init__(eigenvalues)
        if n_terms < 1:
            raise ValueError("n_terms must be >= 1")
        rng = NoiseStream(seed, 0)
        pert = rng.normal((n_terms, self.dim))
        pert -= pert.mean(axis=0)
        self.weights = self.eigenvalues / n_terms * (1.0 + spread * pert)
        self.n_terms = n_terms

    def base_grad(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def data_grad(self, x):
        return self.weights.sum(axis=0) * np.asarray(x, dtype=float)

    def grad(self, x):
        return GaussianPotential.grad(self, x)

    def term_grads(self, x, idx):
        return self.weights[idx].sum(axis=-2) * x

    def base_hessian(self, x):
        return np.zeros(np.shape(x)[:-1] + (self.dim, self.dim))

    def term_hessians(self, x, idx):
        w = self.weights[idx].sum(axis=-2)
        return w[..., :, None] * np.eye(self.dim)


@dataclass(frozen=True)
class LogisticRegressionTarget:
    features: np.ndarray
    labels: np.ndarray
    prior_variance: float = 1.0

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=float)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError(f"features must be a non-empty N x d matrix, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise ValueError("labels must be a vector with one entry per row")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0 or 1")
        if not self.prior_variance > 0:
            raise ValueError("prior variance must be positive")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def to_csv(self, path) -> None:
        header = "y," + ",".join(f"x{j + 1}" for j in range(self.d))
        rows = np.column_stack([self.labels, self.features])
        np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt="%.17g")


class BLRPotential(FiniteSumPotential):
    """U(q) = |q|^2/(2 s2) + sum_j [log(1 + exp(<x_j,q>)) - y_j <x_j,q>]."""

    def __init__(self, dataset: LogisticRegressionTarget):
        self.dataset = dataset
        self.X = dataset.features
        self.y = dataset.labels
        self.prec = 1.0 / dataset.prior_variance
        self.n_terms = dataset.n
        self.dim = dataset.d
        self.m = self.prec
        top = np.linalg.eigvalsh(self.X.T @ self.X)[-1]
        self.M = self.prec + 0.25 * float(top)

    def value(self, q):
        q = np.asarray(q, dtype=float)
        s = q @ self.X.T
        return 0.5 * self.prec * np.sum(q * q, axis=-1) + np.sum(np.logaddexp(0.0, s) - self.y * s, axis=-1)

    def base_grad(self, q):
        return self.prec * np.asarray(q, dtype=float)

    def data_grad(self, q):
        q = np.asarray(q, dtype=float)
        return (expit(q @ self.X.T) - self.y) @ self.X

    def term_grads(self, q, idx):
        Xb = self.X[idx]
        s = np.einsum("...bd,...d->...b", Xb, q)
        r = expit(s) - self.y[idx]
        return np.einsum("...b,...bd->...d", r, Xb)

    def base_hessian(self, q):
        q = np.asarray(q, dtype=float)
        return np.broadcast_to(self.prec * np.eye(self.dim), q.shape[:-1] + (self.dim, self.dim))

    def term_hessians(self, q, idx):
        Xb = self.X[idx]
        p = expit(np.einsum("...bd,...d->...b", Xb, q))
        w = p * (1.0 - p)
        return np.swapaxes(Xb * w[..., None], -1, -2) @ Xb

    def hessian(self, q):
        q = np.asarray(q, dtype=float)
        p = expit(q @ self.X.T)
        w = p * (1.0 - p)
        return self.base_hessian(q) + (self.X.T * w[..., None, :]) @ self.X

    def minimizer(self, tol: float = 1e-8, max_iter: int = 100000) -> np.ndarray:
        return minimize_potential(self, np.zeros(self.dim), tol=tol, max_iter=max_iter)

    def hessian_extremes(self, q) -> tuple[float, float]:
        """Smallest and largest Hessian eigenvalues at q (the pragmatic m, M)."""
        ev = np.linalg.eigvalsh(self.hessian(q))
        return float(ev[0]), float(ev[-1])


def blr_potential(dataset: LogisticRegressionTarget) -> BLRPotential:
    return BLRPotential(dataset)


def minimize_potential(potential: Potential, x0, tol: float = 1e-8, max_iter: int = 100000) -> np.ndarray:
    """Gradient descent with Armijo backtracking, stopped at |grad| <= tol."""
    x = np.array(x0, dtype=float)
    floor = 1.0 / potential.M
    step = floor
    u = potential.value(x)
    g = potential.grad(x)
    for _ in range(max_iter):
        gn2 = float(g @ g)
        if np.sqrt(gn2) <= tol:
            return x
        # steps up to 1/M always pass the Armijo test for an M-smooth U
        t = min(2.0 * step, 1.0 / potential.m)
        while True:
            x_new = x - t * g
            u_new = potential.value(x_new)
            if u_new <= u - 0.5 * t * gn2 or t <= floor:
                break
            t = max(0.5 * t, floor)
        step = t
        x, u = x_new, u_new
        g = potential.grad(x)
    raise RuntimeError(f"minimizer did not reach gradient norm {tol} in {max_iter} iterations")


class StochasticGradient:
    """Full, subsampled or variance-reduced gradient of a finite-sum potential.

    Each evaluation draws a fresh batch without replacement from the
    estimator's own stream.  With `shared=True` the batch is shared along the
    chain axis, so both chains of a coupled pair see the same subsample.
    """

    KINDS = ("full", "subsampled", "variance-reduced")

    def __init__(self, potential: FiniteSumPotential, kind: str = "full", batch_size: int | None = None,
                 anchor=None, stream: NoiseStream | None = None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown estimator kind {kind!r}")
        N = potential.n_terms
        b = N if batch_size is None else int(batch_size)
        if not 1 <= b <= N:
            raise ValueError(f"batch size must satisfy 1 <= b <= N={N}, got {b}")
        if kind == "variance-reduced" and anchor is None:
            raise ValueError("variance-reduced estimator requires an anchor")
        self.potential = potential
        self.kind = kind
        self.batch_size = b
        self.stream = stream if stream is not None else NoiseStream(0, 0)
        self.anchor = None
        if anchor is not None:
            self.anchor = np.asarray(anchor, dtype=float)
            self.anchor_data_grad = potential.data_grad(self.anchor)

    @property
    def stochastic(self) -> bool:
        return self.kind != "full" and self.batch_size < self.potential.n_terms

    def draw(self, lead_shape) -> np.ndarray:
        N, b = self.potential.n_terms, self.batch_size
        keys = self.stream.keys(tuple(lead_shape) + (N,))
        if b == N:
            return np.argsort(keys, axis=-1)
        return np.argpartition(keys, b - 1, axis=-1)[..., :b]

    def evaluate(self, x, idx) -> np.ndarray:
        pot = self.potential
        x = np.asarray(x, dtype=float)
        scale = pot.n_terms / self.batch_size
        if self.kind == "subsampled":
            return pot.base_grad(x) + scale * pot.term_grads(x, idx)
        anchor = np.broadcast_to(self.anchor, x.shape)
        corr = pot.term_grads(x, idx) - pot.term_grads(anchor, idx)
        return pot.base_grad(x) + self.anchor_data_grad + scale * corr

    def __call__(self, x, shared: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not self.stochastic:
            return self.potential.grad(x)
        lead = list(x.shape[:-1])
        if shared:
            lead[CHAIN_AXIS + 1] = 1
        return self.evaluate(x, self.draw(lead))

    def jacobian_deviation(self, x, idx, full=None) -> np.ndarray:
        """D_x G(x, W) - hess U(x) for the batches idx (shape lead + (b,)).

        The prior Hessian cancels; `full` may carry the precomputed data Hessian at x.
        """
        pot = self.potential
        scale = pot.n_terms / self.batch_size
        if full is None:
            full = pot.term_hessians(x, np.arange(pot.n_terms))
        return scale * pot.term_hessians(x, idx) - full


def make_estimator(potential: FiniteSumPotential, kind: str, batch_size: int | None = None,
                   anchor=None, stream: NoiseStream | None = None) -> StochasticGradient:
    return StochasticGradient(potential, kind, batch_size, anchor, stream)


@dataclass(frozen=True)
class JacobianVarianceBound:
    C_G: float
    method: str
    ci: tuple[float, float] = (0.0, 0.0)
    per_point: tuple = field(default_factory=tuple)


def spectral_norm_sq(mats: np.ndarray, iterations: int = 50, tol: float = 1e-10) -> np.ndarray:
    """Largest eigenvalue of A^T A for a stack of square matrices, by power iteration."""
    mats = np.asarray(mats, dtype=float)
    d = mats.shape[-1]
    gram = np.swapaxes(mats, -1, -2) @ mats
    v = np.ones(mats.shape[:-2] + (d,)) / np.sqrt(d)
    # deterministic, non-symmetric start keeps clear of invariant subspaces
    v = v + 1e-3 * np.sin(np.arange(1, d + 1))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    est = np.zeros(mats.shape[:-2])
    for _ in range(iterations):
        w = np.einsum("...ij,...j->...i", gram, v)
        new = np.einsum("...i,...i->...", v, w)
        nrm = np.linalg.norm(w, axis=-1, keepdims=True)
        v = np.where(nrm > 0, w / np.where(nrm > 0, nrm, 1.0), v)
        done = np.all(np.abs(new - est) <= tol * np.maximum(np.abs(new), 1e-300))
        est = new
        if done:
            break
    return np.maximum(est, 0.0)


def estimate_CG(estimator: StochasticGradient, probe_points, samples_per_point: int,
                iterations: int = 50) -> JacobianVarianceBound:
    """Monte Carlo sup_x E|D_x G(x,W) - hess U(x)|^2 over the probe points, with a 95% CI."""
    if samples_per_point < 2:
        raise ValueError("samples_per_point must be >= 2")
    if not estimator.stochastic:
        return JacobianVarianceBound(0.0, "analytic", (0.0, 0.0))
    pot = estimator.potential
    chunk = max(1, min(256, int(2e7 // pot.dim**2)))
    per_point = []
    for x in probe_points:
        x = np.asarray(x, dtype=float)
        full = pot.term_hessians(x, np.arange(pot.n_terms))
        vals = []
        done = 0
        while done < samples_per_point:
            k = min(chunk, samples_per_point - done)
            idx = estimator.draw((k,))
            dev = estimator.jacobian_deviation(np.broadcast_to(x, (k, x.size)), idx, full)
            vals.append(spectral_norm_sq(dev, iterations))
            done += k
        vals = np.concatenate(vals)
        mean = float(vals.mean())
        half = 1.96 * float(vals.std(ddof=1)) / np.sqrt(vals.size)
        per_point.append((mean, mean - half, mean + half))
    best = max(per_point, key=lambda t: t[0])
    return JacobianVarianceBound(best[0], "sampled", (best[1], best[2]), tuple(per_point))


def synth_dataset(seed: int, N: int, d: int, separation: float, prior_variance: float = 1.0) -> LogisticRegressionTarget:
    """Standard-normal features, logistic labels at a weight vector of norm `separation`."""
    if N < 1 or d < 1:
        raise ValueError("N and d must be >= 1")
    if separation < 0:
        raise ValueError("separation must be nonnegative")
    rng = NoiseStream(seed, 0)
    X = rng.normal((N, d))
    w = rng.normal((d,))
    w *= separation / np.linalg.norm(w)
    y = (rng.uniform((N,)) < expit(X @ w)).astype(float)
    return LogisticRegressionTarget(X, y, prior_variance)


class IdxError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: header shorter than 4 bytes", len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxTruncatedError(f"{path}: dimension header truncated", len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:head])
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) < head + size:
        raise IdxTruncatedError(f"{path}: payload has {len(raw) - head} bytes, expected {size}", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=head).reshape(dims)


def load_idx(images_path, labels_path, keep_digits, prior_variance: float = 1.0) -> LogisticRegressionTarget:
    """Read an IDX image/label pair and keep two digits as a binary problem."""
    keep = sorted(set(int(k) for k in keep_digits))
    if len(keep) != 2:
        raise ValueError(f"keep_digits must name exactly two digits, got {keep}")
    images = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    mask = np.isin(labels, keep)
    X = images[mask].reshape(int(mask.sum()), -1).astype(float) / 255.0
    y = (labels[mask] == keep[1]).astype(float)
    if X.shape[0] == 0:
        raise ValueError(f"no rows with digits {keep}")
    return LogisticRegressionTarget(X, y, prior_variance)
