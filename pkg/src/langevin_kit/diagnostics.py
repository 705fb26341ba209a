"""Effective sample size, sampler runs with standard errors, and bias tables."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .core import NoiseStream, parallel_map
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
from .potentials import StochasticGradient

# constants of the full-scale MNIST setting, kept for reproduction mode output only
MNIST_PRIOR_VARIANCE = 1e-3
MNIST_POSTERIOR_SD_U = 19.82
MNIST_REFERENCE_SD = 0.023


def _batch_means(x: np.ndarray):
    n = x.shape[0]
    size = int(math.floor(math.sqrt(n)))
    k = n // size
    means = x[: k * size].reshape((k, size) + x.shape[1:]).mean(axis=1)
    return size, means


def ess(samples) -> float:
    """Batch-means effective sample size with batch size floor(sqrt(n)).

    A 1D series gives n var / (b var(batch means)); an (n, d) series gives
    n (det Lambda / det Sigma_bm)^(1/d).
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim not in (1, 2):
        raise ValueError("samples must be a vector or an (n, d) array")
    n = x.shape[0]
    if n < 100:
        raise ValueError(f"need at least 100 samples, got {n}")
    size, means = _batch_means(x)
    if x.ndim == 1:
        var = x.var(ddof=1)
        if not var > 0:
            raise ValueError("degenerate (constant) series")
        long_run = size * means.var(ddof=1)
        if not long_run > 0:
            raise ValueError("degenerate batch means")
        return float(n * var / long_run)
    d = x.shape[1]
    lam = np.atleast_2d(np.cov(x, rowvar=False))
    sig = size * np.atleast_2d(np.cov(means, rowvar=False))
    sign_l, logdet_l = np.linalg.slogdet(lam)
    sign_s, logdet_s = np.linalg.slogdet(sig)
    if sign_l <= 0 or sign_s <= 0:
        raise ValueError("degenerate multivariate series")
    return float(n * math.exp((logdet_l - logdet_s) / d))


@dataclass
class RunSummary:
    scheme: str
    h: float
    gamma: float
    grad: str
    batch: int
    mean: float
    se: float
    ess: float
    grad_evals: int
    n_samples: int
    replicas: int
    status: str = "ok"
    failed_at: int | None = None
    wall_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def run_sampler(scheme, potential, estimator: StochasticGradient | None, params, iterations: int, burn_in: int,
                replicas: int, test_function: Callable | None = None, seed: int = 0, stream_id: int = 0,
                x0=None) -> RunSummary:
    """Run `replicas` independent chains from the minimizer and average a test function.

    The mean and standard error are taken across replica means; ESS is the
    sum of per-replica batch-means ESS, each capped at the replica's sample count.
    """
    s = parse_scheme(scheme)
    if not 0 <= burn_in < iterations:
        raise ValueError("need 0 <= burn_in < iterations")
    if iterations - burn_in < 100:
        raise ValueError("need at least 100 retained iterations")
    if replicas < 2:
        raise ValueError("replicas must be >= 2 for a standard error")
    f = test_function if test_function is not None else potential.value
    noise = NoiseStream(seed, 2 * stream_id)
    if estimator is not None and estimator.stochastic:
        est = StochasticGradient(estimator.potential, estimator.kind, estimator.batch_size, estimator.anchor,
                                 NoiseStream(seed, 2 * stream_id + 1))
        grad = GradientSource(est)
        kind, batch = est.kind, est.batch_size
    else:
        grad = GradientSource(potential.grad)
        kind, batch = "full", getattr(potential, "n_terms", 0)
    if x0 is None:
        x0 = potential.minimizer() if hasattr(potential, "minimizer") else np.zeros(potential.dim)
    x = np.broadcast_to(np.asarray(x0, dtype=float), (replicas, potential.dim)).copy()
    if s.kinetic:
        state = IntegratorState(x, noise.normal(x.shape))
        h, gamma = float(params.h), float(params.gamma)
    else:
        state = IntegratorState(x)
        h, gamma = float(params), math.nan
    kept = np.empty((iterations - burn_in, replicas))
    started = time.perf_counter()
    summary = dict(scheme=str(s), h=h, gamma=gamma, grad=kind, batch=int(batch), replicas=replicas,
                   n_samples=iterations - burn_in)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(iterations):
            try:
                if s.kinetic:
                    state = step(s, state, grad, params, noise)
                else:
                    state = step_overdamped(s, state, grad, params, noise)
            except IntegratorDivergence:
                return RunSummary(mean=math.nan, se=math.nan, ess=math.nan, grad_evals=grad.calls * replicas,
                                  status="failed", failed_at=k + 1, wall_time=time.perf_counter() - started,
                                  **summary)
            if k >= burn_in:
                kept[k - burn_in] = f(state.x)
    if not np.all(np.isfinite(kept)):
        bad = int(np.argmax(~np.isfinite(kept).all(axis=1))) + burn_in + 1
        return RunSummary(mean=math.nan, se=math.nan, ess=math.nan, grad_evals=grad.calls * replicas,
                          status="failed", failed_at=bad, wall_time=time.perf_counter() - started, **summary)
    rep_means = kept.mean(axis=0)
    n = kept.shape[0]
    total_ess = 0.0
    for r in range(replicas):
        try:
            total_ess += min(ess(kept[:, r]), float(n))
        except ValueError:
            total_ess += 0.0
    return RunSummary(
        mean=float(rep_means.mean()),
        se=float(rep_means.std(ddof=1) / math.sqrt(replicas)),
        ess=total_ess,
        grad_evals=grad.calls * replicas,
        wall_time=time.perf_counter() - started,
        **summary,
    )


@dataclass
class BiasRow:
    scheme: str
    h: float
    gamma: float
    grad: str
    batch: int
    bias: float
    se: float
    ess: float
    grad_evals: int
    status: str

    @property
    def evals_per_ess(self) -> float:
        return self.grad_evals / self.ess if self.ess > 0 else math.inf


BIAS_COLUMNS = ("scheme", "h", "gamma", "grad", "batch", "bias", "se", "ess", "grad_evals", "status")


@dataclass(frozen=True)
class EstimatorConfig:
    kind: str = "full"
    batch: int | None = None


@dataclass(frozen=True)
class Reference:
    mean: float
    se: float = 0.0
    source: str = "supplied"


def reference_run(potential, h: float, gamma: float, iterations: int, burn_in: int, replicas: int,
                  seed: int = 0, stream_id: int = 10**6) -> Reference:
    """Long full-gradient BAOAB run used as the reference mean."""
    out = run_sampler(SchemeId.BAOAB, potential, None, IntegratorParams(h, gamma), iterations, burn_in,
                      replicas, seed=seed, stream_id=stream_id)
    if not out.ok:
        raise FloatingPointError("reference run diverged")
    return Reference(out.mean, out.se, f"BAOAB h={h!r} gamma={gamma!r} iterations={iterations}")


def bias_table(schemes: Sequence, potential, estimator_configs: Sequence[EstimatorConfig], h_list, gamma_list,
               reference: Reference | float | None, runs: int, iterations: int, burn_in: int, seed: int = 0,
               anchor=None) -> tuple[list[BiasRow], Reference]:
    """Bias of the test-function mean for every (scheme, estimator, h, gamma) cell.

    Without a supplied reference, one is computed by a BAOAB run at a quarter
    of the smallest stepsize, ten times longer.  Failed cells get status N.A.
    """
    if reference is None:
        reference = reference_run(potential, min(h_list) / 4, gamma_list[0], 10 * iterations, 10 * burn_in,
                                  runs, seed)
    elif not isinstance(reference, Reference):
        reference = Reference(float(reference))
    cells = [(parse_scheme(s), cfg, h, g) for s in schemes for cfg in estimator_configs
             for h in h_list for g in gamma_list]

    def run_cell(i):
        s, cfg, h, g = cells[i]
        est = None
        if cfg.kind != "full":
            est = StochasticGradient(potential, cfg.kind, cfg.batch, anchor if cfg.kind == "variance-reduced" else None)
        params = IntegratorParams(h, g) if s.kinetic else h
        return run_sampler(s, potential, est, params, iterations, burn_in, runs, seed=seed, stream_id=i)

    rows = []
    for (s, cfg, h, g), out in zip(cells, parallel_map(run_cell, list(range(len(cells))))):
        if out.ok:
            rows.append(BiasRow(str(s), h, g, out.grad, out.batch, out.mean - reference.mean,
                                math.hypot(out.se, reference.se), out.ess, out.grad_evals, "ok"))
        else:
            rows.append(BiasRow(str(s), h, g, out.grad, out.batch, math.nan, math.nan, math.nan,
                                out.grad_evals, "N.A."))
    return rows, reference


def rows_to_csv(rows: Sequence[BiasRow]) -> str:
    from .spectral import fmt_number

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BIAS_COLUMNS)
    for r in rows:
        d = asdict(r)
        w.writerow([d[c] if isinstance(d[c], str) else fmt_number(d[c]) for c in BIAS_COLUMNS])
    return buf.getvalue()


def rows_to_json(rows: Sequence[BiasRow], reference: Reference | None = None) -> str:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        return v
    body = {"rows": [{k: clean(v) for k, v in asdict(r).items()} for r in rows]}
    if reference is not None:
        body["reference"] = {"mean": reference.mean, "se": reference.se, "source": reference.source}
    return json.dumps(body, indent=1)


def format_block_table(rows: Sequence[BiasRow], h_labels: dict | None = None) -> str:
    """Bias and evals/ESS blocks laid out as schemes x stepsizes, one block per (gamma, grad)."""
    out = []
    keys = sorted({(r.gamma, r.grad, r.batch) for r in rows})
    hs = sorted({r.h for r in rows}, reverse=True)
    for g, grad, batch in keys:
        out.append(f"gamma={g:.6g} grad={grad} batch={batch}")
        head = ["scheme"] + [(h_labels or {}).get(h, f"h={h:.4g}") for h in hs]
        out.append("  bias (+/- se): " + " | ".join(head))
        schemes = []
        for r in rows:
            if r.gamma == g and r.grad == grad and r.scheme not in schemes:
                schemes.append(r.scheme)
        for s in schemes:
            cells = []
            for h in hs:
                match = [r for r in rows if r.scheme == s and r.h == h and r.gamma == g and r.grad == grad]
                if not match or match[0].status != "ok":
                    cells.append("N.A.")
                else:
                    cells.append(f"{match[0].bias:.3g} (+/- {match[0].se:.2g}) [{match[0].evals_per_ess:.3g}]")
            out.append(f"  {s}: " + " | ".join(cells))
    return "\n".join(out)
