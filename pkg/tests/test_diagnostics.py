import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from langevin_kit.core import NoiseStream
from langevin_kit.diagnostics import (
    BIAS_COLUMNS,
    BiasRow,
    EstimatorConfig,
    Reference,
    bias_table,
    ess,
    format_block_table,
    rows_to_csv,
    rows_to_json,
    run_sampler,
)
from langevin_kit.integrators import KINETIC_SCHEMES, IntegratorParams
from langevin_kit.potentials import gaussian_potential


def ar1(phi, n, seed):
    e = NoiseStream(seed, 0).normal((n,))
    x = np.empty(n)
    x[0] = e[0] / math.sqrt(1 - phi * phi)
    for i in range(1, n):
        x[i] = phi * x[i - 1] + e[i]
    return x


def test_ess_iid_and_ar1():
    n = 10**5
    assert 0.8 <= ess(NoiseStream(1, 0).normal((n,))) / n <= 1.2
    assert abs(ess(ar1(0.5, n, 2)) / n - 1 / 3) <= 0.2 / 3


def test_ess_multivariate():
    n = 10**5
    x = np.column_stack([ar1(0.5, n, 3), ar1(0.5, n, 4)])
    assert abs(ess(x) / n - 1 / 3) <= 0.2 / 3


def test_ess_errors():
    with pytest.raises(ValueError):
        ess(np.ones(1000))
    with pytest.raises(ValueError):
        ess(np.arange(50.0))
    with pytest.raises(ValueError):
        ess(np.ones((200, 2)))


@given(st.floats(0.01, 100.0), st.floats(-100.0, 100.0))
def test_ess_affine_invariant(scale, shift):
    x = ar1(0.3, 2000, 5)
    assert ess(scale * x + shift) == pytest.approx(ess(x), rel=1e-8)


def test_run_sampler_gaussian_mean():
    pot = gaussian_potential([1.0])
    out = run_sampler("BAOAB", pot, None, IntegratorParams(0.1, 1.0), 20000, 1000, 8, seed=3)
    assert out.ok and abs(out.mean - 0.5) < 4 * out.se
    assert out.ess <= out.n_samples * out.replicas
    assert out.grad_evals == 20001 * 8


def test_run_sampler_errors_and_determinism():
    pot = gaussian_potential([1.0, 2.0])
    with pytest.raises(ValueError):
        run_sampler("EM", pot, None, IntegratorParams(0.1, 1.0), 1000, 1000, 4)
    a = run_sampler("OBABO", pot, None, IntegratorParams(0.1, 1.0), 500, 100, 2, seed=1)
    b = run_sampler("OBABO", pot, None, IntegratorParams(0.1, 1.0), 500, 100, 2, seed=1)
    assert (a.mean, a.se, a.ess, a.grad_evals) == (b.mean, b.se, b.ess, b.grad_evals)


def test_run_sampler_failure_marked():
    pot = gaussian_potential([1.0, 100.0])
    out = run_sampler("EM", pot, None, IntegratorParams(1.0, 1.0), 2000, 100, 2)
    assert out.status == "failed" and out.failed_at is not None and math.isnan(out.mean)


def test_run_sampler_overdamped():
    pot = gaussian_potential([1.0, 1.0])
    out = run_sampler("OD-LM", pot, None, 0.05, 20000, 1000, 8, seed=2)
    assert abs(out.mean - 1.0) < 4 * out.se + 0.05


def test_bias_table_gaussian_exact_reference():
    pot = gaussian_potential([1.0, 4.0])
    rows, ref = bias_table(KINETIC_SCHEMES, pot, [EstimatorConfig()], [0.02], [2.0], Reference(1.0, 0.0, "exact"),
                           8, 20000, 2000, seed=4)
    assert len(rows) == 8 and ref.mean == 1.0
    for r in rows:
        assert r.status == "ok"
        assert abs(r.bias) < 4 * r.se, r


def test_bias_table_na_and_formats():
    pot = gaussian_potential([1.0, 100.0])
    rows, _ = bias_table(["EM", "BAOAB"], pot, [EstimatorConfig()], [0.5, 0.05], [10.0], 0.0, 2, 500, 100)
    em_big = [r for r in rows if r.scheme == "EM" and r.h == 0.5][0]
    assert em_big.status == "N.A."
    text = rows_to_csv(rows)
    assert text.splitlines()[0] == ",".join(BIAS_COLUMNS)
    assert "N.A." in text and "nan" in text
    assert '"status": "N.A."' in rows_to_json(rows)
    assert "N.A." in format_block_table(rows)


def test_baoab_bias_shrinks_with_h():
    pot = gaussian_potential([1.0, 10.0])
    hs = [s / math.sqrt(10.0) for s in (1.0, 0.5, 0.25)]
    rows, _ = bias_table(["BAOAB"], pot, [EstimatorConfig()], hs, [math.sqrt(10.0)], Reference(1.0), 8, 20000, 2000)
    by_h = sorted(rows, key=lambda r: -r.h)
    for big, small in zip(by_h, by_h[1:]):
        assert abs(small.bias) <= abs(big.bias) + 2 * (big.se + small.se)


def test_evals_per_ess():
    r = BiasRow("EM", 0.1, 1.0, "full", 0, 0.0, 1.0, 100.0, 1000, "ok")
    assert r.evals_per_ess == 10.0
