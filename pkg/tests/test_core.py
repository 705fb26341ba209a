import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from langevin_kit.core import (
    CouplingPair,
    ModifiedNorm,
    NoiseStream,
    PhaseState,
    RecordingNoise,
    ReplayNoise,
    SharedNoise,
    ZeroNoise,
    modified_norm_sq,
    norm_equivalence_check,
    parallel_map,
    thread_count,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_phase_state_validation():
    with pytest.raises(ValueError):
        PhaseState(np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError):
        PhaseState(np.array([np.nan]), np.zeros(1))
    with pytest.raises(ValueError):
        PhaseState(np.zeros(0), np.zeros(0))
    z = PhaseState([1.0, 2.0], [3.0, 4.0]) - PhaseState([1.0, 1.0], [1.0, 1.0])
    assert z.x.tolist() == [0.0, 1.0] and z.v.tolist() == [2.0, 3.0]


@pytest.mark.parametrize("x, v, a, b, expected", [
    ([1.0, 0.0], [0.0, 0.0], 1.0, 0.0, 1.0),
    ([1.0], [1.0], 1.0, 0.5, 3.0),
    ([1.0], [-2.0], 0.25, 0.4, 0.4),
])
def test_modified_norm_examples(x, v, a, b, expected):
    assert modified_norm_sq(PhaseState(x, v), ModifiedNorm(a, b)) == pytest.approx(expected, abs=1e-15)


def test_modified_norm_errors():
    with pytest.raises(ValueError, match="not a norm"):
        ModifiedNorm(1.0, 1.0)
    with pytest.raises(ValueError):
        ModifiedNorm(0.0, 0.0)
    with pytest.raises(ValueError):
        ModifiedNorm(1.0, -0.1)
    with pytest.raises(ValueError, match="dimension"):
        ModifiedNorm(1.0).sq(np.zeros(2), np.zeros(3))


@given(st.floats(1e-3, 1e3), st.floats(0.0, 0.999), st.lists(finite, min_size=2, max_size=2),
       st.lists(finite, min_size=2, max_size=2))
def test_modified_norm_positive_definite(a, frac, x, v):
    b = frac * np.sqrt(a)
    norm = ModifiedNorm(a, b)
    assert np.all(np.linalg.eigvalsh(norm.matrix()) > 0)
    val = norm.sq(np.array(x), np.array(v))
    if np.any(np.array(x + v) != 0):
        assert val > 0 or np.isclose(val, 0.0, atol=1e-9 * (1 + np.sum(np.square(x + v))))


def test_norm_equivalence():
    rng = np.random.default_rng(3)
    zs = [PhaseState(rng.normal(size=2), rng.normal(size=2)) for _ in range(50)]
    rep = norm_equivalence_check(ModifiedNorm(0.3, 0.0), zs)
    assert rep.passed and np.all(rep.ratios == 1.0)
    with pytest.raises(ValueError):
        norm_equivalence_check(ModifiedNorm(1.0), [])


def test_norm_equivalence_em_region():
    M, gamma = 10.0, 2.0 * np.sqrt(10.0) * 1.3
    stream = NoiseStream(5, 0)
    x, v = stream.normal((10000, 2)), stream.normal((10000, 2))
    zs = [PhaseState(x[i], v[i]) for i in range(10000)]
    assert norm_equivalence_check(ModifiedNorm(1 / M, 1 / gamma), zs).passed


def test_norm_equivalence_counterexample():
    rep = norm_equivalence_check(ModifiedNorm(1.0, 0.99), [PhaseState([1.0], [-1.0])])
    assert rep.ratios[0] == pytest.approx(0.01, abs=1e-14)
    assert not rep.passed


def test_noise_stream_reproducible_and_distinct():
    a, b, c = NoiseStream(7, 3), NoiseStream(7, 3), NoiseStream(7, 4)
    xa = a.normal((1000,))
    assert np.array_equal(xa, b.normal((1000,)))
    xc = c.normal((1000,))
    assert not np.array_equal(xa, xc)
    assert abs(np.corrcoef(xa, xc)[0, 1]) < 4 / np.sqrt(1000)
    assert a.counter == 1000


def test_noise_stream_moments_and_range():
    s = NoiseStream(0, 0)
    u = s.uniform((200000,))
    assert 0.0 < u.min() and u.max() < 1.0
    z = s.normal((200000,))
    assert np.all(np.isfinite(z))
    assert abs(z.mean()) < 4 / np.sqrt(z.size)
    assert abs(z.var() - 1.0) < 4 * np.sqrt(2 / z.size)


def test_shared_noise_broadcasts_over_chain_axis():
    sh = SharedNoise(NoiseStream(1, 0))
    out = sh.normal((5, 2, 3))
    assert np.array_equal(out[:, 0], out[:, 1])
    assert not np.array_equal(out[0], out[1])
    assert sh.counter == 15


def test_zero_record_replay():
    z = ZeroNoise(0.25)
    assert np.all(z.normal((3,)) == 0) and np.all(z.uniform((2,), 0, 4) == 1.0)
    rec = RecordingNoise(NoiseStream(2, 0))
    a = rec.normal((3,))
    u = rec.uniform((1,))
    rep = ReplayNoise([d for _, d in rec.draws])
    assert np.array_equal(rep.normal((3,)), a) and np.array_equal(rep.uniform((1,)), u)
    with pytest.raises(ValueError):
        ReplayNoise([np.zeros(2)]).normal((3,))


def test_coupling_pair():
    za, zb = PhaseState([0.0, 1.0], [1.0, 0.0]), PhaseState([2.0, 1.0], [0.0, 0.0])
    pair = CouplingPair(za, zb, NoiseStream(0, 0))
    st_ = pair.stacked()
    assert st_.x.shape == (2, 2) and np.array_equal(st_.x[1], zb.x)
    assert isinstance(pair.noise(), SharedNoise)
    with pytest.raises(ValueError):
        CouplingPair(za, PhaseState([0.0], [0.0]), NoiseStream(0, 0))


def test_parallel_map_order(monkeypatch):
    monkeypatch.setenv("LANGEVIN_KIT_THREADS", "3")
    assert thread_count() == 3
    assert parallel_map(lambda i: i * i, list(range(20))) == [i * i for i in range(20)]
    monkeypatch.setenv("LANGEVIN_KIT_THREADS", "junk")
    assert thread_count() == 1
