"""Phase-space states, modified norms, seeded noise streams and the coupling contract.

Array convention used throughout the package: positions and velocities are
arrays whose last axis is the coordinate axis (length n).  Coupled runs stack
the two chains of a synchronous coupling along axis -2, so a batch of R
coupled pairs has shape (R, 2, n).
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1
CHAIN_AXIS = -2


@dataclass(frozen=True)
class PhaseState:
    """Position/velocity pair.  Leading batch axes are allowed."""

    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if x.ndim == 0 or x.shape != v.shape or x.shape[-1] < 1:
            raise ValueError(f"x and v must share a shape with n >= 1, got {x.shape} and {v.shape}")
        if not (np.isfinite(x).all() and np.isfinite(v).all()):
            raise ValueError("phase state has non-finite entries")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)

    @property
    def dim(self) -> int:
        return self.x.shape[-1]

    def __sub__(self, other: "PhaseState") -> "PhaseState":
        return PhaseState(self.x - other.x, self.v - other.v)


@dataclass(frozen=True)
class ModifiedNorm:
    """Quadratic form |z|^2 = |x|^2 + 2b<x,v> + a|v|^2.

    a and b may be arrays broadcastable against the batch axes of z.
    """

    a: float
    b: float = 0.0

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if not (np.all(a > 0) and np.all(np.isfinite(a))):
            raise ValueError(f"norm parameter a must be positive, got {self.a}")
        if not np.all(b >= 0):
            raise ValueError(f"norm parameter b must be nonnegative, got {self.b}")
        if np.any(b * b >= a):
            raise ValueError(f"b^2 >= a (b={self.b}, a={self.a}): form is not a norm")
        object.__setattr__(self, "a", float(a) if a.ndim == 0 else a)
        object.__setattr__(self, "b", float(b) if b.ndim == 0 else b)

    def matrix(self) -> np.ndarray:
        return np.array([[1.0, self.b], [self.b, self.a]])

    def sq(self, dx, dv) -> np.ndarray:
        """Squared norm of (dx, dv), reduced over the last axis."""
        dx = np.asarray(dx, dtype=float)
        dv = np.asarray(dv, dtype=float)
        if dx.shape != dv.shape:
            raise ValueError(f"dimension mismatch: {dx.shape} vs {dv.shape}")
        return (
            np.sum(dx * dx, axis=-1)
            + 2.0 * self.b * np.sum(dx * dv, axis=-1)
            + self.a * np.sum(dv * dv, axis=-1)
        )


def modified_norm_sq(z: PhaseState, norm: ModifiedNorm):
    return norm.sq(z.x, z.v)


@dataclass(frozen=True)
class EquivalenceReport:
    ratios: np.ndarray
    passed: bool
    lower: float = 0.5
    upper: float = 1.5


def norm_equivalence_check(norm: ModifiedNorm, samples: Sequence[PhaseState]) -> EquivalenceReport:
    """Ratio |z|_{a,b}^2 / |z|_{a,0}^2 per sample; passes iff every ratio is in [1/2, 3/2]."""
    if len(samples) == 0:
        raise ValueError("empty sample list")
    plain = ModifiedNorm(norm.a, 0.0)
    ratios = np.array([float(modified_norm_sq(z, norm) / modified_norm_sq(z, plain)) for z in samples])
    return EquivalenceReport(ratios, bool(np.all((ratios >= 0.5) & (ratios <= 1.5))))


class NoiseStream:
    """Counter-based seeded stream (Philox keyed by (seed, stream_id)).

    Gaussians come from the inverse normal CDF of 52-bit uniforms on the open
    interval (0, 1), so every draw of a given shape consumes a fixed number of
    generator outputs.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))
        self.counter = 0

    def __repr__(self):
        return f"NoiseStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"

    def spawn(self, stream_id: int) -> "NoiseStream":
        return NoiseStream(self.seed, stream_id)

    def _open_uniform(self, shape) -> np.ndarray:
        shape = tuple(shape)
        self.counter += int(np.prod(shape, dtype=np.int64))
        k = np.floor(self._gen.random(shape) * 2.0**52)
        return (k + 0.5) * 2.0**-52

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return low + (high - low) * self._open_uniform(shape)

    def normal(self, shape=()) -> np.ndarray:
        return ndtri(self._open_uniform(shape))

    def keys(self, shape) -> np.ndarray:
        """Uniform sort keys, used to draw subsets without replacement."""
        return self._open_uniform(shape)


class SharedNoise:
    """Synchronous coupling: one draw is broadcast to every chain along `axis`."""

    def __init__(self, stream: NoiseStream, axis: int = CHAIN_AXIS):
        self.stream = stream
        self.axis = axis

    @property
    def counter(self) -> int:
        return self.stream.counter

    def _collapsed(self, shape):
        shape = list(shape)
        shape[self.axis] = 1
        return tuple(shape)

    def uniform(self, shape=(), low=0.0, high=1.0):
        return np.broadcast_to(self.stream.uniform(self._collapsed(shape), low, high), shape)

    def normal(self, shape=()):
        return np.broadcast_to(self.stream.normal(self._collapsed(shape)), shape)


class ZeroNoise:
    """Deterministic stand-in: Gaussians are zero, uniforms sit at a fixed fraction."""

    def __init__(self, fraction: float = 0.5):
        self.fraction = fraction
        self.counter = 0

    def normal(self, shape=()):
        self.counter += int(np.prod(shape, dtype=np.int64))
        return np.zeros(shape)

    def uniform(self, shape=(), low=0.0, high=1.0):
        self.counter += int(np.prod(shape, dtype=np.int64))
        return np.full(shape, low + (high - low) * self.fraction)


@dataclass
class RecordingNoise:
    """Wraps a stream and keeps every draw, in order."""

    stream: object
    draws: list = field(default_factory=list)

    def normal(self, shape=()):
        out = self.stream.normal(shape)
        self.draws.append(("normal", np.array(out)))
        return out

    def uniform(self, shape=(), low=0.0, high=1.0):
        out = self.stream.uniform(shape, low, high)
        self.draws.append(("uniform", np.array(out)))
        return out


class ReplayNoise:
    """Serves a fixed list of arrays back in order."""

    def __init__(self, arrays: Iterable[np.ndarray]):
        self._arrays = list(arrays)
        self._i = 0

    def _next(self, shape):
        out = self._arrays[self._i]
        self._i += 1
        if out.shape != tuple(shape):
            raise ValueError(f"replayed draw has shape {out.shape}, expected {tuple(shape)}")
        return out

    def normal(self, shape=()):
        return self._next(shape)

    def uniform(self, shape=(), low=0.0, high=1.0):
        return self._next(shape)


@dataclass
class CouplingPair:
    """Two chains driven by one stream in lockstep."""

    chain_a: PhaseState
    chain_b: PhaseState
    shared_noise: NoiseStream

    def __post_init__(self):
        if self.chain_a.x.shape != self.chain_b.x.shape:
            raise ValueError("coupled chains must have equal shapes")

    def stacked(self) -> PhaseState:
        return PhaseState(
            np.stack([self.chain_a.x, self.chain_b.x], axis=CHAIN_AXIS),
            np.stack([self.chain_a.v, self.chain_b.v], axis=CHAIN_AXIS),
        )

    def noise(self) -> SharedNoise:
        return SharedNoise(self.shared_noise)


def thread_count() -> int:
    raw = os.environ.get("LANGEVIN_KIT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def parallel_map(fn: Callable, items: Sequence) -> list:
    """Order-preserving map, parallel up to LANGEVIN_KIT_THREADS workers."""
    workers = min(thread_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
