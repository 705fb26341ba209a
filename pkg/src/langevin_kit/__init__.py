"""Kinetic and overdamped Langevin discretisations with contraction diagnostics."""
from .core import CouplingPair, ModifiedNorm, NoiseStream, PhaseState, SharedNoise, modified_norm_sq
from .integrators import IntegratorParams, IntegratorState, SchemeId, parse_scheme, step, step_overdamped

__all__ = [
    "CouplingPair",
    "IntegratorParams",
    "IntegratorState",
    "ModifiedNorm",
    "NoiseStream",
    "PhaseState",
    "SchemeId",
    "SharedNoise",
    "modified_norm_sq",
    "parse_scheme",
    "step",
    "step_overdamped",
]

__version__ = "0.1.0"
