"""Lagrangian controllability experiments in perforated tori."""

import os

# the bundled TBB is too old for numba; avoid a warning on every parallel kernel
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from .geometry import (
    ControlZone,
    DomainSpec,
    ParticleShape,
    Patch,
    PerforatedDomain,
    build_perforated_domain,
    epsilon_threshold,
    signed_distance,
)
from .exponents import Exponents, exponent_pD, exponent_pE, theorem_time

__all__ = [
    "ControlZone",
    "DomainSpec",
    "Exponents",
    "ParticleShape",
    "Patch",
    "PerforatedDomain",
    "build_perforated_domain",
    "epsilon_threshold",
    "exponent_pD",
    "exponent_pE",
    "signed_distance",
    "theorem_time",
]

__version__ = "0.1.0"
