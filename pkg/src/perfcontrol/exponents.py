"""Convergence exponents, admissibility regions and control horizons.

Two regimes are covered.  In the Euler regime (partially perforated torus)
the rate is ``min(alpha + beta - 3, alpha - 3/2, beta)``.  In the Darcy
regime (fully perforated torus) it is
``min((3 - 2 beta)/3, (alpha - 1)/2, 3 - alpha, 6 - 2 alpha - 2 beta)``.

Note on the Darcy rate: an earlier estimate in the homogenization
literature carried ``(9 - 3 alpha)/2`` where the corrected inertial bound
gives ``3 - alpha``; the corrected value is used here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, NamedTuple

from .errors import ExponentError


class ExponentValue(NamedTuple):
    value: float
    admissible: bool


def exponent_pE(alpha: float, beta: float) -> ExponentValue:
    """Euler-regime rate and whether ``(alpha, beta)`` lies in its theorem region."""
    value = min(alpha + beta - 3.0, alpha - 1.5, beta)
    admissible = alpha > 1.5 and beta > 0.0 and 3.0 - alpha < beta < alpha
    return ExponentValue(value, admissible)


def exponent_pD(alpha: float, beta: float) -> ExponentValue:
    """Darcy-regime rate and whether ``(alpha, beta)`` lies in its theorem region."""
    value = min((3.0 - 2.0 * beta) / 3.0, (alpha - 1.0) / 2.0, 3.0 - alpha, 6.0 - 2.0 * alpha - 2.0 * beta)
    admissible = 1.0 < alpha < 3.0 and 0.0 < beta < min(1.5, 3.0 - alpha)
    return ExponentValue(value, admissible)


@dataclass(frozen=True)
class Exponents:
    alpha: float
    beta: float

    @property
    def p_E(self) -> float:
        return exponent_pE(self.alpha, self.beta).value

    @property
    def p_D(self) -> float:
        return exponent_pD(self.alpha, self.beta).value

    @property
    def euler_admissible(self) -> bool:
        return exponent_pE(self.alpha, self.beta).admissible

    @property
    def darcy_admissible(self) -> bool:
        return exponent_pD(self.alpha, self.beta).admissible

    def rate(self, mode: Literal["euler", "darcy"]) -> float:
        return self.p_E if mode == "euler" else self.p_D

    def admissible(self, mode: Literal["euler", "darcy"]) -> bool:
        return self.euler_admissible if mode == "euler" else self.darcy_admissible


def time_exponent(mode: Literal["euler", "darcy"], alpha: float, beta: float) -> float:
    """Power of eps giving the unit-viscosity control horizon."""
    if mode == "euler":
        return beta
    if mode == "darcy":
        return alpha + 2.0 * beta - 3.0
    raise ExponentError(f"unknown mode {mode!r}")


def theorem_time(mode: Literal["euler", "darcy"], alpha: float, beta: float, eps: float) -> float:
    """Control horizon of the unit-viscosity problem: ``eps**beta`` or ``eps**(alpha+2beta-3)``."""
    if not eps > 0.0:
        raise ExponentError("eps must be positive")
    ex = Exponents(alpha, beta)
    if not ex.admissible(mode):
        raise ExponentError(f"(alpha={alpha}, beta={beta}) outside the {mode} theorem region")
    return eps ** time_exponent(mode, alpha, beta)


def initial_data_cap(mode: Literal["euler", "darcy"], alpha: float, beta: float, eps: float) -> float:
    """Largest unit-frame initial L2 norm allowed by the theorem hypotheses."""
    return eps ** (Exponents(alpha, beta).rate(mode) - beta)
