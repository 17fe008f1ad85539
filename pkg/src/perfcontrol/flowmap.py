"""Lagrangian flow maps and the measure diagnostics built on them.

Velocity sources are callables ``u(t, x)`` returning ``(P, 3)`` arrays and
exposing the time interval on which they are defined.  Grid-based sources
combine a few tabulated basis fields with time-dependent coefficients and
interpolate them with periodic tricubic (four-point Lagrange) stencils.
Positions are carried unwrapped; every membership or distance test wraps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Literal, Protocol

import numba
import numpy as np

from .errors import FieldGapped, SupportViolation
from .geometry import ControlZone, PerforatedDomain, min_image, wrap

Origin = Literal["P0", "P1", "torus"]
Z95 = 1.959963984540054


class VelocitySource(Protocol):
    t_range: tuple[float, float]

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray: ...


# ---------------------------------------------------------------- sources
@dataclass
class ClosedFormVelocity:
    """Wraps an analytic ``u(t, x)``."""

    fn: Callable[[float, np.ndarray], np.ndarray]
    t_range: tuple[float, float] = (-np.inf, np.inf)

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(t, np.asarray(x, dtype=float)), dtype=float).reshape(-1, 3)


def constant_velocity(c) -> ClosedFormVelocity:
    c = np.asarray(c, dtype=float)
    return ClosedFormVelocity(lambda t, x: np.broadcast_to(c, x.shape).copy())


def zero_velocity() -> ClosedFormVelocity:
    return constant_velocity([0.0, 0.0, 0.0])


@numba.njit(cache=True, inline="always")
def _lagrange4(f):
    """Weights of the cubic through nodes -1, 0, 1, 2 at fractional offset ``f``."""
    w0 = -f * (f - 1.0) * (f - 2.0) / 6.0
    w1 = (f + 1.0) * (f - 1.0) * (f - 2.0) / 2.0
    w2 = -(f + 1.0) * f * (f - 2.0) / 2.0
    w3 = (f + 1.0) * f * (f - 1.0) / 6.0
    return w0, w1, w2, w3


@numba.njit(parallel=True, cache=True)
def _tricubic(tables, coeffs, pts, out):
    n = tables.shape[-1]
    nt = tables.shape[0]
    for p in numba.prange(pts.shape[0]):
        w = np.empty((3, 4))
        idx = np.empty((3, 4), dtype=np.int64)
        for d in range(3):
            s = pts[p, d] * n
            base = math.floor(s)
            w[d, 0], w[d, 1], w[d, 2], w[d, 3] = _lagrange4(s - base)
            for k in range(4):
                idx[d, k] = (base - 1 + k) % n
        acc0 = 0.0
        acc1 = 0.0
        acc2 = 0.0
        for t in range(nt):
            ct = coeffs[t]
            if ct == 0.0:
                continue
            for a in range(4):
                for b in range(4):
                    wab = w[0, a] * w[1, b] * ct
                    for c in range(4):
                        wt = wab * w[2, c]
                        acc0 += wt * tables[t, 0, idx[0, a], idx[1, b], idx[2, c]]
                        acc1 += wt * tables[t, 1, idx[0, a], idx[1, b], idx[2, c]]
                        acc2 += wt * tables[t, 2, idx[0, a], idx[1, b], idx[2, c]]
        out[p, 0] = acc0
        out[p, 1] = acc1
        out[p, 2] = acc2


def tricubic(tables: np.ndarray, coeffs: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Evaluate ``sum_k coeffs[k] * tables[k]`` at ``points`` (periodic unit box)."""
    tables = np.ascontiguousarray(tables, dtype=np.float64)
    if tables.ndim == 4:
        tables = tables[None]
    pts = np.ascontiguousarray(wrap(np.atleast_2d(points)), dtype=np.float64)
    out = np.empty((len(pts), 3))
    _tricubic(tables, np.ascontiguousarray(coeffs, dtype=np.float64), pts, out)
    return out


@dataclass
class TabulatedVelocity:
    """``u(t, x) = sum_k c_k(t) table_k(x)`` with tricubic space interpolation.

    ``guard`` is a zone whose neighbourhood (``guard_margin`` wide) the tables
    do not represent; evaluating there raises :class:`SupportViolation`.
    """

    tables: np.ndarray  # (K, 3, n, n, n)
    coefficients: Callable[[float], np.ndarray]
    t_range: tuple[float, float] = (0.0, 1.0)
    guard: ControlZone | None = None
    guard_margin: float = 0.0

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        lo, hi = self.t_range
        tol = 1e-12 * max(1.0, abs(hi))
        if t < lo - tol or t > hi + tol:
            raise FieldGapped(f"time {t:.6g} outside the tabulated interval [{lo:.6g}, {hi:.6g}]")
        if self.guard is not None and np.any(self.guard.distance(x) <= self.guard_margin):
            raise SupportViolation("exterior-only velocity table evaluated next to the control zone")
        return tricubic(self.tables, self.coefficients(float(np.clip(t, lo, hi))), x)


def _hat_weights(times: np.ndarray, t: float) -> np.ndarray:
    w = np.zeros(len(times))
    if len(times) == 1:
        w[0] = 1.0
        return w
    j = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
    lam = (t - times[j]) / (times[j + 1] - times[j])
    w[j], w[j + 1] = 1.0 - lam, lam
    return w


def trajectory_velocity(traj, time_scale: float = 1.0) -> TabulatedVelocity:
    """Velocity of a simulated trajectory: tricubic in space, linear in time.

    ``time_scale`` multiplies the snapshot time stamps (for frame changes).
    """
    times = np.asarray(traj.times, dtype=float) * time_scale
    tables = np.stack([np.asarray(v, dtype=np.float64) for v in traj.velocity])
    return TabulatedVelocity(tables, lambda t: _hat_weights(times, t), (float(times[0]), float(times[-1])))


def tabulated_limit_velocity(triplet, n: int, exterior_only: bool = False) -> TabulatedVelocity:
    """Limit-control velocity from per-snapshot basis tables on an ``n^3`` grid.

    ``exterior_only`` drops the Bogovskii part (supported in the zone) and
    guards the zone plus two grid cells, the reach of the tricubic stencil.
    """
    basis = triplet.velocity_basis(n, exterior_only)
    guard = triplet.zone if exterior_only else None
    return TabulatedVelocity(basis, lambda t: triplet.theta.coefficients(t)[0], (0.0, 1.0), guard, 2.0 * np.sqrt(3) / n)


def exact_limit_velocity(triplet) -> ClosedFormVelocity:
    return ClosedFormVelocity(triplet.velocity, (0.0, 1.0))


# ---------------------------------------------------------------- integration
def advect(
    points: np.ndarray,
    velocity: VelocitySource,
    t_span: tuple[float, float],
    steps: int,
    record: bool = False,
) -> np.ndarray:
    """Classical RK4 integration of ``dx/dt = u(t, x)`` from ``t_span[0]`` to ``t_span[1]``.

    Backward integration is a reversed ``t_span``.  Returns the final
    positions, or all ``steps + 1`` stages of positions when ``record``.
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    t0, t1 = map(float, t_span)
    x = np.array(np.atleast_2d(points), dtype=float)
    lo, hi = getattr(velocity, "t_range", (-np.inf, np.inf))
    if min(t0, t1) < lo - 1e-12 or max(t0, t1) > hi + 1e-12:
        raise FieldGapped(f"velocity defined on [{lo}, {hi}], requested [{min(t0, t1)}, {max(t0, t1)}]")
    h = (t1 - t0) / steps
    history = [x.copy()] if record else None
    for i in range(steps):
        t = t0 + i * h
        k1 = velocity(t, x)
        k2 = velocity(t + h / 2, x + h / 2 * k1)
        k3 = velocity(t + h / 2, x + h / 2 * k2)
        k4 = velocity(t + h, x + h * k3)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if record:
            history.append(x.copy())
    return np.stack(history) if record else x


def steps_for(t_span: tuple[float, float], dt: float) -> int:
    return max(1, int(math.ceil(abs(t_span[1] - t_span[0]) / dt - 1e-9)))


# ---------------------------------------------------------------- ensembles
@dataclass
class ParticleEnsemble:
    """Monte Carlo particles with uniform weights.

    ``volume`` is the measure of the sampled region so that each particle
    carries weight ``volume / count``.  ``in_hole`` flags particles that were
    found inside a hole at any recorded step.
    """

    positions: np.ndarray
    origin: Origin
    volume: float
    seed: int
    in_hole: np.ndarray | None = None

    @property
    def count(self) -> int:
        return len(self.positions)

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.count, self.volume / self.count)

    @classmethod
    def sample(cls, region, count: int, seed: int = 0, origin: Origin = "P0", domain: PerforatedDomain | None = None):
        """Uniform samples of ``region`` (a patch, or ``None`` for the torus), minus holes if given.

        The volume is the region volume times the accepted fraction, so hole
        removal is itself a Monte Carlo estimate.
        """
        rng = np.random.default_rng(seed)
        if region is None:
            pts, vol = rng.random((count, 3)), 1.0
            origin = "torus"
        else:
            pts, vol = region.sample(count, rng), region.volume
        if domain is not None:
            keep = domain.contains(pts)
            pts, vol = pts[keep], vol * keep.mean()
        ens = cls(pts, origin, vol, seed, np.zeros(len(pts), dtype=bool))
        if region is not None and not np.all(region.contains(pts)):
            raise AssertionError("sampled particles outside their region")
        return ens

    def advected(self, velocity: VelocitySource, t0: float, t1: float, dt: float,
                 domain: PerforatedDomain | None = None) -> "ParticleEnsemble":
        """Ensemble transported over ``[t0, t1]``; hole entries are flagged, not removed."""
        steps = steps_for((t0, t1), dt)
        flags = np.zeros(self.count, dtype=bool) if self.in_hole is None else self.in_hole.copy()
        if domain is None:
            final = advect(self.positions, velocity, (t0, t1), steps)
        else:
            hist = advect(self.positions, velocity, (t0, t1), steps, record=True)
            for x in hist[1:]:
                flags |= domain.in_hole(x)
            final = hist[-1]
        return replace(self, positions=final, in_hole=flags)

    @property
    def hole_fraction(self) -> float:
        return float(self.in_hole.mean()) if self.in_hole is not None and self.count else 0.0


# ---------------------------------------------------------------- diagnostics
@dataclass(frozen=True)
class Estimate:
    """Monte Carlo measure estimate with its 95% half-width."""

    value: float
    half_width: float
    samples: int

    @classmethod
    def from_hits(cls, hits: np.ndarray, volume: float) -> "Estimate":
        hits = np.asarray(hits, dtype=bool)
        n = len(hits)
        if n == 0:
            return cls(0.0, 0.0, 0)
        p = hits.mean()
        return cls(float(volume * p), float(Z95 * volume * np.sqrt(p * (1 - p) / n)), n)


def inverse_membership(
    velocity: VelocitySource,
    region0,
    points: np.ndarray,
    T: float,
    steps: int = 200,
    domain: PerforatedDomain | None = None,
) -> np.ndarray:
    """Whether each point lies in the time-``T`` image of ``region0`` (minus holes)."""
    x0 = advect(points, velocity, (T, 0.0), steps) if T != 0.0 else np.atleast_2d(points)
    inside = region0.contains(x0)
    if domain is not None:
        inside &= domain.contains(x0)
    return inside


@dataclass
class DefectReport:
    """Missed measure ``|P1 \\ Phi(T, P0)|`` and its decomposition terms."""

    measure_estimate: Estimate
    target_volume: float
    limit_defect: Estimate | None = None
    hole_volume: float | None = None
    discrepancy: Estimate | None = None
    exceedance: Estimate | None = None
    L2_flow_distance: float | None = None
    clearance_min: float | None = None
    eta: float | None = None
    hole_fraction: float = 0.0

    @property
    def half_width(self) -> float:
        return self.measure_estimate.half_width

    @property
    def relative(self) -> float:
        return self.measure_estimate.value / self.target_volume

    def decomposition_bound(self, widths: float = 3.0) -> float | None:
        """Limit defect + hole volume + flow discrepancy + ``widths`` half-widths of each estimate."""
        if self.limit_defect is None or self.discrepancy is None:
            return None
        hw = self.measure_estimate.half_width + self.limit_defect.half_width + self.discrepancy.half_width
        return self.limit_defect.value + (self.hole_volume or 0.0) + self.discrepancy.value + widths * hw

    def decomposition_holds(self, widths: float = 3.0) -> bool | None:
        bound = self.decomposition_bound(widths)
        return None if bound is None else bool(self.measure_estimate.value <= bound)

    def as_row(self) -> dict:
        row = {
            "defect": self.measure_estimate.value,
            "half_width": self.measure_estimate.half_width,
            "samples": self.measure_estimate.samples,
            "target_volume": self.target_volume,
            "relative": self.relative,
            "hole_fraction": self.hole_fraction,
        }
        for name in ("limit_defect", "discrepancy", "exceedance"):
            est = getattr(self, name)
            if est is not None:
                row[name] = est.value
                row[f"{name}_half_width"] = est.half_width
        for name in ("hole_volume", "L2_flow_distance", "clearance_min", "eta"):
            if getattr(self, name) is not None:
                row[name] = getattr(self, name)
        return row


def measure_defect(
    velocity: VelocitySource,
    P0,
    P1,
    T: float,
    samples: int = 100_000,
    steps: int = 200,
    domain: PerforatedDomain | None = None,
    seed: int = 0,
    limit_velocity: VelocitySource | None = None,
    eta: float = 0.01,
) -> DefectReport:
    """Monte Carlo estimate of ``|P1 \\ Phi(T, P0 minus holes)|``.

    With ``limit_velocity`` the report also carries the limit defect
    ``|P1 \\ phi_L(T, P0)|``, the total hole volume, the discrepancy measure
    ``|{x in P0 minus holes : Phi(T, x) not in phi_L(T, P0)}|`` and the
    exceedance of ``|Phi - phi_L| > eta``.  The missed set is covered by the
    union of the limit miss, the holes and the discrepancy set, which is the
    decomposition checked by :meth:`DefectReport.decomposition_holds`.
    """
    if abs(P0.volume - P1.volume) > 1e-9 * P1.volume:
        raise ValueError("defect needs equal-volume patches")
    rng = np.random.default_rng(seed)
    y = P1.sample(samples, rng)
    missed = ~inverse_membership(velocity, P0, y, T, steps, domain)
    report = DefectReport(Estimate.from_hits(missed, P1.volume), P1.volume)
    if limit_velocity is None:
        return report
    report.limit_defect = Estimate.from_hits(~inverse_membership(limit_velocity, P0, y, T, steps), P1.volume)
    report.hole_volume = float(domain.hole_volume) if domain is not None else 0.0
    ens = ParticleEnsemble.sample(P0, samples, seed + 1, "P0", domain)
    dt = abs(T) / steps if T else 1.0
    moved = ens.advected(velocity, 0.0, T, dt, domain) if T else ens
    limit = advect(ens.positions, limit_velocity, (0.0, T), steps) if T else ens.positions
    lost = ~inverse_membership(limit_velocity, P0, moved.positions, T, steps)
    report.discrepancy = Estimate.from_hits(lost, ens.volume)
    gap = np.linalg.norm(min_image(moved.positions - limit), axis=1)
    report.exceedance = Estimate.from_hits(gap > eta, ens.volume)
    report.L2_flow_distance = float(np.sqrt(ens.volume * np.mean(gap**2)))
    report.eta = eta
    report.hole_fraction = moved.hole_fraction
    return report


@dataclass
class DiscrepancyCurve:
    times: np.ndarray
    l2: np.ndarray
    l2_half_width: np.ndarray
    exceedance: list[Estimate]
    l1: np.ndarray
    eta: float


def flow_discrepancy(
    field_a: VelocitySource,
    field_b: VelocitySource,
    ensemble: ParticleEnsemble,
    T: float,
    steps: int = 200,
    eta: float = 0.01,
) -> DiscrepancyCurve:
    """L2 distance (and exceedance of ``eta``) between two flows of one ensemble over ``[0, T]``."""
    ha = advect(ensemble.positions, field_a, (0.0, T), steps, record=True)
    hb = advect(ensemble.positions, field_b, (0.0, T), steps, record=True)
    gap = np.linalg.norm(min_image(ha - hb), axis=-1)
    vol, n = ensemble.volume, ensemble.count
    sq = gap**2
    l2 = np.sqrt(vol * sq.mean(axis=1))
    sq_hw = Z95 * vol * sq.std(axis=1, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(len(gap))
    l2_hw = np.where(l2 > 0, sq_hw / (2 * np.maximum(l2, 1e-300)), np.sqrt(sq_hw))
    exc = [Estimate.from_hits(g > eta, vol) for g in gap]
    return DiscrepancyCurve(np.linspace(0.0, T, steps + 1), l2, l2_hw, exc, vol * gap.mean(axis=1), eta)


def clearance(
    velocity: VelocitySource,
    gamma0: np.ndarray,
    zone: ControlZone,
    T: float = 1.0,
    steps: int = 200,
) -> float:
    """Smallest distance from the advected boundary samples to the closed zone over ``[0, T]``."""
    hist = advect(gamma0, velocity, (0.0, T), steps, record=True) if T else np.atleast_2d(gamma0)[None]
    return float(min(zone.distance(h).min() for h in hist))


def flow_frame_map(phi_scaled: Callable[[float], np.ndarray], mode: str, eps: float,
                   alpha: float | None = None, beta: float = 1.0) -> Callable[[float], np.ndarray]:
    """Unit-frame flow from a scaled-frame flow: ``Phi(tau) = phi(tau / eps**p)``.

    ``p`` is ``beta`` (Euler) or ``alpha + 2 beta - 3`` (Darcy).
    """
    from .exponents import time_exponent

    if mode == "darcy" and alpha is None:
        raise ValueError("darcy frame map needs alpha")
    power = time_exponent(mode, alpha if alpha is not None else 0.0, beta)
    scale = eps**power
    return lambda tau: phi_scaled(tau / scale)


def rotation_velocity(axis, center, rate: float = 2 * np.pi) -> ClosedFormVelocity:
    """Rigid rotation ``rate * axis x (x - center)`` (not periodic; for local oracles)."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    center = np.asarray(center, dtype=float)
    return ClosedFormVelocity(lambda t, x: rate * np.cross(axis, x - center))
