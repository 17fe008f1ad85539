"""Charge-sum potentials with prescribed normal flux and their time assembly."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import CoveringGap, FitResidualTooLarge, LayoutError, SolvabilityViolation
from .geometry import ControlZone, Patch, fibonacci_sphere, min_image
from .greens import EllipticOperator, FieldValues, PeriodicGreen
from .isotopy import Isotopy, ramp, ramp_accel, ramp_rate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChargeLayout:
    """Blob charges on a sphere concentric with the control zone."""

    points: np.ndarray
    blob_radius: float
    op: EllipticOperator
    zone: ControlZone

    @classmethod
    def on_sphere(
        cls,
        zone: ControlZone,
        count: int,
        radius_fraction: float = 0.6,
        op: EllipticOperator | None = None,
        blob_fraction: float = 0.9,
    ) -> "ChargeLayout":
        """``count`` charges at ``radius_fraction * R``; blobs fill ``blob_fraction`` of the remaining gap."""
        op = op or EllipticOperator.laplace()
        if not 0.0 < radius_fraction <= 0.9:
            raise LayoutError("charges must sit at least 0.1 R inside the control zone")
        gap = (1.0 - radius_fraction) * zone.radius * blob_fraction
        blob = gap * np.sqrt(op.eig_A[0])
        pts = np.asarray(zone.center) + radius_fraction * zone.radius * fibonacci_sphere(count)
        return cls(pts, blob, op, zone)

    @property
    def count(self) -> int:
        return len(self.points)

    @cached_property
    def green(self) -> PeriodicGreen:
        return PeriodicGreen(self.op, self.blob_radius)

    def check(self) -> None:
        d = np.linalg.norm(min_image(self.points - np.asarray(self.zone.center)), axis=1)
        if np.any(d > 0.9 * self.zone.radius * (1 + 1e-12)):
            raise LayoutError("charges must sit at least 0.1 R inside the control zone")
        if np.any(d + self.op.blob_extent(self.blob_radius) > self.zone.radius * (1 + 1e-12)):
            raise LayoutError("charge blobs must lie inside the control zone")


@dataclass
class PotentialSnapshot:
    """Fitted charge weights for one knot of the isotopy."""

    knot: float
    weights: np.ndarray
    layout: ChargeLayout
    residual: float
    tolerance: float
    data_scale: float

    @property
    def knot_time(self) -> float:
        """Physical time at which the ramp reaches this knot."""
        return float(inverse_ramp(self.knot))

    @property
    def charge_points(self) -> np.ndarray:
        return self.layout.points

    @property
    def operator(self) -> EllipticOperator:
        return self.layout.op

    def field(self, x: np.ndarray, order: int = 1) -> FieldValues:
        return self.layout.green.evaluate(x, self.layout.points, self.weights, order)


def inverse_ramp(s: float) -> float:
    """Time at which :func:`ramp` equals ``s``."""
    if s <= 0:
        return 0.0
    if s >= 1:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if ramp(mid) < s:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _constrained_basis(m: int) -> np.ndarray:
    """Orthonormal basis of the zero-sum subspace of R^m."""
    basis = np.eye(m)[:, :-1] - np.eye(m)[:, -1:]
    q, _ = np.linalg.qr(basis)
    return q


def surface_weights(patch: Patch, unit: np.ndarray, scale: float = 0.0) -> np.ndarray:
    """Relative area weights of boundary samples mapped from the unit sphere."""
    radii = np.asarray(patch.radii) + scale
    w = np.prod(radii) * np.linalg.norm(unit / radii, axis=1)
    return w / w.sum()


def fit_potential_snapshot(
    boundary: np.ndarray,
    normals: np.ndarray,
    normal_data: np.ndarray,
    layout: ChargeLayout,
    regularization: float = 1e-8,
    tol: float = 1e-3,
    area_weights: np.ndarray | None = None,
    knot: float = 0.0,
    raise_on_residual: bool = True,
) -> PotentialSnapshot:
    """Least-squares charge weights whose normal flux matches ``normal_data``.

    The flux is ``normal . A^-1 grad psi``; the Laplacian case has ``A = I``.
    Total charge is constrained to zero, so the ``-1`` background of the
    periodic Green's function drops out.  ``regularization`` is a Tikhonov
    parameter relative to the square of the largest singular value, and
    ``tol`` bounds the max-norm residual relative to ``max |normal_data|``.
    """
    layout.check()
    b = np.asarray(normal_data, dtype=float).copy()
    wts = np.full(len(b), 1.0 / len(b)) if area_weights is None else np.asarray(area_weights) / np.sum(area_weights)
    b -= float(wts @ b)
    scale = float(np.abs(b).max()) if len(b) else 0.0
    if abs(float(wts @ b)) > 1e-10 * max(scale, 1.0):
        raise SolvabilityViolation("normal data keeps a nonzero mean after projection")
    M = layout.count
    if scale == 0.0:
        return PotentialSnapshot(knot, np.zeros(M), layout, 0.0, 0.0, 0.0)
    D = layout.green.normal_flux_matrix(boundary, normals, layout.points)
    Z = _constrained_basis(M)
    U, s, Vt = np.linalg.svd(D @ Z, full_matrices=False)
    lam = regularization * s[0] ** 2
    z = Vt.T @ ((s / (s**2 + lam)) * (U.T @ b))
    q = Z @ z
    q -= q.mean()
    residual = float(np.abs(D @ q - b).max())
    snap = PotentialSnapshot(knot, q, layout, residual, tol * scale, scale)
    if raise_on_residual and residual > tol * scale:
        raise FitResidualTooLarge(f"Neumann residual {residual:.3e} exceeds {tol * scale:.3e}")
    return snap


def fit_isotopy_snapshot(
    iso: Isotopy,
    knot: float,
    layout: ChargeLayout,
    tube_margin: float = 0.05,
    collocation: int | None = None,
    **fit_kwargs,
) -> PotentialSnapshot:
    """Fit the snapshot at curve parameter ``knot`` with unit-rate transport data."""
    patch = iso.P0.translated(iso.curve(knot))
    n = collocation or max(3 * layout.count, 600)
    unit = fibonacci_sphere(n)
    pts, normals = patch.boundary_samples(n, tube_margin)
    velocity = iso.curve(knot, 1) if iso._curve is not None else np.zeros(3)
    data = normals @ velocity
    return fit_potential_snapshot(
        pts, normals, data, layout, area_weights=surface_weights(patch, unit, tube_margin), knot=knot, **fit_kwargs
    )


@dataclass
class Partition:
    """Smooth partition of unity on [0, 1] built from compact bumps at the knots."""

    knots: np.ndarray
    half_widths: np.ndarray

    @classmethod
    def uniform(cls, count: int, overlap: float = 0.25) -> "Partition":
        knots = (np.arange(count) + 0.5) / count
        return cls.from_knots(knots, overlap)

    @classmethod
    def from_knots(cls, knots, overlap: float = 0.25) -> "Partition":
        knots = np.sort(np.asarray(knots, dtype=float))
        if len(knots) == 1:
            half = np.array([0.5 + overlap + max(knots[0], 1 - knots[0])])
        else:
            gaps = np.diff(knots)
            left = np.concatenate([[2 * knots[0]], gaps])
            right = np.concatenate([gaps, [2 * (1 - knots[-1])]])
            half = np.maximum(left, right) * (0.5 + overlap)
        part = cls(knots, half)
        part.check_covering()
        return part

    def check_covering(self, samples: int = 4001) -> None:
        lo = self.knots - self.half_widths
        hi = self.knots + self.half_widths
        order = np.argsort(lo)
        reach = 0.0
        if lo[order[0]] >= 0.0:
            raise CoveringGap("knot supports do not reach 0")
        for i in order:
            if lo[i] >= reach:
                raise CoveringGap(f"gap in knot covering near {reach:.4f}")
            reach = max(reach, hi[i])
        if reach <= 1.0:
            raise CoveringGap("knot supports do not reach 1")

    def _bumps(self, s: np.ndarray):
        u = (np.asarray(s, dtype=float)[..., None] - self.knots) / self.half_widths
        inside = np.abs(u) < 1
        uc = np.where(inside, u, 0.0)
        denom = 1 - uc**2
        b = np.where(inside, np.exp(-1.0 / denom), 0.0)
        db = np.where(inside, b * (-2 * uc / denom**2) / self.half_widths, 0.0)
        return b, db

    def weights(self, s) -> np.ndarray:
        b, _ = self._bumps(s)
        return b / b.sum(axis=-1, keepdims=True)

    def weights_and_rates(self, s):
        b, db = self._bumps(s)
        total = b.sum(axis=-1, keepdims=True)
        dtotal = db.sum(axis=-1, keepdims=True)
        return b / total, (db * total - b * dtotal) / total**2


@dataclass
class PotentialControl:
    """``theta(t, x) = ramp'(t) sum_i chi_i(ramp(t)) psi_i(x)``.

    Since every snapshot uses the same charge layout, ``theta(t, .)`` is a
    single charge sum with weights :meth:`charge_weights`.
    """

    snapshots: list[PotentialSnapshot]
    partition: Partition
    layout: ChargeLayout
    meta: dict = field(default_factory=dict)

    @property
    def operator(self) -> EllipticOperator:
        return self.layout.op

    @cached_property
    def weight_matrix(self) -> np.ndarray:
        return np.array([s.weights for s in self.snapshots])

    def coefficients(self, t):
        """Snapshot coefficients of theta and of its time derivative at ``t``."""
        t = np.asarray(t, dtype=float)
        s, ds, dds = ramp(t), ramp_rate(t), ramp_accel(t)
        chi, dchi = self.partition.weights_and_rates(s)
        c = ds[..., None] * chi
        dc = dds[..., None] * chi + (ds**2)[..., None] * dchi
        return c, dc

    def charge_weights(self, t) -> tuple[np.ndarray, np.ndarray]:
        c, dc = self.coefficients(t)
        return c @ self.weight_matrix, dc @ self.weight_matrix

    def field(self, t: float, x: np.ndarray, order: int = 1) -> FieldValues:
        q, _ = self.charge_weights(t)
        return self.layout.green.evaluate(x, self.layout.points, q, order)

    def theta(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.field(t, x, 0).potential

    def grad_theta(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.field(t, x, 1).gradient

    def dt_theta(self, t: float, x: np.ndarray) -> np.ndarray:
        _, dq = self.charge_weights(t)
        return self.layout.green.evaluate(x, self.layout.points, dq, 0).potential

    def grad_theta_sq(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.sum(self.grad_theta(t, x) ** 2, axis=-1)

    def flux(self, t: float, x: np.ndarray) -> np.ndarray:
        """``A^-1 grad theta`` (equal to the gradient in Laplace mode)."""
        return self.operator.flux(self.grad_theta(t, x))

    def max_residual(self) -> float:
        return max((s.residual / s.data_scale if s.data_scale else 0.0) for s in self.snapshots)


def assemble_theta(
    snapshots: list[PotentialSnapshot],
    knots=None,
    overlap: float = 0.25,
) -> PotentialControl:
    """Glue snapshots with a smooth partition of unity in the ramp parameter."""
    if not snapshots:
        raise CoveringGap("at least one snapshot is required")
    layout = snapshots[0].layout
    for s in snapshots[1:]:
        if s.layout is not layout and not np.array_equal(s.layout.points, layout.points):
            raise ValueError("snapshots must share one charge layout")
    knots = np.array([s.knot for s in snapshots]) if knots is None else np.asarray(knots, dtype=float)
    order = np.argsort(knots)
    part = Partition.from_knots(knots[order], overlap)
    return PotentialControl([snapshots[i] for i in order], part, layout)


def synthesize_theta(
    iso: Isotopy,
    layout: ChargeLayout,
    knot_count: int = 8,
    overlap: float = 0.25,
    tube_margin: float = 0.05,
    **fit_kwargs,
) -> PotentialControl:
    """Fit snapshots at uniform knots along the isotopy and assemble them."""
    part = Partition.uniform(knot_count, overlap)
    snaps = [fit_isotopy_snapshot(iso, float(k), layout, tube_margin, **fit_kwargs) for k in part.knots]
    control = assemble_theta(snaps, part.knots, overlap)
    control.meta.update({"tube_margin": tube_margin, "knot_count": knot_count})
    log.info("fitted %d snapshots, worst relative residual %.3e", knot_count, control.max_residual())
    return control
