"""Smooth time ramp and rigid-translation isotopies between patches."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import minimize_scalar

from .errors import LayoutError, PathBlocked
from .geometry import ControlZone, Patch, min_image, wrap


def ramp(t):
    """Smooth step from 0 to 1 on [0, 1], flat to all orders at both ends."""
    t = np.asarray(t, dtype=float)
    s, _, _ = _ramp_parts(t)
    return s


def ramp_rate(t):
    return _ramp_parts(np.asarray(t, dtype=float))[1]


def ramp_accel(t):
    return _ramp_parts(np.asarray(t, dtype=float))[2]


def _ramp_parts(t: np.ndarray):
    """``s = logistic(1/(1-t) - 1/t)`` with its first two derivatives."""
    # beyond |z| = 700 every quantity underflows to its end value
    inner = (t > 1.0 / 702.0) & (t < 1.0 - 1.0 / 702.0)
    tc = np.where(inner, t, 0.5)
    z = 1.0 / (1.0 - tc) - 1.0 / tc
    dz = 1.0 / (1.0 - tc) ** 2 + 1.0 / tc**2
    ddz = 2.0 / (1.0 - tc) ** 3 - 2.0 / tc**3
    s = 0.5 * (1.0 + np.tanh(0.5 * z))
    s1 = s * (1.0 - s)
    ds = s1 * dz
    dds = s1 * (1.0 - 2.0 * s) * dz**2 + s1 * ddz
    s = np.where(inner, s, np.where(t >= 0.5, 1.0, 0.0))
    ds = np.where(inner, ds, 0.0)
    dds = np.where(inner, dds, 0.0)
    return s, ds, dds


@dataclass(frozen=True)
class Isotopy:
    """Patch translated along a smooth center curve, reparameterized by :func:`ramp`.

    The center at time ``t`` is ``curve(ramp(t))`` with ``curve`` defined on
    ``[0, 1]`` in unwrapped coordinates.  Near the moving patch the transport
    field is the uniform velocity ``ramp'(t) curve'(ramp(t))``.
    """

    P0: Patch
    P1: Patch
    nodes: np.ndarray
    knots: np.ndarray
    d0: float
    zone: ControlZone | None = None
    _curve: CubicSpline | None = field(default=None, repr=False, compare=False)

    @property
    def waypoints(self) -> np.ndarray:
        return self.nodes

    def curve(self, sigma, nu: int = 0) -> np.ndarray:
        sigma = np.asarray(sigma, dtype=float)
        if self._curve is None:
            if nu == 0:
                return np.broadcast_to(self.nodes[0], sigma.shape + (3,)).copy()
            return np.zeros(sigma.shape + (3,))
        return self._curve(sigma, nu)

    def center(self, t) -> np.ndarray:
        """Patch center at time ``t`` (unwrapped)."""
        return self.curve(ramp(t))

    def velocity(self, t) -> np.ndarray:
        """Rigid transport velocity at time ``t``."""
        t = np.asarray(t, dtype=float)
        return ramp_rate(t)[..., None] * self.curve(ramp(t), 1)

    def acceleration(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        s = ramp(t)
        return ramp_accel(t)[..., None] * self.curve(s, 1) + ramp_rate(t)[..., None] ** 2 * self.curve(s, 2)

    def patch_at(self, t: float) -> Patch:
        return self.P0.translated(wrap(self.center(t)))

    def transport_field(self, t: float, x: np.ndarray) -> np.ndarray:
        """``X(t, x)`` near the patch: a uniform translation."""
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.velocity(t), x.shape).copy()

    def displacement(self) -> np.ndarray:
        return self.nodes[-1] - self.nodes[0]

    def clearance(self, sigma) -> np.ndarray:
        """Distance from the patch at curve parameter ``sigma`` to the closed zone."""
        if self.zone is None:
            return np.full(np.shape(sigma), np.inf)
        c = self.curve(sigma)
        gap = np.linalg.norm(min_image(c - np.asarray(self.zone.center)), axis=-1)
        return gap - self.zone.radius - self.P0.bounding_radius


def _unwrap_path(points: list[np.ndarray]) -> np.ndarray:
    out = [np.asarray(points[0], dtype=float)]
    for p in points[1:]:
        out.append(out[-1] + min_image(np.asarray(p, dtype=float) - out[-1]))
    return np.array(out)


def _make_curve(nodes: np.ndarray) -> tuple[CubicSpline | None, np.ndarray]:
    seg = np.linalg.norm(np.diff(nodes, axis=0), axis=1)
    if seg.sum() == 0.0:
        return None, np.linspace(0.0, 1.0, len(nodes))
    knots = np.concatenate([[0.0], np.cumsum(seg)]) / seg.sum()
    bc = "natural" if len(nodes) > 2 else "not-a-knot"
    if len(nodes) == 2:
        nodes = np.vstack([nodes[0], 0.5 * (nodes[0] + nodes[1]), nodes[1]])
        knots = np.array([0.0, 0.5, 1.0])
    return CubicSpline(knots, nodes, bc_type=bc), knots


def _minimum_clearance(iso: Isotopy, samples: int) -> float:
    sig = np.linspace(0.0, 1.0, samples)
    vals = iso.clearance(sig)
    i = int(np.argmin(vals))
    best = float(vals[i])
    lo, hi = sig[max(i - 1, 0)], sig[min(i + 1, samples - 1)]
    if hi > lo:
        res = minimize_scalar(lambda s: float(iso.clearance(s)), bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-12})
        best = min(best, float(res.fun))
    return best


def _build(P0, P1, nodes, zone, samples):
    curve, knots = _make_curve(nodes)
    iso = Isotopy(P0, P1, nodes, knots, np.inf, zone, curve)
    d0 = _minimum_clearance(iso, samples) if zone is not None else np.inf
    return Isotopy(P0, P1, nodes, knots, d0, zone, curve)


def build_isotopy(
    P0: Patch,
    P1: Patch,
    waypoints: list | None = None,
    zone: ControlZone | None = None,
    samples: int = 2001,
) -> Isotopy:
    """Rigid-translation isotopy from ``P0`` to ``P1`` avoiding the control zone.

    Without waypoints the straight path is tried first, then single-waypoint
    detours on either side of the zone.  ``PathBlocked`` is raised if none of
    them keeps a positive distance from the closed zone.
    """
    if abs(P0.volume - P1.volume) > 1e-12 * P0.volume or P0.radii != P1.radii:
        raise LayoutError("isotopy endpoints must be congruent patches")
    start = np.asarray(P0.center)
    end = start + min_image(np.asarray(P1.center) - start)
    if waypoints is not None:
        iso = _build(P0, P1, _unwrap_path([start, *waypoints, end]), zone, samples)
        if iso.d0 <= 0:
            raise PathBlocked(f"supplied path meets the control zone (clearance {iso.d0:.4g})")
        return iso
    candidates = [np.array([start, end])]
    if zone is not None:
        zc = start + min_image(np.asarray(zone.center) - start)
        axis = end - start
        length = np.linalg.norm(axis)
        if length > 0:
            axis = axis / length
            perp = (zc - start) - np.dot(zc - start, axis) * axis
            if np.linalg.norm(perp) < 1e-12:
                perp = np.cross(axis, [0.0, 0.0, 1.0])
                if np.linalg.norm(perp) < 1e-12:
                    perp = np.cross(axis, [0.0, 1.0, 0.0])
            perp /= np.linalg.norm(perp)
            mid = 0.5 * (start + end)
            reach = zone.radius + 2 * P0.bounding_radius
            for side in (-1.0, 1.0):
                for extra in (1.0, 1.5, 2.0):
                    candidates.append(np.array([start, mid + side * extra * reach * perp, end]))
    best = None
    for nodes in candidates:
        iso = _build(P0, P1, nodes, zone, samples)
        if iso.d0 > 0:
            return iso
        best = iso if best is None or iso.d0 > best.d0 else best
    raise PathBlocked(
        f"no candidate path avoids the control zone (best clearance {best.d0:.4g}); supply waypoints"
    )
