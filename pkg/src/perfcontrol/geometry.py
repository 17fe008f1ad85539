"""Perforated unit tori, fluid patches and the control zone.

The torus is the unit cube ``[0, 1)^3`` with periodic identification.  All
point arguments are arrays of shape ``(..., 3)``; coordinates are reduced
modulo one where a periodic metric is needed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal

import numpy as np

from .errors import DomainSpecError, ExponentError, LayoutError

#: Every reference particle must fit inside the ball of this radius.
REFERENCE_BALL_RADIUS = 0.125

#: Above this many cells per side a threshold is flagged as infeasible on a desk.
DESK_SCALE_MAX_N = 64


class DeskScaleWarning(UserWarning):
    """A parameter choice implies a computation far beyond desk scale."""


def wrap(x: np.ndarray) -> np.ndarray:
    """Reduce coordinates into ``[0, 1)``."""
    return np.mod(np.asarray(x, dtype=float), 1.0)


def min_image(d: np.ndarray) -> np.ndarray:
    """Shortest periodic representative of a displacement."""
    d = np.asarray(d, dtype=float)
    return d - np.round(d)


def periodic_distance(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Distance on the unit torus between broadcastable point arrays."""
    return np.linalg.norm(min_image(np.asarray(x) - np.asarray(y)), axis=-1)


def fibonacci_sphere(n: int) -> np.ndarray:
    """Quasi-uniform unit vectors, shape ``(n, 3)``."""
    i = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n)
    azim = np.pi * (1.0 + 5.0**0.5) * i
    return np.stack(
        [np.cos(azim) * np.sin(polar), np.sin(azim) * np.sin(polar), np.cos(polar)],
        axis=1,
    )


@dataclass(frozen=True)
class ParticleShape:
    """Reference solid particle, centered at the origin.

    ``kind`` is ``"ball"`` (all radii equal) or ``"ellipsoid"`` with
    axis-aligned semi-axes ``radii``.
    """

    kind: Literal["ball", "ellipsoid"] = "ball"
    radii: tuple[float, float, float] = (0.125, 0.125, 0.125)

    def __post_init__(self) -> None:
        radii = tuple(float(r) for r in np.broadcast_to(self.radii, (3,)))
        object.__setattr__(self, "radii", radii)
        if self.kind not in ("ball", "ellipsoid"):
            raise DomainSpecError(f"unknown particle kind {self.kind!r}")
        if min(radii) <= 0:
            raise DomainSpecError("particle radii must be positive")
        if self.kind == "ball" and len(set(radii)) != 1:
            raise DomainSpecError("ball particle needs equal radii")
        if max(radii) > REFERENCE_BALL_RADIUS * (1 + 1e-12):
            raise DomainSpecError("particle must fit in the ball of radius 1/8")

    @classmethod
    def ball(cls, radius: float = REFERENCE_BALL_RADIUS) -> "ParticleShape":
        return cls("ball", (radius, radius, radius))

    @property
    def bounding_radius(self) -> float:
        return max(self.radii)

    @property
    def volume(self) -> float:
        a, b, c = self.radii
        return 4.0 / 3.0 * math.pi * a * b * c

    def scaled_norm(self, y: np.ndarray) -> np.ndarray:
        """Gauge function: < 1 inside the particle, 1 on its boundary."""
        return np.linalg.norm(np.asarray(y) / np.asarray(self.radii), axis=-1)

    def signed_distance(self, y: np.ndarray) -> np.ndarray:
        """Signed distance to the particle boundary (exact for balls).

        Ellipsoids use the gauge-scaled approximation, which has the right
        sign and zero set but is not a true distance.
        """
        y = np.asarray(y, dtype=float)
        if self.kind == "ball":
            return np.linalg.norm(y, axis=-1) - self.radii[0]
        return (self.scaled_norm(y) - 1.0) * min(self.radii)


@dataclass(frozen=True)
class DomainSpec:
    """Parameters of a perforated torus.

    ``L`` is the side of the perforated cube ``K`` (partial mode only; full
    mode fixes ``L = 1``), ``N`` the number of cells per side and ``alpha``
    the hole-size exponent.
    """

    mode: Literal["partial", "full"]
    N: int
    alpha: float
    L: float = 1.0
    shape: ParticleShape = field(default_factory=ParticleShape)
    rng_seed: int = 0
    K_origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if self.mode not in ("partial", "full"):
            raise DomainSpecError(f"unknown mode {self.mode!r}")
        if int(self.N) != self.N or self.N < 1:
            raise DomainSpecError("N must be a positive integer")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "K_origin", tuple(float(v) for v in self.K_origin))
        if self.mode == "partial":
            if not 0.0 < self.L < 1.0:
                raise DomainSpecError("partial mode needs 0 < L < 1")
            if not self.alpha > 1.5:
                raise DomainSpecError("partial mode needs alpha > 3/2")
        else:
            if self.L != 1.0:
                object.__setattr__(self, "L", 1.0)
            if any(v != 0.0 for v in self.K_origin):
                object.__setattr__(self, "K_origin", (0.0, 0.0, 0.0))
            if not 1.0 < self.alpha < 3.0:
                raise DomainSpecError("full mode needs 1 < alpha < 3")

    @property
    def epsilon(self) -> float:
        return self.L / self.N

    @property
    def hole_scale(self) -> float:
        return self.epsilon**self.alpha


@dataclass(frozen=True)
class PerforatedDomain:
    """Torus minus the lattice of holes ``x_i + eps^alpha * T``."""

    spec: DomainSpec
    centers: np.ndarray
    hole_scale: float
    K_origin: np.ndarray
    K_side: float

    @property
    def epsilon(self) -> float:
        return self.spec.epsilon

    @property
    def hole_radius(self) -> float:
        """Radius of the ball enclosing each hole."""
        return self.hole_scale * self.spec.shape.bounding_radius

    @property
    def n_holes(self) -> int:
        return len(self.centers)

    @cached_property
    def _axis_centers(self) -> np.ndarray:
        eps = self.epsilon
        offsets = eps * (np.arange(self.spec.N) + 0.5)
        return self.K_origin[:, None] + offsets[None, :]

    @property
    def hole_volume(self) -> float:
        """Total Lebesgue measure of the holes."""
        return self.n_holes * self.spec.shape.volume * self.hole_scale**3

    def nearest_center(self, x: np.ndarray) -> np.ndarray:
        """Nearest hole center under the periodic metric, per point."""
        x = wrap(x)
        out = np.empty_like(x)
        axis_centers = self._axis_centers
        for d in range(3):
            diff = min_image(x[..., d, None] - axis_centers[d])
            idx = np.argmin(np.abs(diff), axis=-1)
            out[..., d] = axis_centers[d][idx]
        return out

    def offset_to_nearest(self, x: np.ndarray) -> np.ndarray:
        """Min-image displacement from the nearest hole center to ``x``."""
        return min_image(wrap(x) - self.nearest_center(x))

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        """Positive in the fluid, negative inside holes."""
        y = self.offset_to_nearest(x) / self.hole_scale
        return self.spec.shape.signed_distance(y) * self.hole_scale

    def in_hole(self, x: np.ndarray) -> np.ndarray:
        y = self.offset_to_nearest(x) / self.hole_scale
        return self.spec.shape.scaled_norm(y) < 1.0

    def contains(self, x: np.ndarray) -> np.ndarray:
        """Membership in the fluid domain (closed holes removed)."""
        y = self.offset_to_nearest(x) / self.hole_scale
        return self.spec.shape.scaled_norm(y) > 1.0

    def in_K(self, x: np.ndarray) -> np.ndarray:
        rel = wrap(np.asarray(x) - self.K_origin)
        return np.all(rel <= self.K_side, axis=-1)

    def distance_to_K(self, x: np.ndarray) -> np.ndarray:
        """Periodic distance from points to the closed cube ``K``."""
        return box_distance(x, self.K_origin, self.K_side)


def box_distance(x: np.ndarray, origin: np.ndarray, side: float) -> np.ndarray:
    """Periodic distance from points to the closed cube ``origin + [0, side]^3``."""
    rel = wrap(np.asarray(x, dtype=float) - np.asarray(origin, dtype=float))
    gap = np.minimum(np.maximum(rel - side, 0.0), np.where(rel > side, 1.0 - rel, 0.0))
    return np.linalg.norm(gap, axis=-1)


def build_perforated_domain(spec: DomainSpec) -> PerforatedDomain:
    """Place one hole at the center of each of the ``N^3`` cells of ``K``."""
    eps = spec.epsilon
    hole_scale = spec.hole_scale
    if hole_scale * spec.shape.bounding_radius > eps / 8.0:
        raise DomainSpecError(
            f"hole radius {hole_scale * spec.shape.bounding_radius:.3g} exceeds eps/8"
        )
    origin = np.asarray(spec.K_origin, dtype=float)
    axis = eps * (np.arange(spec.N) + 0.5)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    centers = wrap(origin + grid)
    return PerforatedDomain(spec, centers, hole_scale, origin, spec.L)


def signed_distance(domain: PerforatedDomain, x: np.ndarray) -> np.ndarray:
    """Signed distance from ``x`` to the hole boundaries of ``domain``."""
    return domain.signed_distance(x)


def epsilon_threshold(eta: float, p: float, L: float = 1.0) -> float:
    """Largest admissible cell size ``L / (floor(eta^(-2/p)) + 1)``."""
    if not 0.0 < eta < 1.0:
        raise ExponentError("eta must lie in (0, 1)")
    if not p > 0.0:
        raise ExponentError("rate exponent must be positive")
    with np.errstate(over="ignore"):
        power = float(np.power(eta, -2.0 / p))
    if not math.isfinite(power):
        raise ExponentError("threshold underflows double precision")
    cells = math.floor(power) + 1
    if cells > DESK_SCALE_MAX_N:
        warnings.warn(
            f"threshold needs N = {cells} cells per side; desk-scale infeasible",
            DeskScaleWarning,
            stacklevel=2,
        )
    return L / cells


def snap_epsilon(eps: float, L: float = 1.0) -> float:
    """Largest value ``L / N`` not exceeding ``eps``."""
    if eps <= 0:
        raise DomainSpecError("eps must be positive")
    n = math.ceil(L / eps - 1e-12)
    return L / max(n, 1)


@dataclass(frozen=True)
class Patch:
    """Ball or axis-aligned ellipsoid of fluid particles on the torus."""

    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    kind: Literal["ball", "ellipsoid", "waypoint-image"] = "ball"

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", tuple(float(v) for v in wrap(self.center)))
        radii = tuple(float(r) for r in np.broadcast_to(self.radii, (3,)))
        object.__setattr__(self, "radii", radii)
        if min(radii) <= 0:
            raise LayoutError("patch radii must be positive")
        if max(radii) >= 0.5:
            raise LayoutError("patch must be smaller than half the torus")
        if self.kind == "ball" and len(set(radii)) != 1:
            raise LayoutError("ball patch needs equal radii")

    @classmethod
    def ball(cls, center, radius: float) -> "Patch":
        return cls(tuple(center), (radius, radius, radius), "ball")

    @property
    def volume(self) -> float:
        a, b, c = self.radii
        return 4.0 / 3.0 * math.pi * a * b * c

    @property
    def bounding_radius(self) -> float:
        return max(self.radii)

    def offset(self, x: np.ndarray) -> np.ndarray:
        return min_image(np.asarray(x, dtype=float) - np.asarray(self.center))

    def contains(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(self.offset(x) / np.asarray(self.radii), axis=-1) < 1.0

    def translated(self, center, kind: str = "waypoint-image") -> "Patch":
        return Patch(tuple(center), self.radii, kind)  # type: ignore[arg-type]

    def boundary_samples(self, n: int, scale: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Points on the boundary (radii enlarged by ``scale``) and outward unit normals."""
        unit = fibonacci_sphere(n)
        radii = np.asarray(self.radii) + scale
        pts = unit * radii
        normals = unit / radii
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        return np.asarray(self.center) + pts, normals

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform samples inside the patch."""
        direction = rng.standard_normal((n, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = rng.random(n) ** (1.0 / 3.0)
        return wrap(np.asarray(self.center) + direction * radius[:, None] * np.asarray(self.radii))

    def distance_lower_bound(self, x: np.ndarray) -> np.ndarray:
        """Distance from points to the patch; exact for balls."""
        r = np.linalg.norm(self.offset(x), axis=-1)
        return np.maximum(r - self.bounding_radius, 0.0)


@dataclass(frozen=True)
class ControlZone:
    """Closed ball where the forcing is allowed to act."""

    center: tuple[float, float, float]
    radius: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", tuple(float(v) for v in wrap(self.center)))
        if not 0.0 < self.radius < 0.5:
            raise LayoutError("control zone radius must lie in (0, 1/2)")

    def offset(self, x: np.ndarray) -> np.ndarray:
        return min_image(np.asarray(x, dtype=float) - np.asarray(self.center))

    def contains(self, x: np.ndarray, closed: bool = True) -> np.ndarray:
        r = np.linalg.norm(self.offset(x), axis=-1)
        return r <= self.radius if closed else r < self.radius

    def distance(self, x: np.ndarray) -> np.ndarray:
        """Periodic distance to the closed ball (zero inside)."""
        return np.maximum(np.linalg.norm(self.offset(x), axis=-1) - self.radius, 0.0)

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * math.pi * self.radius**3


def patch_zone_gap(patch: Patch, zone: ControlZone) -> float:
    """Lower bound on the distance between a patch and the control zone."""
    d = float(np.linalg.norm(min_image(np.asarray(patch.center) - np.asarray(zone.center))))
    return d - zone.radius - patch.bounding_radius


def check_layout(
    domain: PerforatedDomain, P0: Patch, P1: Patch, zone: ControlZone, rtol: float = 1e-12
) -> None:
    """Raise :class:`LayoutError` unless the experiment layout is admissible."""
    if abs(P0.volume - P1.volume) > rtol * max(P0.volume, P1.volume):
        raise LayoutError("paired patches must have equal volume")
    for name, patch in (("P0", P0), ("P1", P1)):
        if patch_zone_gap(patch, zone) <= 0.0:
            raise LayoutError(f"control zone touches {name}")
    if domain.spec.mode == "partial":
        if float(box_distance(np.asarray(zone.center), domain.K_origin, domain.K_side)) <= zone.radius:
            raise LayoutError("control zone touches the perforated cube K")
