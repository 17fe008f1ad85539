"""Resistance matrices of reference particles and three-layer cell correctors.

The exterior Stokes problem for a translating particle is solved either in
closed form (balls) or numerically in a periodic box.  Cell correctors glue
the rescaled exterior solution near each hole to the identity away from it
through an annulus layer; every piece is an exact Stokes solution of the
``l = 1`` family, so the corrector is divergence free region by region and
continuous across the interfaces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence, Union

import numpy as np
import scipy.linalg

from .errors import (
    BoxTooSmall,
    DomainSpecError,
    LengthscaleOutOfRange,
    NonSPDMatrix,
    SolverDiverged,
)
from .geometry import ParticleShape, PerforatedDomain

Method = Literal["analytic_ball", "numeric_exterior"]
ShapeLike = Union[ParticleShape, float, Sequence[float]]

# leading periodic-image mobility shift for a cubic lattice: 2.8373 / (6 pi L)
_IMAGE_CONSTANT = 2.837297


@dataclass(frozen=True)
class ResistanceMatrix:
    """Drag tensor of a reference particle (unit viscosity, unit speed)."""

    entries: np.ndarray
    particle_shape: str
    radii: tuple[float, float, float]
    method: str
    error_bar: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        R = np.array(self.entries, dtype=float)
        if R.shape != (3, 3) or not np.all(np.isfinite(R)):
            raise NonSPDMatrix("resistance matrix must be a finite 3x3 array")
        if np.max(np.abs(R - R.T)) > 1e-8:
            raise NonSPDMatrix("resistance matrix is not symmetric")
        R = 0.5 * (R + R.T)
        if np.linalg.eigvalsh(R).min() <= 0.0:
            raise NonSPDMatrix("resistance matrix is not positive definite")
        R.setflags(write=False)
        object.__setattr__(self, "entries", R)

    def __array__(self, dtype=None, copy=None):
        return np.array(self.entries, dtype=dtype)

    def scaled(self, factor: float) -> "ResistanceMatrix":
        """Drag of the particle dilated by ``factor`` (Stokes drag is linear in size)."""
        return ResistanceMatrix(
            self.entries * factor,
            self.particle_shape,
            tuple(r * factor for r in self.radii),
            self.method,
            self.error_bar * factor,
            dict(self.meta),
        )


def _shape_radii(shape: ShapeLike) -> tuple[str, tuple[float, float, float]]:
    if isinstance(shape, ParticleShape):
        return shape.kind, shape.radii
    radii = tuple(float(r) for r in np.broadcast_to(np.asarray(shape, dtype=float), (3,)))
    if min(radii) <= 0.0:
        raise DomainSpecError("particle radii must be positive")
    kind = "ball" if len(set(radii)) == 1 else "ellipsoid"
    return kind, radii


def stokes_drag_ball(radius: float) -> float:
    """Drag coefficient ``6 pi a`` of a ball of radius ``a``."""
    return 6.0 * math.pi * radius


def hasimoto_factor(volume_fraction: float) -> float:
    """Drag reduction of a simple cubic array of balls relative to one ball."""
    c = volume_fraction
    return 1.0 - 1.7601 * c ** (1.0 / 3.0) + c - 1.5593 * c**2


def _periodic_green(n: int, h: float) -> np.ndarray:
    """Velocity response on the grid to a unit point force at node 0.

    Returns the symmetric tensor ``G[i, j]`` of shape ``(3, 3, n, n, n)``
    built from the projected inverse Laplacian with the mean mode removed.
    """
    k = 2.0 * np.pi * np.fft.fftfreq(n, h)
    kr = 2.0 * np.pi * np.fft.rfftfreq(n, h)
    K = np.meshgrid(k, k, kr, indexing="ij")
    k2 = K[0] ** 2 + K[1] ** 2 + K[2] ** 2
    k2[0, 0, 0] = 1.0
    G = np.empty((3, 3, n, n, n))
    for i in range(3):
        for j in range(i, 3):
            sym = (float(i == j) - K[i] * K[j] / k2) / k2
            sym[0, 0, 0] = 0.0
            G[i, j] = np.fft.irfftn(sym, s=(n, n, n), axes=(0, 1, 2)) / h**3
            G[j, i] = G[i, j]
    return G


def _periodic_drag(
    radii: np.ndarray, n: int, box: float, penalization: float, max_unknowns: int
) -> tuple[np.ndarray, int]:
    """Raw drag tensor of the particle in a periodic box (no image correction).

    The unknowns are point forces at the grid nodes inside the particle; the
    rigid-motion condition ``u = e_k`` there is the vanishing-``kappa`` limit
    of Brinkman penalization, and a finite ``kappa`` enters as the diagonal
    shift ``kappa / h^3``.  The dense system is translation invariant, so it is
    assembled from one Green's tensor and solved by Cholesky for all three
    directions at once.
    """
    h = box / n
    ii = np.arange(n) - n // 2
    nodes = np.stack(np.meshgrid(ii, ii, ii, indexing="ij"), axis=-1).reshape(-1, 3)
    inside = nodes[np.linalg.norm(nodes * h / radii, axis=1) < 1.0]
    m = len(inside)
    if m == 0:
        raise SolverDiverged("grid too coarse: no nodes inside the particle")
    if 3 * m > max_unknowns:
        raise SolverDiverged(f"{3 * m} unknowns exceed max_unknowns={max_unknowns}")
    G = _periodic_green(n, h).reshape(3, 3, -1)
    diff = np.mod(inside[:, None, :] - inside[None, :, :], n)
    flat = (diff[..., 0] * n + diff[..., 1]) * n + diff[..., 2]
    del diff
    M = np.empty((3, m, 3, m))
    for i in range(3):
        for j in range(3):
            M[i, :, j, :] = G[i, j][flat]
    del flat, G
    M = M.reshape(3 * m, 3 * m)
    if penalization > 0.0:
        M[np.diag_indices_from(M)] += penalization / h**3
    rhs = np.zeros((3, m, 3))
    for k in range(3):
        rhs[k, :, k] = 1.0
    try:
        chol = scipy.linalg.cho_factor(M, overwrite_a=True)
        forces = scipy.linalg.cho_solve(chol, rhs.reshape(3 * m, 3))
    except np.linalg.LinAlgError as exc:
        raise SolverDiverged(f"exterior Stokes system is not positive definite: {exc}")
    if not np.all(np.isfinite(forces)):
        raise SolverDiverged("non-finite forces in exterior Stokes solve")
    R = forces.reshape(3, m, 3).sum(axis=1)
    return R, m


def _image_corrected(R: np.ndarray, kind: str, radii: np.ndarray, box: float) -> np.ndarray:
    if kind == "ball":
        c = 4.0 / 3.0 * math.pi * radii[0] ** 3 / box**3
        return R * hasimoto_factor(c)
    mobility = np.linalg.inv(R) + _IMAGE_CONSTANT / (6.0 * math.pi * box) * np.eye(3)
    return np.linalg.inv(mobility)


def resistance_matrix(
    shape: ShapeLike = ParticleShape(),
    method: Method = "analytic_ball",
    *,
    grid: int = 128,
    box: float = 16.0,
    penalization: float = 0.0,
    box_ratio: float = 0.75,
    max_unknowns: int = 15000,
) -> ResistanceMatrix:
    """Resistance matrix of a reference particle.

    ``shape`` is a :class:`ParticleShape`, a ball radius or three semi-axes.
    ``numeric_exterior`` works on the particle rescaled to unit bounding
    radius, so ``box`` is measured in those units; the result is scaled back
    linearly.  The error bar is the larger of the changes under shrinking
    the box by ``box_ratio`` at fixed spacing and under halving the grid.
    """
    kind, radii = _shape_radii(shape)
    if method == "analytic_ball":
        if kind != "ball":
            raise DomainSpecError("analytic resistance is only available for balls")
        return ResistanceMatrix(
            stokes_drag_ball(radii[0]) * np.eye(3), kind, radii, method, 0.0, {}
        )
    if method != "numeric_exterior":
        raise ValueError(f"unknown method {method!r}")
    if box < 16.0:
        raise BoxTooSmall("box side must be at least 16 particle radii")
    scale = max(radii)
    unit = np.asarray(radii) / scale

    def corrected(n: int, side: float) -> tuple[np.ndarray, int]:
        raw, m = _periodic_drag(unit, n, side, penalization, max_unknowns)
        return _image_corrected(raw, kind, unit, side), m

    R, m = corrected(grid, box)
    small_n = int(round(grid * box_ratio))
    R_small, _ = corrected(small_n, box * small_n / grid)
    R_coarse, _ = corrected(grid // 2, box)
    box_change = np.max(np.abs(R - R_small)) / np.max(np.abs(R))
    if box_change > 0.10:
        raise BoxTooSmall(f"drag changes by {box_change:.1%} between box sizes")
    error_bar = max(np.max(np.abs(R - R_small)), np.max(np.abs(R - R_coarse)))
    meta = {
        "grid": grid,
        "box": box * scale,
        "truncation_radius": box * scale / 2.0,
        "penalization": penalization,
        "unknowns": 3 * m,
        "box_change": float(box_change),
        "asymmetry": float(np.max(np.abs(R - R.T)) * scale),
    }
    return ResistanceMatrix(
        0.5 * (R + R.T) * scale, kind, radii, method, float(error_bar * scale), meta
    )


# -- l = 1 Stokes solutions written as u = f(r) e + g(r) (e.n) n, p = P(r) (e.n)

def _l1_profiles(r: np.ndarray) -> tuple[np.ndarray, ...]:
    """Profiles ``f, g, P`` and derivatives ``f', g'`` of the four ``l = 1`` solutions.

    Columns: uniform flow, Stokeslet, potential dipole, growing mode.
    Each array has shape ``r.shape + (4,)``.
    """
    r = np.asarray(r, dtype=float)[..., None]
    one, zero = np.ones_like(r), np.zeros_like(r)
    f = np.concatenate([one, 1 / r, r**-3, r**2 / 5], axis=-1)
    g = np.concatenate([zero, 1 / r, -3 * r**-3, -(r**2) / 10], axis=-1)
    P = np.concatenate([zero, 2 / r**2, zero, r], axis=-1)
    df = np.concatenate([zero, -(r**-2), -3 * r**-4, 2 * r / 5], axis=-1)
    dg = np.concatenate([zero, -(r**-2), 9 * r**-4, -r / 5], axis=-1)
    return f, g, P, df, dg


def _radial_fields(
    offset: np.ndarray, coef: np.ndarray, length: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Evaluate ``sum_s coef[s] * solution_s`` at ``offset / length``.

    Returns velocity ``W[..., i, k]`` (component ``i`` for direction ``e_k``),
    gradient ``D[..., i, k, j] = d_j W_ik`` and pressure ``Q[..., k]``, in the
    unscaled variable, so derivatives carry ``1 / length``.
    """
    y = offset / length
    r = np.linalg.norm(y, axis=-1)
    nvec = y / r[..., None]
    f, g, P, df, dg = (a @ coef for a in _l1_profiles(r))
    eye = np.eye(3)
    nn = nvec[..., :, None] * nvec[..., None, :]
    W = f[..., None, None] * eye + g[..., None, None] * nn
    Q = (P[..., None] * nvec) / length
    # d_j n_i = (delta_ij - n_i n_j) / r
    dn = (eye - nn) / r[..., None, None]
    D = (
        df[..., None, None, None] * eye[:, :, None] * nvec[..., None, None, :]
        + dg[..., None, None, None] * nn[..., :, :, None] * nvec[..., None, None, :]
        + g[..., None, None, None]
        * (dn[..., None, :, :] * nvec[..., :, None, None] + nvec[..., None, :, None] * dn[..., :, None, :])
    ) / length
    return W, D, Q


def translating_ball_coefficients(radius: float) -> np.ndarray:
    """Coefficients of the decaying flow equal to ``e_k`` on the sphere of ``radius``."""
    return np.array([0.0, 0.75 * radius, 0.25 * radius**3, 0.0])


def exterior_ball_solution(y: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Velocity ``w[..., i, k]`` and pressure ``q[..., k]`` of the translating ball."""
    W, _, Q = _radial_fields(np.asarray(y, dtype=float), translating_ball_coefficients(radius), 1.0)
    return W, Q


def annulus_coefficients(inner: float, outer: float, f_in: float, g_in: float) -> np.ndarray:
    """``l = 1`` combination with ``(f, g) = (f_in, g_in)`` at ``inner`` and ``(1, 0)`` at ``outer``."""
    rows = []
    for r in (inner, outer):
        f, g, *_ = _l1_profiles(np.array(r))
        rows.extend([f, g])
    return np.linalg.solve(np.array(rows), np.array([f_in, g_in, 1.0, 0.0]))


@dataclass(frozen=True)
class ReferenceAnnulus:
    """Solutions on the annulus ``1/4 < r < 1/2``, reused for every cell by scaling.

    ``unit_inner_f`` and ``unit_inner_g`` carry the inner data ``(1, 0)`` and
    ``(0, 1)`` with zero outer data; ``identity`` carries zero inner data and
    ``(1, 0)`` outside.
    """

    unit_inner_f: np.ndarray
    unit_inner_g: np.ndarray
    identity: np.ndarray

    @classmethod
    def solve(cls) -> "ReferenceAnnulus":
        lhs = []
        for r in (0.25, 0.5):
            f, g, *_ = _l1_profiles(np.array(r))
            lhs.extend([f, g])
        sols = np.linalg.solve(np.array(lhs), np.eye(4)[:, :3])
        return cls(sols[:, 0].copy(), sols[:, 1].copy(), sols[:, 2].copy())

    def coefficients(self, f_in: float, g_in: float) -> np.ndarray:
        return f_in * self.unit_inner_f + g_in * self.unit_inner_g + self.identity


def default_eta(eps: float, beta: float = 1.0) -> float:
    """Intermediate lengthscale ``eps^(max(beta, 1) + 0.1)``."""
    return eps ** (max(beta, 1.0) + 0.1)


@dataclass(frozen=True)
class CorrectorField:
    """Cell correctors ``w^eps`` (3x3 per point) and ``q^eps`` (3 per point).

    Regions around each hole center, by distance ``r``: hole, inner layer
    ``r < eta/4`` (rescaled exterior solution), annulus ``eta/4 <= r < eta/2``
    and the identity region beyond; outside ``K`` the corrector is the
    identity.
    """

    domain: PerforatedDomain
    eta: float
    particle_radius: float
    inner_coefficients: np.ndarray
    annulus: ReferenceAnnulus
    annulus_coefficients: np.ndarray

    @property
    def hole_scale(self) -> float:
        return self.domain.hole_scale

    def _split(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        offset = self.domain.offset_to_nearest(x)
        r = np.linalg.norm(offset, axis=-1)
        inK = self.domain.in_K(x)
        a = self.particle_radius * self.hole_scale
        hole = inK & (r <= a)
        inner = inK & (r > a) & (r < self.eta / 4)
        ann = inK & (r >= self.eta / 4) & (r < self.eta / 2)
        return offset, r, hole, inner, ann

    def region(self, x: np.ndarray) -> np.ndarray:
        """Region labels: 0 hole, 1 inner layer, 2 annulus, 3 identity region."""
        _, _, hole, inner, ann = self._split(x)
        lab = np.full(hole.shape, 3, dtype=np.int8)
        lab[hole], lab[inner], lab[ann] = 0, 1, 2
        return lab

    def evaluate(self, x: np.ndarray, gradient: bool = False):
        """Return ``(w, q)`` or ``(w, q, grad_w)`` at points ``x`` of shape ``(..., 3)``.

        ``w[..., i, k]`` is component ``i`` of the ``k``-th corrector,
        ``grad_w[..., i, k, j]`` its derivative along ``x_j``.
        """
        offset, r, hole, inner, ann = self._split(x)
        shape = r.shape
        w = np.broadcast_to(np.eye(3), shape + (3, 3)).copy()
        q = np.zeros(shape + (3,))
        dw = np.zeros(shape + (3, 3, 3))
        w[hole] = 0.0
        if np.any(inner):
            W, D, Q = _radial_fields(offset[inner], self.inner_coefficients, self.hole_scale)
            w[inner] = np.eye(3) - W
            q[inner] = -Q
            dw[inner] = -D
        if np.any(ann):
            W, D, Q = _radial_fields(offset[ann], self.annulus_coefficients, self.eta)
            w[ann], q[ann], dw[ann] = W, Q, D
        return (w, q, dw) if gradient else (w, q)

    def exterior_reference(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Reference exterior solution in the hole variable ``y``."""
        return exterior_ball_solution(y, self.particle_radius)


def build_corrector(domain: PerforatedDomain, eta_eps: float | None = None) -> CorrectorField:
    """Assemble the cell correctors of a perforated domain with a ball particle."""
    shape = domain.spec.shape
    if shape.kind != "ball":
        raise DomainSpecError("analytic correctors need a ball particle")
    eps = domain.epsilon
    eta = default_eta(eps) if eta_eps is None else float(eta_eps)
    lo = domain.hole_scale
    if not lo <= eta <= eps:
        raise LengthscaleOutOfRange(f"eta={eta:.4g} outside [{lo:.4g}, {eps:.4g}]")
    a = shape.radii[0]
    inner = translating_ball_coefficients(a)
    # inner-layer value e - w(y) at r = eta/4, written as (f, g)
    y_edge = eta / 4 / domain.hole_scale
    f, g, *_ = _l1_profiles(np.array(y_edge))
    ref = ReferenceAnnulus.solve()
    coef = ref.coefficients(1.0 - float(f @ inner), -float(g @ inner))
    return CorrectorField(domain, eta, a, inner, ref, coef)


@dataclass(frozen=True)
class BoundsReport:
    """Empirical constants of the pointwise corrector estimates."""

    eps: float
    alpha: float
    eta: float
    samples: int
    identity_gap: float
    gradient: float
    pressure: float
    sup_combination: float
    near_field: float
    outside_K_exact: bool

    def as_row(self) -> dict:
        return dict(self.__dict__)


def corrector_bounds_report(
    corr: CorrectorField, samples: int = 20000, seed: int = 0
) -> BoundsReport:
    """Monte Carlo maxima of the scaled corrector bounds over the two inner layers.

    Radii are drawn log-uniformly between the hole boundary and ``eta/2``
    around randomly chosen hole centers.
    """
    rng = np.random.default_rng(seed)
    dom = corr.domain
    s = corr.hole_scale
    a = corr.particle_radius * s
    r = np.exp(rng.uniform(np.log(a * (1 + 1e-9)), np.log(corr.eta / 2), samples))
    d = rng.normal(size=(samples, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    centers = dom.centers[rng.integers(0, dom.n_holes, samples)]
    x = centers + r[:, None] * d
    w, q, dw = corr.evaluate(x, gradient=True)
    gap = np.linalg.norm(np.eye(3) - w, ord=2, axis=(-2, -1))
    grad = np.linalg.norm(dw.reshape(samples, 3, 9), ord=2, axis=(-2, -1))
    qn = np.linalg.norm(q, axis=-1)
    sup = np.max(np.linalg.norm(w, ord=2, axis=(-2, -1))) + s * (grad.max() + qn.max())

    near = centers[:1] + np.array([[s, 0.0, 0.0]])
    w_near, _ = corr.evaluate(near)
    near_gap = float(np.linalg.norm(np.eye(3) - w_near[0], ord=2))

    outside_ok = True
    if dom.spec.mode == "partial":
        probe = rng.uniform(0.0, 1.0, (4096, 3))
        probe = probe[~dom.in_K(probe)]
        w_out, q_out, dw_out = corr.evaluate(probe, gradient=True)
        outside_ok = bool(
            np.all(w_out == np.eye(3)) and np.all(q_out == 0.0) and np.all(dw_out == 0.0)
        )
    return BoundsReport(
        eps=dom.epsilon,
        alpha=dom.spec.alpha,
        eta=corr.eta,
        samples=samples,
        identity_gap=float(np.max(gap * r / s)),
        gradient=float(np.max(grad * r**2 / s)),
        pressure=float(np.max(qn * r**2 / s)),
        sup_combination=float(sup),
        near_field=near_gap,
        outside_K_exact=outside_ok,
    )


def spectral_divergence(
    corr: CorrectorField, n: int = 64, subsample: int = 2, cutoff: float = 0.25
) -> np.ndarray:
    """Relative spectral divergence of each corrector column over one cell.

    The corrector is continuous with gradient jumps on the hole and layer
    interfaces, so raw spectral derivatives carry Gibbs noise of a few
    percent.  Samples are cell averages (``subsample^3`` points per grid cell)
    and the ratio ``||div w_k|| / ||grad w_k||`` is taken over wavenumbers
    below ``cutoff`` times the largest one, where that noise is negligible.
    """
    eps = corr.domain.epsilon
    center = corr.domain.centers[0]
    m = n * subsample
    ax = (np.arange(m) + 0.5) / m * eps - eps / 2
    X = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1) + center
    w, _ = corr.evaluate(X.reshape(-1, 3))
    w = w.reshape(n, subsample, n, subsample, n, subsample, 3, 3).mean(axis=(1, 3, 5))
    k = 2.0 * np.pi * np.fft.fftfreq(n, eps / n)
    K = np.meshgrid(k, k, k, indexing="ij")
    keep = np.sqrt(K[0] ** 2 + K[1] ** 2 + K[2] ** 2) <= cutoff * np.pi * n / eps
    out = np.empty(3)
    for col in range(3):
        F = [np.fft.fftn(w[..., i, col])[keep] for i in range(3)]
        Kk = [Ki[keep] for Ki in K]
        div = sum(1j * Kk[i] * F[i] for i in range(3))
        grad = sum(np.abs(Kk[i] * F[j]) ** 2 for i in range(3) for j in range(3))
        out[col] = np.sqrt(np.sum(np.abs(div) ** 2) / np.sum(grad))
    return out
