"""Periodic fundamental solutions with smeared charges.

The operator is ``div(B grad G) = delta - 1`` on the unit torus, where
``B = A^-1`` for an SPD matrix ``A`` (``A = I`` is the Laplacian).  In the
stretched variable ``y = B^(-1/2) x`` it becomes the Laplacian, so every
kernel below is a radial profile of ``r = sqrt(x . A x)`` scaled by
``sqrt(det A)``.

Each charge is smeared over a compact polynomial blob ``C (1 - r^2/a^2)^4``.
Outside its blob the field equals that of a point charge, so the potential
is exactly ``A``-harmonic away from the blobs while the source density stays
smooth.

Two evaluation paths share the same Ewald splitting:

* pointwise: real-space sum over the 27 nearest images plus a truncated
  Fourier cube (used for fitting and verification);
* on a grid: long-range part by inverse FFT of the analytic structure
  factor, short-range and blob corrections added on node/charge pairs found
  with a periodic KD-tree.

Potentials are defined up to one additive constant per unit charge; it
cancels whenever the total charge is zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Literal

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import erf, erfc

from .errors import NonSPDMatrix
from .geometry import min_image
from .spectral import SpectralGrid

_TWO_OVER_SQRT_PI = 2.0 / np.sqrt(np.pi)
_FOUR_PI = 4.0 * np.pi
#: erfc(x) < 1e-16 beyond this argument
_ERFC_CUT = 5.9
#: exp(-x) < 1e-16 beyond this argument
_EXP_CUT = 37.0
_BLOB_COEFFS = np.array([1.0, -4.0, 6.0, -4.0, 1.0])
_BLOB_MASS = float(np.sum(_BLOB_COEFFS / (2 * np.arange(5) + 3)))


@dataclass(frozen=True)
class EllipticOperator:
    """``div(A^-1 grad .)``; ``A`` is the identity for the Laplacian."""

    kind: Literal["laplace", "a_harmonic"]
    matrix: tuple[tuple[float, ...], ...]

    @classmethod
    def laplace(cls) -> "EllipticOperator":
        return cls("laplace", tuple(map(tuple, np.eye(3))))

    @classmethod
    def a_harmonic(cls, A) -> "EllipticOperator":
        A = np.asarray(A, dtype=float)
        if A.shape != (3, 3) or not np.allclose(A, A.T, rtol=0, atol=1e-12 * np.abs(A).max()):
            raise NonSPDMatrix("resistance matrix must be symmetric 3x3")
        if np.linalg.eigvalsh(A).min() <= 0:
            raise NonSPDMatrix("resistance matrix must be positive definite")
        return cls("a_harmonic", tuple(map(tuple, A)))

    @cached_property
    def A(self) -> np.ndarray:
        return np.array(self.matrix)

    @cached_property
    def B(self) -> np.ndarray:
        return np.linalg.inv(self.A)

    @cached_property
    def scale(self) -> float:
        """``sqrt(det A)``, the factor multiplying every radial profile."""
        return float(np.sqrt(np.linalg.det(self.A)))

    @cached_property
    def eig_A(self) -> tuple[float, float]:
        ev = np.linalg.eigvalsh(self.A)
        return float(ev[0]), float(ev[-1])

    def metric_radius(self, d: np.ndarray) -> np.ndarray:
        return np.sqrt(np.einsum("...i,ij,...j->...", d, self.A, d))

    def flux(self, grad: np.ndarray) -> np.ndarray:
        """``A^-1 grad`` applied along the last axis."""
        return grad @ self.B.T

    def symbol(self, k: np.ndarray) -> np.ndarray:
        """``k . B k`` for wavevectors along the last axis."""
        return np.einsum("...i,ij,...j->...", k, self.B, k)

    def blob_extent(self, a: float) -> float:
        """Euclidean radius of the ball enclosing a blob of metric radius ``a``."""
        return a / np.sqrt(self.eig_A[0])


# radial profiles: G(r), g(r) = G'(r)/r, h(r) = g'(r)/r
def _point(r):
    return -1.0 / (_FOUR_PI * r), 1.0 / (_FOUR_PI * r**3), -3.0 / (_FOUR_PI * r**5)


def _short(r, xi):
    z = xi * r
    ec = erfc(z)
    ex = _TWO_OVER_SQRT_PI * xi * np.exp(-z * z)
    G = -ec / (_FOUR_PI * r)
    g = (ec / r**3 + ex / r**2) / _FOUR_PI
    h = -(3 * ec / r**5 + 3 * ex / r**4 + 2 * xi**2 * ex / r**2) / _FOUR_PI
    return G, g, h


def _long(r, xi):
    """Smooth Ewald part ``-erf(xi r)/(4 pi r)`` with a series near the origin."""
    r = np.asarray(r, dtype=float)
    z = xi * r
    small = z < 2e-2
    rs = np.where(small, 1.0, r)
    e = erf(xi * rs)
    ex = _TWO_OVER_SQRT_PI * xi * np.exp(-(xi * rs) ** 2)
    G = -e / (_FOUR_PI * rs)
    g = (e / rs**3 - ex / rs**2) / _FOUR_PI
    h = (3 * ex / rs**4 + 2 * xi**2 * ex / rs**2 - 3 * e / rs**5) / _FOUR_PI
    c = _TWO_OVER_SQRT_PI / _FOUR_PI
    z2 = z * z
    Gs = -c * xi * (1 - z2 / 3 + z2 * z2 / 10)
    gs = c * xi**3 * (2.0 / 3 - 2 * z2 / 5 + z2 * z2 / 7)
    hs = c * xi**5 * (-4.0 / 5 + 4 * z2 / 7)
    return np.where(small, Gs, G), np.where(small, gs, g), np.where(small, hs, h)


def _blob(r, a):
    """Potential profiles of the unit blob of radius ``a`` (valid for ``r < a``)."""
    u = (r / a) ** 2
    m = np.arange(5)
    norm = a**3 * _BLOB_MASS
    P = sum(c * u**k / (2 * k + 3) for c, k in zip(_BLOB_COEFFS, m)) / norm
    dP = sum(c * k * u ** max(k - 1, 0) / (2 * k + 3) for c, k in zip(_BLOB_COEFFS, m) if k > 0) / norm
    inner = sum(c * (1 - u ** (k + 1)) / ((k + 1) * (2 * k + 3)) for c, k in zip(_BLOB_COEFFS, m))
    G = -(1.0 + inner / (2 * _BLOB_MASS)) / (_FOUR_PI * a)
    return G, P / _FOUR_PI, 2 * dP / (a**2 * _FOUR_PI)


def blob_density(r: np.ndarray, a: float) -> np.ndarray:
    """Unit-mass polynomial blob in the stretched variable (before the ``sqrt(det A)`` factor)."""
    u = np.minimum((np.asarray(r) / a) ** 2, 1.0)
    return (1.0 - u) ** 4 / (_FOUR_PI * a**3 * _BLOB_MASS)


def blob_density_gradient_factor(r: np.ndarray, a: float) -> np.ndarray:
    """``d/dr`` of :func:`blob_density` divided by ``r``."""
    u = np.minimum((np.asarray(r) / a) ** 2, 1.0)
    return -8.0 * (1.0 - u) ** 3 / (a**2 * _FOUR_PI * a**3 * _BLOB_MASS)


def _near_profiles(r, xi, a):
    """Real-space part of one charge: blob minus long range inside, short range outside."""
    r = np.asarray(r, dtype=float)
    inside = r < a
    ro = np.where(inside, a, r)
    so = _short(ro, xi)
    ri = np.where(inside, r, 0.0)
    bl = _blob(ri, a)
    lo = _long(ri, xi)
    return tuple(np.where(inside, b - l, s) for b, l, s in zip(bl, lo, so))


@dataclass
class FieldValues:
    """Potential, gradient ``(..., 3)`` and Hessian ``(..., 3, 3)`` (entries may be None)."""

    potential: np.ndarray | None = None
    gradient: np.ndarray | None = None
    hessian: np.ndarray | None = None


class PeriodicGreen:
    """Periodic Green's function of an :class:`EllipticOperator` with blob charges."""

    def __init__(
        self,
        op: EllipticOperator | None = None,
        blob_radius: float = 0.02,
        xi: float | None = None,
    ):
        self.op = op or EllipticOperator.laplace()
        self.blob_radius = float(blob_radius)
        lam_min, lam_max = self.op.eig_A
        # images beyond the 27 nearest have stretched radius >= 1.5 sqrt(lam_min)
        self.xi = max(xi or 0.0, _ERFC_CUT / (1.5 * np.sqrt(lam_min)))
        kmax = np.sqrt(4 * _EXP_CUT * self.xi**2 * lam_max)
        self.fourier_cut = int(np.ceil(kmax / (2 * np.pi)))

    @staticmethod
    def mean_shift(xi: float) -> float:
        """Constant making the Ewald sum of a point charge mean-free."""
        return 1.0 / (4 * xi**2)

    @cached_property
    def _half_cube(self) -> tuple[np.ndarray, np.ndarray]:
        K = self.fourier_cut
        m = np.arange(-K, K + 1)
        mm = np.stack(np.meshgrid(m, m, m, indexing="ij"), -1).reshape(-1, 3)
        half = (mm[:, 0] > 0) | ((mm[:, 0] == 0) & (mm[:, 1] > 0)) | ((mm[:, 0] == 0) & (mm[:, 1] == 0) & (mm[:, 2] > 0))
        k = 2 * np.pi * mm[half]
        s = self.op.symbol(k)
        w = np.exp(-s / (4 * self.xi**2)) / s
        keep = w > 1e-18 * w.max()
        return k[keep], 2.0 * w[keep]

    # ---------------------------------------------------------------- pointwise
    def evaluate(
        self,
        points: np.ndarray,
        sources: np.ndarray,
        weights: np.ndarray,
        order: int = 1,
        chunk: int = 2048,
    ) -> FieldValues:
        """Field of weighted charges at arbitrary points; ``order`` 0, 1 or 2."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        sources = np.atleast_2d(np.asarray(sources, dtype=float))
        weights = np.asarray(weights, dtype=float).reshape(-1)
        out = FieldValues(
            np.zeros(len(points)),
            np.zeros((len(points), 3)) if order >= 1 else None,
            np.zeros((len(points), 3, 3)) if order >= 2 else None,
        )
        k, w = self._half_cube
        phase_y = sources @ k.T
        Sc = np.cos(phase_y).T @ weights
        Ss = np.sin(phase_y).T @ weights
        for lo in range(0, len(points), chunk):
            sl = slice(lo, lo + chunk)
            x = points[sl]
            ph = x @ k.T
            c, s = np.cos(ph), np.sin(ph)
            cos_part = c * Sc + s * Ss  # sum_j q_j cos(k.(x - y_j))
            sin_part = s * Sc - c * Ss
            out.potential[sl] = -(cos_part @ w)
            if order >= 1:
                out.gradient[sl] = (sin_part * w) @ k
            if order >= 2:
                out.hessian[sl] = np.einsum("pk,ka,kb->pab", cos_part * w, k, k)
            self._add_real_space(out, sl, x, sources, weights, order)
        out.potential += self.mean_shift(self.xi) * weights.sum()
        return out

    def _add_real_space(self, out, sl, x, sources, weights, order):
        A, scale = self.op.A, self.op.scale
        d0 = min_image(x[:, None, :] - sources[None, :, :])
        shifts = np.stack(np.meshgrid(*([np.arange(-1, 2)] * 3), indexing="ij"), -1).reshape(-1, 3)
        for sh in shifts:
            d = d0 + sh
            r = self.op.metric_radius(d)
            G, g, h = _near_profiles(r, self.xi, self.blob_radius)
            qs = weights * scale
            out.potential[sl] += (G * qs).sum(axis=1)
            if order >= 1:
                Ad = d @ A
                out.gradient[sl] += np.einsum("pm,pma->pa", g * qs, Ad)
                if order >= 2:
                    out.hessian[sl] += np.einsum("pm,ab->pab", g * qs, A) + np.einsum(
                        "pm,pma,pmb->pab", h * qs, Ad, Ad
                    )

    def normal_flux_matrix(self, points: np.ndarray, normals: np.ndarray, sources: np.ndarray) -> np.ndarray:
        """``D[p, j] = normal_p . A^-1 grad G(points_p - sources_j)`` for unit charges."""
        points = np.asarray(points, dtype=float)
        sources = np.asarray(sources, dtype=float)
        nflux = self.op.flux(np.asarray(normals, dtype=float))
        k, w = self._half_cube
        px, py = points @ k.T, sources @ k.T
        a_s = np.sin(px) * (nflux @ k.T) * w
        a_c = np.cos(px) * (nflux @ k.T) * w
        D = a_s @ np.cos(py).T - a_c @ np.sin(py).T
        A, scale = self.op.A, self.op.scale
        d0 = min_image(points[:, None, :] - sources[None, :, :])
        for sh in np.stack(np.meshgrid(*([np.arange(-1, 2)] * 3), indexing="ij"), -1).reshape(-1, 3):
            d = d0 + sh
            r = self.op.metric_radius(d)
            _, g, _ = _near_profiles(r, self.xi, self.blob_radius)
            D += g * scale * np.einsum("pma,pa->pm", d @ A, nflux)
        return D

    # ---------------------------------------------------------------- on grids
    def grid_plan(self, n: int) -> "GridPlan":
        return GridPlan(self, n)


class GridPlan:
    """Node-exact evaluation of charge fields on the ``n^3`` collocated grid.

    The Ewald parameter is chosen so the long-range spectrum is negligible at
    the grid Nyquist frequency; if that forces a real-space cutoff beyond half
    the box, the FFT runs on a refined grid and is subsampled.
    """

    def __init__(self, green: PeriodicGreen, n: int):
        self.green = green
        self.n = n
        op = green.op
        lam_min, lam_max = op.eig_A
        refine = 1
        while True:
            n_fft = n * refine
            xi = np.pi * n_fft / np.sqrt(4 * _EXP_CUT * lam_max)
            cut_metric = _ERFC_CUT / xi
            cut_euclid = cut_metric / np.sqrt(lam_min)
            if cut_euclid < 0.45:
                break
            refine *= 2
        self.refine = refine
        self.n_fft = n_fft
        self.xi = xi
        self.cut_metric = max(cut_metric, green.blob_radius)
        self.cut_euclid = self.cut_metric / np.sqrt(lam_min)
        self.fft_grid = SpectralGrid(n_fft)
        self.grid = SpectralGrid(n)
        self._nodes = self.grid.points.reshape(-1, 3)
        self._tree = cKDTree(self._nodes, boxsize=1.0 + 1e-12)

    def _symbol(self) -> np.ndarray:
        g = self.fft_grid
        kx, ky, kz = g.k
        k = np.stack(np.broadcast_arrays(kx, ky, kz), -1)
        s = self.green.op.symbol(k)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = -np.exp(-s / (4 * self.xi**2)) / s
        out[0, 0, 0] = 0.0
        return out

    def structure_factor(self, sources: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """``sum_j q_j exp(-i k . y_j)`` on the half spectrum, times ``n_fft^3``."""
        g = self.fft_grid
        kx, ky, kz = (np.ravel(v) for v in g.k)
        ex = np.exp(-1j * np.outer(kx, sources[:, 0]))
        ey = np.exp(-1j * np.outer(ky, sources[:, 1]))
        ez = np.exp(-1j * np.outer(sources[:, 2], kz))
        exy = (ex[:, None, :] * ey[None, :, :] * weights).reshape(-1, len(sources))
        return (exy @ ez).reshape(len(kx), len(ky), len(kz)) * self.n_fft**3

    def fields(
        self,
        sources: np.ndarray,
        weight_sets: np.ndarray,
        order: int = 1,
        dtype=np.float64,
    ) -> list[FieldValues]:
        """Fields of several weight vectors (rows of ``weight_sets``) at all nodes.

        Gradients have shape ``(3, n, n, n)`` and Hessians ``(3, 3, n, n, n)``.
        """
        sources = np.atleast_2d(np.asarray(sources, dtype=float))
        weight_sets = np.atleast_2d(np.asarray(weight_sets, dtype=float))
        sym = self._symbol()
        g = self.fft_grid
        kvec = g.k
        n, r = self.n, self.refine
        results = []
        for q in weight_sets:
            phi = self.structure_factor(sources, q) * sym
            inv = lambda fh: g.inverse(fh)[::r, ::r, ::r].astype(np.float64)
            out = FieldValues(inv(phi) + self.green.mean_shift(self.xi) * q.sum())
            if order >= 1:
                out.gradient = np.stack([inv(1j * kvec[a] * phi) for a in range(3)])
            if order >= 2:
                hess = np.empty((3, 3, n, n, n))
                for a in range(3):
                    for b in range(a, 3):
                        hess[a, b] = inv(-kvec[a] * kvec[b] * phi)
                        hess[b, a] = hess[a, b]
                out.hessian = hess
            results.append(out)
        self._add_pairs(results, sources, weight_sets, order)
        for out in results:
            out.potential = out.potential.astype(dtype)
            if out.gradient is not None:
                out.gradient = out.gradient.astype(dtype)
            if out.hessian is not None:
                out.hessian = out.hessian.astype(dtype)
        return results

    def _add_pairs(self, results, sources, weight_sets, order):
        op = self.green.op
        A, scale = op.A, op.scale
        for j0 in range(0, len(sources), 16):
            sub = slice(j0, j0 + 16)
            node_lists = self._tree.query_ball_point(np.mod(sources[sub], 1.0), self.cut_euclid)
            for jj, nodes in enumerate(node_lists):
                if not nodes:
                    continue
                j = j0 + jj
                nodes = np.asarray(nodes)
                d = min_image(self._nodes[nodes] - sources[j])
                rad = op.metric_radius(d)
                G, gg, hh = _near_profiles(rad, self.xi, self.green.blob_radius)
                Ad = d @ A
                for out, q in zip(results, weight_sets):
                    qs = q[j] * scale
                    if qs == 0.0:
                        continue
                    pot = out.potential.reshape(-1)
                    pot[nodes] += qs * G
                    if order >= 1:
                        grad = out.gradient.reshape(3, -1)
                        grad[:, nodes] += qs * (gg * Ad.T)
                    if order >= 2:
                        hess = out.hessian.reshape(3, 3, -1)
                        hess[:, :, nodes] += qs * (A[:, :, None] * gg + hh * Ad.T[:, None, :] * Ad.T[None, :, :])
