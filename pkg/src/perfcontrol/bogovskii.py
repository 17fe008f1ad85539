"""Right inverse of the divergence on the control ball with support control.

For a density ``g`` supported in the ball ``B(c, R)`` with zero integral,

    w(x) = int g(y) (x - y) int_1^inf omega(y + s (x - y)) s^2 ds dy

solves ``div w = g`` and vanishes outside the ball, where ``omega`` is a
unit-mass bump supported in the ball.  Writing ``y = x - rho sigma`` and
``y + s(x - y) = x + tau sigma`` separates the kernel into ray integrals,

    w(x) = int_{S^2} sigma [G0 W2 + 2 G1 W1 + G2 W0] d sigma,
    Gm = int_0^inf g(x - rho sigma) rho^m d rho,
    Wm = int_0^inf omega(x + tau sigma) tau^m d tau.

For the polynomial blobs of :mod:`perfcontrol.greens` and the polynomial
``omega`` used here both ray integrals are polynomial on their chords, so
Gauss-Legendre with six nodes is exact.  The sphere integral is restricted
to the cone of directions that actually meet a given blob, which keeps the
angular rule accurate for distant blobs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numba as nb
import numpy as np

from .errors import MeanNotZero, SupportViolation
from .geometry import ControlZone, min_image
from .greens import _BLOB_MASS, EllipticOperator, blob_density

_CHORD_NODES, _CHORD_WEIGHTS = np.polynomial.legendre.leggauss(6)


def _sphere_product_rule(n_polar: int, n_azimuth: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre in ``cos(theta)`` times the trapezoid rule in azimuth."""
    x, w = np.polynomial.legendre.leggauss(n_polar)
    phi = 2 * np.pi * (np.arange(n_azimuth) + 0.5) / n_azimuth
    st = np.sqrt(1 - x**2)
    dirs = np.stack(
        [np.outer(st, np.cos(phi)), np.outer(st, np.sin(phi)), np.outer(x, np.ones_like(phi))], -1
    ).reshape(-1, 3)
    weights = np.outer(w, np.full(n_azimuth, 2 * np.pi / n_azimuth)).reshape(-1)
    return dirs, weights


def lebedev26() -> tuple[np.ndarray, np.ndarray]:
    """Degree-7 Lebedev rule on the unit sphere (weights sum to ``4 pi``)."""
    pts, wts = [], []
    for i in range(3):
        for s in (-1.0, 1.0):
            v = np.zeros(3)
            v[i] = s
            pts.append(v)
            wts.append(1.0 / 21.0)
    r2 = 1 / np.sqrt(2)
    for i, j in ((0, 1), (0, 2), (1, 2)):
        for si in (-1.0, 1.0):
            for sj in (-1.0, 1.0):
                v = np.zeros(3)
                v[i], v[j] = si * r2, sj * r2
                pts.append(v)
                wts.append(4.0 / 105.0)
    r3 = 1 / np.sqrt(3)
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            for sz in (-1.0, 1.0):
                pts.append(np.array([sx, sy, sz]) * r3)
                wts.append(9.0 / 280.0)
    return np.array(pts), 4 * np.pi * np.array(wts)


def omega_normalization(R: float) -> float:
    return 1.0 / (4 * np.pi * R**3 * _BLOB_MASS)


@nb.njit(cache=True)
def _omega_moments(x, sig, R, c_omega, nodes, weights, want_grad):
    """``W0, W1, W2`` along ``x + tau sig`` and their x-gradients."""
    W = np.zeros(3)
    dW = np.zeros((3, 3))
    xs = x[0] * sig[0] + x[1] * sig[1] + x[2] * sig[2]
    xx = x[0] * x[0] + x[1] * x[1] + x[2] * x[2]
    disc = xs * xs - xx + R * R
    if disc <= 0.0:
        return W, dW
    t_exit = -xs + np.sqrt(disc)
    if t_exit <= 0.0:
        return W, dW
    half = 0.5 * t_exit
    for q in range(nodes.shape[0]):
        tau = half * (nodes[q] + 1.0)
        wq = half * weights[q]
        z0 = x[0] + tau * sig[0]
        z1 = x[1] + tau * sig[1]
        z2 = x[2] + tau * sig[2]
        u = (z0 * z0 + z1 * z1 + z2 * z2) / (R * R)
        if u >= 1.0:
            continue
        om = 1.0 - u
        val = c_omega * om * om * om * om
        W[0] += wq * val
        W[1] += wq * val * tau
        W[2] += wq * val * tau * tau
        if want_grad:
            gfac = -8.0 * c_omega * om * om * om / (R * R)
            for m in range(3):
                tm = tau**m
                dW[m, 0] += wq * gfac * z0 * tm
                dW[m, 1] += wq * gfac * z1 * tm
                dW[m, 2] += wq * gfac * z2 * tm
    return W, dW


@nb.njit(cache=True)
def _blob_moments(d, sig, A, a, c_blob, nodes, weights, want_grad):
    """``G0, G1, G2`` of one blob along ``x - rho sig`` (``d = x - center``)."""
    G = np.zeros(3)
    dG = np.zeros((3, 3))
    Asig = A @ sig
    Ad = A @ d
    qa = sig[0] * Asig[0] + sig[1] * Asig[1] + sig[2] * Asig[2]
    qb = sig[0] * Ad[0] + sig[1] * Ad[1] + sig[2] * Ad[2]
    qc = d[0] * Ad[0] + d[1] * Ad[1] + d[2] * Ad[2] - a * a
    disc = qb * qb - qa * qc
    if disc <= 0.0:
        return G, dG
    sq = np.sqrt(disc)
    r1 = (qb - sq) / qa
    r2 = (qb + sq) / qa
    if r2 <= 0.0:
        return G, dG
    if r1 < 0.0:
        r1 = 0.0
    half = 0.5 * (r2 - r1)
    mid = 0.5 * (r2 + r1)
    for q in range(nodes.shape[0]):
        rho = mid + half * nodes[q]
        wq = half * weights[q]
        e0 = d[0] - rho * sig[0]
        e1 = d[1] - rho * sig[1]
        e2 = d[2] - rho * sig[2]
        Ae0 = A[0, 0] * e0 + A[0, 1] * e1 + A[0, 2] * e2
        Ae1 = A[1, 0] * e0 + A[1, 1] * e1 + A[1, 2] * e2
        Ae2 = A[2, 0] * e0 + A[2, 1] * e1 + A[2, 2] * e2
        u = (e0 * Ae0 + e1 * Ae1 + e2 * Ae2) / (a * a)
        if u >= 1.0:
            continue
        om = 1.0 - u
        val = c_blob * om * om * om * om
        G[0] += wq * val
        G[1] += wq * val * rho
        G[2] += wq * val * rho * rho
        if want_grad:
            gfac = -8.0 * c_blob * om * om * om / (a * a)
            for m in range(3):
                rm = rho**m
                dG[m, 0] += wq * gfac * Ae0 * rm
                dG[m, 1] += wq * gfac * Ae1 * rm
                dG[m, 2] += wq * gfac * Ae2 * rm
    return G, dG


@nb.njit(cache=True)
def _accumulate(out_w, out_dw, p, j, sig, wt, G, dG, W, dW, want_grad):
    comb = G[0] * W[2] + 2.0 * G[1] * W[1] + G[2] * W[0]
    for i in range(3):
        out_w[p, j, i] += wt * sig[i] * comb
    if want_grad:
        for b in range(3):
            dcomb = (
                dG[0, b] * W[2] + G[0] * dW[2, b]
                + 2.0 * (dG[1, b] * W[1] + G[1] * dW[1, b])
                + dG[2, b] * W[0] + G[2] * dW[0, b]
            )
            for i in range(3):
                out_dw[p, j, i, b] += wt * sig[i] * dcomb


@nb.njit(parallel=True, cache=True)
def _blob_basis_kernel(
    X, Y, A, a, a_bound, c_blob, R, c_omega,
    cone_x, cone_w, azim, sphere_dirs, sphere_w, nodes, weights, want_grad,
):
    P = X.shape[0]
    M = Y.shape[0]
    out_w = np.zeros((P, M, 3))
    out_dw = np.zeros((P, M, 3, 3)) if want_grad else np.zeros((1, 1, 3, 3))
    n_az = azim.shape[0]
    for p in nb.prange(P):
        x = X[p]
        if x[0] * x[0] + x[1] * x[1] + x[2] * x[2] >= R * R:
            continue
        for j in range(M):
            d = x - Y[j]
            dist = np.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
            if dist > a_bound * 1.0000001:
                e = d / dist
                # orthonormal frame around the cone axis
                if abs(e[0]) < 0.9:
                    t = np.array([1.0, 0.0, 0.0])
                else:
                    t = np.array([0.0, 1.0, 0.0])
                e1 = t - (t[0] * e[0] + t[1] * e[1] + t[2] * e[2]) * e
                e1 /= np.sqrt(e1[0] ** 2 + e1[1] ** 2 + e1[2] ** 2)
                e2 = np.array([e[1] * e1[2] - e[2] * e1[1], e[2] * e1[0] - e[0] * e1[2], e[0] * e1[1] - e[1] * e1[0]])
                theta_max = np.arcsin(a_bound / dist)
                for it in range(cone_x.shape[0]):
                    th = 0.5 * theta_max * (cone_x[it] + 1.0)
                    wth = 0.5 * theta_max * cone_w[it] * np.sin(th) * (2 * np.pi / n_az)
                    ct, st = np.cos(th), np.sin(th)
                    for ia in range(n_az):
                        ca, sa = np.cos(azim[ia]), np.sin(azim[ia])
                        sig = ct * e + st * (ca * e1 + sa * e2)
                        G, dG = _blob_moments(d, sig, A, a, c_blob, nodes, weights, want_grad)
                        if G[0] == 0.0:
                            continue
                        W, dW = _omega_moments(x, sig, R, c_omega, nodes, weights, want_grad)
                        _accumulate(out_w, out_dw, p, j, sig, wth, G, dG, W, dW, want_grad)
            else:
                for q in range(sphere_dirs.shape[0]):
                    sig = sphere_dirs[q]
                    G, dG = _blob_moments(d, sig, A, a, c_blob, nodes, weights, want_grad)
                    if G[0] == 0.0:
                        continue
                    W, dW = _omega_moments(x, sig, R, c_omega, nodes, weights, want_grad)
                    _accumulate(out_w, out_dw, p, j, sig, sphere_w[q], G, dG, W, dW, want_grad)
    return out_w, out_dw


@dataclass(frozen=True)
class BlobDensity:
    """``g(x) = sum_j q_j b_j(x)`` with the polynomial blobs of the Green's function."""

    centers: np.ndarray
    weights: np.ndarray
    radius: float
    op: EllipticOperator

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros(len(x))
        for y, q in zip(self.centers, self.weights):
            r = self.op.metric_radius(min_image(x - y))
            out += q * self.op.scale * blob_density(r, self.radius)
        return out

    @property
    def extent(self) -> float:
        return self.op.blob_extent(self.radius)


@dataclass(frozen=True)
class BogovskiiQuadrature:
    """Angular rule parameters (cone rule for distant blobs, full sphere otherwise)."""

    cone_polar: int = 8
    cone_azimuth: int = 12
    sphere_polar: int = 12
    sphere_azimuth: int = 24
    radial: int = 16
    generic_rule: str = "product"

    @classmethod
    def for_operator(cls, op: EllipticOperator) -> "BogovskiiQuadrature":
        """Default rule; ellipsoidal blobs get finer angular rules."""
        lo, hi = op.eig_A
        if hi > lo * (1 + 1e-12):
            return cls(cone_polar=12, cone_azimuth=16, sphere_polar=24, sphere_azimuth=48)
        return cls()


class BogovskiiField:
    """Callable ``w = Bog[g]`` for one density on one control zone."""

    def __init__(self, g, zone: ControlZone, quad: BogovskiiQuadrature | None = None, grad_g=None):
        self.g = g
        self.zone = zone
        if quad is None:
            quad = BogovskiiQuadrature.for_operator(g.op) if isinstance(g, BlobDensity) else BogovskiiQuadrature()
        self.quad = quad
        self.grad_g = grad_g
        self._center = np.asarray(zone.center)

    def local(self, x: np.ndarray) -> np.ndarray:
        return min_image(np.atleast_2d(np.asarray(x, dtype=float)) - self._center)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.evaluate(x)[0]

    def evaluate(self, x: np.ndarray, want_grad: bool = False):
        """``(w, grad w)`` with ``grad w[p, i, b] = d w_i / d x_b`` (None if not requested)."""
        if isinstance(self.g, BlobDensity):
            w, dw = blob_basis(self.local(x), self.g, self.zone, self.quad, want_grad, local=True)
            q = np.asarray(self.g.weights)
            return np.einsum("pmi,m->pi", w, q), (np.einsum("pmib,m->pib", dw, q) if want_grad else None)
        return _generic(self, self.local(x), want_grad)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.evaluate(x, True)[1]


def blob_basis(
    x: np.ndarray,
    g: BlobDensity,
    zone: ControlZone,
    quad: BogovskiiQuadrature | None = None,
    want_grad: bool = True,
    local: bool = False,
):
    """Bogovskii fields of each unit blob at ``x``: ``(P, M, 3)`` and ``(P, M, 3, 3)``."""
    quad = quad or BogovskiiQuadrature.for_operator(g.op)
    c = np.asarray(zone.center)
    X = np.ascontiguousarray(x if local else min_image(np.atleast_2d(x) - c), dtype=float)
    Y = np.ascontiguousarray(min_image(np.asarray(g.centers) - c), dtype=float)
    cone_x, cone_w = np.polynomial.legendre.leggauss(quad.cone_polar)
    azim = 2 * np.pi * (np.arange(quad.cone_azimuth) + 0.5) / quad.cone_azimuth
    sdirs, sw = _sphere_product_rule(quad.sphere_polar, quad.sphere_azimuth)
    c_blob = g.op.scale / (4 * np.pi * g.radius**3 * _BLOB_MASS)
    w, dw = _blob_basis_kernel(
        X, Y, np.ascontiguousarray(g.op.A), g.radius, g.extent, c_blob, zone.radius,
        omega_normalization(zone.radius), cone_x, cone_w, azim, sdirs, sw,
        _CHORD_NODES, _CHORD_WEIGHTS, want_grad,
    )
    return w, (dw if want_grad else None)


def _generic(field: BogovskiiField, X: np.ndarray, want_grad: bool):
    """Full-sphere rule for an arbitrary callable density (local coordinates)."""
    quad, R = field.quad, field.zone.radius
    if quad.generic_rule == "lebedev26":
        dirs, dw = lebedev26()
    else:
        dirs, dw = _sphere_product_rule(quad.sphere_polar, quad.sphere_azimuth)
    nodes, weights = np.polynomial.legendre.leggauss(quad.radial)
    c_om = omega_normalization(R)
    w = np.zeros((len(X), 3))
    grad = np.zeros((len(X), 3, 3)) if want_grad else None
    inside = np.sum(X**2, axis=1) < R * R
    for p in np.nonzero(inside)[0]:
        x = X[p]
        xs = dirs @ x
        disc = xs**2 - x @ x + R * R
        back = xs + np.sqrt(disc)  # chord length along -sigma
        fwd = -xs + np.sqrt(disc)
        rho = 0.5 * back[:, None] * (nodes + 1)
        tau = 0.5 * fwd[:, None] * (nodes + 1)
        wr = 0.5 * back[:, None] * weights
        wt = 0.5 * fwd[:, None] * weights
        ypts = x - rho[..., None] * dirs[:, None, :]
        gv = field.g(ypts.reshape(-1, 3) + field._center).reshape(rho.shape)
        zpts = x + tau[..., None] * dirs[:, None, :]
        u = np.sum(zpts**2, axis=-1) / R**2
        om = c_om * np.clip(1 - u, 0, None) ** 4
        Gm = [np.sum(wr * gv * rho**m, axis=1) for m in range(3)]
        Wm = [np.sum(wt * om * tau**m, axis=1) for m in range(3)]
        comb = Gm[0] * Wm[2] + 2 * Gm[1] * Wm[1] + Gm[2] * Wm[0]
        w[p] = (dw * comb) @ dirs
        if want_grad:
            if field.grad_g is None:
                raise ValueError("gradient of a generic density needs grad_g")
            gg = field.grad_g(ypts.reshape(-1, 3) + field._center).reshape(rho.shape + (3,))
            dom = (-8 * c_om * np.clip(1 - u, 0, None) ** 3 / R**2)[..., None] * zpts
            dG = [np.sum((wr * rho**m)[..., None] * gg, axis=1) for m in range(3)]
            dW = [np.sum((wt * tau**m)[..., None] * dom, axis=1) for m in range(3)]
            dcomb = (
                dG[0] * Wm[2][:, None] + Gm[0][:, None] * dW[2]
                + 2 * (dG[1] * Wm[1][:, None] + Gm[1][:, None] * dW[1])
                + dG[2] * Wm[0][:, None] + Gm[2][:, None] * dW[0]
            )
            grad[p] = np.einsum("d,di,db->ib", dw, dirs, dcomb)
    return w, grad


def check_density(g, zone: ControlZone, rtol: float = 1e-10, samples: int = 4000, seed: int = 0,
                  callable_rtol: float = 1e-6) -> None:
    """Raise unless ``g`` has zero mean and vanishes outside the closed zone.

    Blob densities are checked exactly through their weights.  Arbitrary
    callables are integrated by a fixed ball quadrature, whose own error sets
    the looser ``callable_rtol``.
    """
    if isinstance(g, BlobDensity):
        c = np.asarray(zone.center)
        dist = np.linalg.norm(min_image(np.asarray(g.centers) - c), axis=1)
        if np.any(dist + g.extent > zone.radius * (1 + 1e-12)):
            raise SupportViolation("a blob reaches outside the control zone")
        q = np.asarray(g.weights)
        if abs(q.sum()) > rtol * max(np.abs(q).sum(), 1e-300):
            raise MeanNotZero(f"density integral {q.sum():.3e} is not zero")
        return
    rng = np.random.default_rng(seed)
    R = zone.radius
    dirs = rng.standard_normal((samples, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    shell = np.asarray(zone.center) + dirs * (R * (1 + 1e-9 + 0.5 * rng.random(samples)))[:, None]
    if np.any(np.asarray(g(shell)) != 0.0):
        raise SupportViolation("density is nonzero outside the control zone")
    nodes, weights = np.polynomial.legendre.leggauss(24)
    r = 0.5 * R * (nodes + 1)
    wr = 0.5 * R * weights * r**2
    sd, sw = _sphere_product_rule(16, 32)
    pts = np.asarray(zone.center) + (r[:, None, None] * sd[None, :, :])
    vals = np.asarray(g(pts.reshape(-1, 3))).reshape(len(r), len(sd))
    total = float(wr @ vals @ sw)
    l1 = float(wr @ np.abs(vals) @ sw)
    if abs(total) > callable_rtol * max(l1, 1e-300) and abs(total) > 1e-14:
        raise MeanNotZero(f"density integral {total:.3e} is not zero")


def bogovskii(
    g,
    zone: ControlZone,
    quad: BogovskiiQuadrature | None = None,
    grad_g: Callable | None = None,
    check: bool = True,
) -> BogovskiiField:
    """Vector field ``w`` with ``div w = g`` supported in the closed control zone."""
    if check:
        check_density(g, zone)
    return BogovskiiField(g, zone, quad, grad_g)
