"""Limit control triplets (velocity, pressure, forcing) built from a potential.

Euler mode::

    v = grad theta,  g = lap theta,  w = Bog[g],  u = v - w,
    p = -d_t theta - |grad theta|^2 / 2,
    f = -d_t w - (v.grad) w - (w.grad) v + (w.grad) w.

Darcy mode with resistance matrix ``A``::

    u = A^-1 grad theta - w,  w = Bog[div(A^-1 grad theta)],
    p = -theta,  f = -A w.

``theta(t, .)`` is a charge sum whose weights are linear in a few snapshot
coefficients, and the Bogovskii operator is linear, so every field is a
time-dependent combination of per-snapshot basis fields.  Grid evaluators
cache those basis fields per resolution; pointwise evaluators compute them
on demand.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .bogovskii import BlobDensity, blob_basis, check_density
from .geometry import ControlZone, min_image
from .greens import EllipticOperator
from .potential import PotentialControl
from .spectral import SpectralGrid

Mode = Literal["euler", "darcy"]


@dataclass
class ZoneGridData:
    """Per-snapshot basis fields on one grid (zone quantities at zone nodes only)."""

    n: int
    nodes: np.ndarray  # flat indices of nodes in the closed zone
    gradient: np.ndarray  # (S, 3, n, n, n)
    potential: np.ndarray  # (S, n, n, n)
    hessian_zone: np.ndarray  # (S, P, 3, 3)
    bog: np.ndarray  # (S, P, 3)
    bog_grad: np.ndarray  # (S, P, 3, 3)


@dataclass
class ControlTriplet:
    """Velocity, pressure and forcing of a limit control problem."""

    mode: Mode
    theta: PotentialControl
    zone: ControlZone
    _grid_cache: dict = field(default_factory=dict, repr=False)

    @property
    def op(self) -> EllipticOperator:
        return self.theta.operator

    @property
    def A(self) -> np.ndarray:
        return self.op.A

    @property
    def snapshot_count(self) -> int:
        return len(self.theta.snapshots)

    def density(self, weights: np.ndarray) -> BlobDensity:
        lay = self.theta.layout
        return BlobDensity(lay.points, np.asarray(weights), lay.blob_radius, lay.op)

    # ------------------------------------------------------------ pointwise
    def _bog_point(self, x, want_grad):
        W, DW = blob_basis(x, self.density(np.zeros(self.theta.layout.count)), self.zone, want_grad=want_grad)
        return W, DW

    def fields_at(self, t: float, x: np.ndarray) -> dict[str, np.ndarray]:
        """All limit fields at points ``x`` (exact charge sums plus Bogovskii quadrature)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        th = self.theta
        q, dq = th.charge_weights(t)
        green, pts = th.layout.green, th.layout.points
        f0 = green.evaluate(x, pts, q, 2)
        W, DW = self._bog_point(x, True)
        w = np.einsum("pmi,m->pi", W, q)
        dw = np.einsum("pmib,m->pib", DW, q)
        dtw = np.einsum("pmi,m->pi", W, dq)
        if self.mode == "euler":
            v = f0.gradient
            dv = f0.hessian
            dt_theta = green.evaluate(x, pts, dq, 0).potential
            p = -dt_theta - 0.5 * np.sum(v * v, axis=1)
            f = -dtw - np.einsum("pib,pb->pi", dw, v) - np.einsum("pib,pb->pi", dv, w) + np.einsum("pib,pb->pi", dw, w)
        else:
            v = self.op.flux(f0.gradient)
            dv = np.einsum("ij,pjb->pib", self.op.B, f0.hessian)
            p = -f0.potential
            f = -w @ self.A.T
        return {"velocity": v - w, "pressure": p, "forcing": f, "bogovskii": w,
                "velocity_gradient": dv - dw, "potential_velocity": v}

    def velocity(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.fields_at(t, x)["velocity"]

    def pressure(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.fields_at(t, x)["pressure"]

    def forcing(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.fields_at(t, x)["forcing"]

    def bogovskii_field(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.fields_at(t, x)["bogovskii"]

    # ------------------------------------------------------------ on grids
    def zone_nodes(self, n: int) -> np.ndarray:
        grid = SpectralGrid(n)
        pts = grid.points.reshape(-1, 3)
        return np.nonzero(self.zone.contains(pts))[0]

    def grid_data(self, n: int) -> ZoneGridData:
        """Per-snapshot basis fields on the ``n^3`` grid (computed once, cached)."""
        if n in self._grid_cache:
            return self._grid_cache[n]
        th = self.theta
        lay = th.layout
        Q = th.weight_matrix
        plan = lay.green.grid_plan(n)
        fields = plan.fields(lay.points, Q, order=2)
        nodes = self.zone_nodes(n)
        pts = SpectralGrid(n).points.reshape(-1, 3)[nodes]
        W, DW = self._bog_point(pts, True)
        data = ZoneGridData(
            n=n,
            nodes=nodes,
            gradient=np.stack([f.gradient for f in fields]),
            potential=np.stack([f.potential for f in fields]),
            hessian_zone=np.stack([f.hessian.reshape(3, 3, -1)[:, :, nodes].transpose(2, 0, 1) for f in fields]),
            bog=np.einsum("pmi,sm->spi", W, Q),
            bog_grad=np.einsum("pmib,sm->spib", DW, Q),
        )
        self._grid_cache[n] = data
        return data

    def velocity_basis(self, n: int, exterior_only: bool = False) -> np.ndarray:
        """Per-snapshot velocity fields ``(S, 3, n, n, n)``; ``u(t) = sum_s c_s(t) basis[s]``.

        With ``exterior_only`` the Bogovskii correction is skipped, so the
        tables are exact only at nodes outside the closed zone.
        """
        key = ("velocity", n, exterior_only)
        if key in self._grid_cache:
            return self._grid_cache[key]
        th = self.theta
        lay = th.layout
        Q = th.weight_matrix
        fields = lay.green.grid_plan(n).fields(lay.points, Q, order=1)
        basis = np.stack([f.gradient for f in fields])
        if self.mode == "darcy":
            basis = np.einsum("ij,sj...->si...", self.op.B, basis)
        if not exterior_only:
            nodes = self.zone_nodes(n)
            pts = SpectralGrid(n).points.reshape(-1, 3)[nodes]
            W, _ = self._bog_point(pts, False)
            flat = basis.reshape(len(Q), 3, -1)
            flat[:, :, nodes] -= np.einsum("pmi,sm->sip", W, Q)
        self._grid_cache[key] = basis
        return basis

    def _scatter(self, n: int, nodes: np.ndarray, values: np.ndarray) -> np.ndarray:
        out = np.zeros((3, n**3))
        out[:, nodes] = values.T
        return out.reshape(3, n, n, n)

    def velocity_on_grid(self, t: float, n: int) -> np.ndarray:
        d = self.grid_data(n)
        c, _ = self.theta.coefficients(t)
        grad = np.tensordot(c, d.gradient, axes=1)
        v = grad if self.mode == "euler" else np.einsum("ij,j...->i...", self.op.B, grad)
        w = np.tensordot(c, d.bog, axes=1)
        return v - self._scatter(n, d.nodes, w)

    def pressure_on_grid(self, t: float, n: int) -> np.ndarray:
        d = self.grid_data(n)
        c, dc = self.theta.coefficients(t)
        if self.mode == "darcy":
            return -np.tensordot(c, d.potential, axes=1)
        grad = np.tensordot(c, d.gradient, axes=1)
        return -np.tensordot(dc, d.potential, axes=1) - 0.5 * np.sum(grad**2, axis=0)

    def forcing_on_grid(self, t: float, n: int) -> np.ndarray:
        """Forcing at every node; exactly zero outside the closed control zone."""
        d = self.grid_data(n)
        c, dc = self.theta.coefficients(t)
        w = np.tensordot(c, d.bog, axes=1)
        if self.mode == "darcy":
            return self._scatter(n, d.nodes, -(w @ self.A.T))
        dtw = np.tensordot(dc, d.bog, axes=1)
        dw = np.tensordot(c, d.bog_grad, axes=1)
        hess = np.tensordot(c, d.hessian_zone, axes=1)
        v = np.tensordot(c, d.gradient, axes=1).reshape(3, -1)[:, d.nodes].T
        f = -dtw - np.einsum("pib,pb->pi", dw, v) - np.einsum("pib,pb->pi", hess, w) + np.einsum("pib,pb->pi", dw, w)
        return self._scatter(n, d.nodes, f)

    def bogovskii_on_grid(self, t: float, n: int) -> np.ndarray:
        d = self.grid_data(n)
        c, _ = self.theta.coefficients(t)
        return self._scatter(n, d.nodes, np.tensordot(c, d.bog, axes=1))

    def darcy_identity_residual(self, t: float, x: np.ndarray) -> float:
        """``max |A u + grad p - f|`` relative to ``max |grad p|`` at points ``x``."""
        fl = self.fields_at(t, x)
        gp = -self.theta.grad_theta(t, x)
        res = fl["velocity"] @ self.A.T + gp - fl["forcing"]
        scale = max(np.abs(gp).max(), 1e-300)
        return float(np.abs(res).max() / scale)


def _check_layout_density(theta: PotentialControl, zone: ControlZone) -> None:
    lay = theta.layout
    for q in theta.weight_matrix:
        check_density(BlobDensity(lay.points, q, lay.blob_radius, lay.op), zone)


def euler_control(theta: PotentialControl, zone: ControlZone) -> ControlTriplet:
    """Euler-limit triplet from a Laplace-mode potential."""
    if theta.operator.kind != "laplace":
        raise ValueError("euler control needs a laplace-mode potential")
    _check_layout_density(theta, zone)
    return ControlTriplet("euler", theta, zone)


def darcy_control(theta: PotentialControl, A, zone: ControlZone) -> ControlTriplet:
    """Darcy-limit triplet from an ``A``-harmonic potential."""
    op = EllipticOperator.a_harmonic(A)
    if not np.allclose(op.A, theta.operator.A, rtol=1e-12, atol=0):
        raise ValueError("potential operator does not match the resistance matrix")
    _check_layout_density(theta, zone)
    return ControlTriplet("darcy", theta, zone)


def zone_outside_max(field_on_grid: np.ndarray, zone: ControlZone) -> float:
    """Largest magnitude of a grid vector field at nodes outside the closed zone."""
    n = field_on_grid.shape[-1]
    pts = SpectralGrid(n).points.reshape(-1, 3)
    outside = ~zone.contains(pts)
    mag = np.sqrt(np.sum(field_on_grid.reshape(3, -1) ** 2, axis=0))
    return float(mag[outside].max()) if outside.any() else 0.0


@dataclass
class ControlReport:
    forcing_outside: float
    clearance: float
    d0: float
    matching_error: float
    tangential_errors: list[float]
    times: np.ndarray
    clearance_history: np.ndarray

    def as_dict(self) -> dict:
        return {
            "forcing_outside": self.forcing_outside,
            "clearance": self.clearance,
            "d0": self.d0,
            "matching_error": self.matching_error,
            "tangential_errors": list(self.tangential_errors),
        }


def boundary_grid(patch, n_polar: int, n_azimuth: int):
    """Boundary points on a latitude-longitude grid, shape ``(n_polar, n_azimuth, 3)``."""
    th = np.pi * (np.arange(n_polar) + 0.5) / n_polar
    ph = 2 * np.pi * np.arange(n_azimuth) / n_azimuth
    unit = np.stack(
        [np.outer(np.sin(th), np.cos(ph)), np.outer(np.sin(th), np.sin(ph)), np.outer(np.cos(th), np.ones_like(ph))],
        -1,
    )
    return np.asarray(patch.center) + unit * np.asarray(patch.radii), th, ph


def verify_control(
    triplet: ControlTriplet,
    isotopy,
    n: int = 32,
    k: int = 2,
    time_samples: int = 9,
    steps: int = 200,
    n_polar: int = 24,
    n_azimuth: int = 48,
    table_n: int = 96,
    exterior_only: bool = False,
    check_forcing: bool = True,
) -> ControlReport:
    """Support, clearance and boundary-matching diagnostics of a control."""
    from .flowmap import advect, tabulated_limit_velocity

    forcing_outside = 0.0
    for t in np.linspace(0.0, 1.0, time_samples) if check_forcing else ():
        forcing_outside = max(forcing_outside, zone_outside_max(triplet.forcing_on_grid(t, n), triplet.zone))
    pts, th, ph = boundary_grid(isotopy.P0, n_polar, n_azimuth)
    flat = pts.reshape(-1, 3)
    velocity = tabulated_limit_velocity(triplet, table_n, exterior_only)
    traj_times = np.linspace(0.0, 1.0, steps + 1)
    history = advect(flat, velocity, (0.0, 1.0), steps, record=True)
    clear = np.array([float(triplet.zone.distance(h).min()) for h in history])
    target = pts - np.asarray(isotopy.P0.center) + np.asarray(isotopy.center(1.0))
    err = min_image(history[-1].reshape(pts.shape) - target)
    matching = float(np.linalg.norm(err, axis=-1).max())
    tangential = []
    dth, dph = th[1] - th[0], ph[1] - ph[0]
    for order in range(1, k + 1):
        e_th = np.diff(err, n=order, axis=0) / dth**order
        e_ph = err.copy()
        for _ in range(order):
            e_ph = (np.roll(e_ph, -1, axis=1) - e_ph) / dph
        tangential.append(float(max(np.abs(e_th).max(), np.abs(e_ph).max())))
    return ControlReport(forcing_outside, float(clear.min()), float(isotopy.d0), matching, tangential,
                         traj_times, clear)


def synthesize_control(
    isotopy,
    layout,
    mode: Mode = "euler",
    start_knots: int = 3,
    max_knots: int = 24,
    stabilization: float = 0.1,
    floor: float = 1e-4,
    table_n: int = 96,
    exterior_only: bool = False,
    overlap: float = 0.25,
    tube_margin: float = 0.05,
    **fit_kwargs,
) -> tuple[ControlTriplet, list[tuple[int, float]]]:
    """Double the knot count until the boundary-matching error settles.

    Stops when two successive errors differ by less than ``stabilization``
    relative, when the error drops below ``floor``, or at ``max_knots``.
    Returns the final triplet and the ``(knots, matching error)`` history.
    """
    from .potential import synthesize_theta

    history: list[tuple[int, float]] = []
    knots, triplet = start_knots, None
    while True:
        theta = synthesize_theta(isotopy, layout, knots, overlap, tube_margin, **fit_kwargs)
        triplet = euler_control(theta, layout.zone) if mode == "euler" else darcy_control(theta, layout.op.A, layout.zone)
        rep = verify_control(triplet, isotopy, table_n=table_n, exterior_only=exterior_only, check_forcing=False)
        history.append((knots, rep.matching_error))
        if len(history) > 1:
            prev = history[-2][1]
            if abs(rep.matching_error - prev) <= stabilization * prev:
                break
        if rep.matching_error <= floor or 2 * knots > max_knots:
            break
        knots *= 2
    triplet.theta.meta["knot_history"] = history
    return triplet, history
