"""Pseudo-spectral Navier-Stokes solver with Brinkman-penalized holes.

The solver integrates

    a (du/dt + u.grad u) - nu lap u + grad p + (1/kappa) chi u = f,   div u = 0

on the periodic unit box, where ``chi`` is a smoothed indicator of the holes.
``a`` is the inertial prefactor (one except in the scaled Darcy frame).

One step is a symmetric splitting: half a forcing step (integrated exactly in
time with Gauss quadrature), half a viscous step (exact heat semigroup), a
full advection step (SSP-RK3 on the rotational form, 2/3-rule dealiased),
the mirrored viscous and forcing halves, and finally an implicit
penalization step followed by Leray projection.  Every sub-step has an exact
discrete energy balance, which is what the :class:`EnergyLedger` records.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .errors import CFLViolation, NaNDetected, UnresolvedHoles
from .exponents import initial_data_cap, time_exponent
from .geometry import PerforatedDomain
from .spectral import SpectralGrid

log = logging.getLogger(__name__)

Regime = Literal["euler", "darcy"]
FrameKind = Literal["scaled_euler", "scaled_darcy", "unit_viscosity"]
ForcingFn = Callable[[float], np.ndarray]
HoleModel = Literal["penalized", "drag"]

_GAUSS_NODES, _GAUSS_WEIGHTS = np.polynomial.legendre.leggauss(3)


@dataclass
class GridField:
    """Vector field samples ``(3, n, n, n)`` on the collocated grid at one time."""

    data: np.ndarray
    time: float = 0.0

    @property
    def n(self) -> int:
        return self.data.shape[-1]


def leray_project(field: GridField) -> GridField:
    """Divergence-free part of a grid field (spectral Helmholtz split)."""
    grid = SpectralGrid(field.n)
    return GridField(grid.inverse(grid.project_hat(grid.forward(field.data))), field.time)


@dataclass(frozen=True)
class FrameSpec:
    """Which equation is integrated and how it maps to the unit-viscosity frame."""

    regime: Regime
    scaled: bool
    eps: float
    alpha: float
    beta: float

    @property
    def time_exponent(self) -> float:
        return time_exponent(self.regime, self.alpha, self.beta)

    @property
    def kind(self) -> FrameKind:
        if not self.scaled:
            return "unit_viscosity"
        return "scaled_euler" if self.regime == "euler" else "scaled_darcy"

    def coefficients(self) -> tuple[float, float]:
        """``(inertia, viscosity)`` of the integrated equation."""
        if not self.scaled:
            return 1.0, 1.0
        if self.regime == "euler":
            return 1.0, self.eps**self.beta
        return self.eps ** (6 - 2 * self.alpha - 2 * self.beta), self.eps ** (3 - self.alpha)

    @property
    def horizon(self) -> float:
        """End time: 1 in scaled frames, the control horizon in the unit frame."""
        return 1.0 if self.scaled else self.eps**self.time_exponent

    def kappa_from_scaled(self, kappa_scaled: float) -> float:
        """Penalization parameter giving the same discrete dynamics as in the scaled frame."""
        if self.scaled:
            return kappa_scaled
        factor = self.beta if self.regime == "euler" else 3.0 - self.alpha
        return kappa_scaled * self.eps**factor

    def time_from_scaled(self, t: float) -> float:
        return t if self.scaled else t * self.eps**self.time_exponent

    def velocity_from_scaled(self) -> float:
        """Multiplier mapping scaled velocity to this frame's velocity."""
        return 1.0 if self.scaled else self.eps ** (-self.time_exponent)

    def forcing_from_scaled(self) -> float:
        return 1.0 if self.scaled else self.eps ** (-2.0 * self.beta)

    def with_scaled(self, scaled: bool) -> "FrameSpec":
        return FrameSpec(self.regime, scaled, self.eps, self.alpha, self.beta)


@dataclass(frozen=True)
class InitialData:
    """Zero data or a random solenoidal field with a prescribed L2 norm."""

    kind: Literal["zero", "random"] = "zero"
    l2_norm: float = 0.0
    seed: int = 0
    max_mode: int = 4


@dataclass
class SolverConfig:
    """Parameters of one run; coefficients refer to the integrated frame."""

    n: int
    viscosity: float
    dt: float
    T: float = 1.0
    inertia: float = 1.0
    kappa: float = 1e-4
    forcing: ForcingFn | None = None
    initial: InitialData = field(default_factory=InitialData)
    snapshot_every: int = 1
    mask_width: float = 1.0
    cfl_max: float = 1.0
    min_hole_cells: float = 2.0
    enforce_resolution: bool = True
    hole_model: HoleModel = "penalized"
    theorem_check: bool = False
    frame: FrameSpec | None = None
    store_pressure: bool = False
    snapshot_dtype: type = np.float64

    @property
    def n_steps(self) -> int:
        steps = int(round(self.T / self.dt))
        if abs(steps * self.dt - self.T) > 1e-9 * max(self.T, 1.0):
            raise ValueError("T must be an integer multiple of dt")
        return steps

    @classmethod
    def for_frame(
        cls,
        frame: FrameSpec,
        n: int,
        dt_scaled: float,
        kappa_scaled: float = 1e-4,
        **kwargs,
    ) -> "SolverConfig":
        """Frame-consistent configuration: scaled-frame ``dt`` and ``kappa`` are mapped."""
        inertia, viscosity = frame.coefficients()
        return cls(
            n=n,
            viscosity=viscosity,
            inertia=inertia,
            dt=frame.time_from_scaled(dt_scaled),
            T=frame.horizon,
            kappa=frame.kappa_from_scaled(kappa_scaled),
            frame=frame,
            **kwargs,
        )


@dataclass
class EnergyLedger:
    """Per-step energy budget; all quantities carry the inertial prefactor."""

    times: list[float] = field(default_factory=list)
    kinetic: list[float] = field(default_factory=list)
    forcing_work: list[float] = field(default_factory=list)
    dissipation: list[float] = field(default_factory=list)
    penalization: list[float] = field(default_factory=list)
    advection_residual: list[float] = field(default_factory=list)

    def record(self, t: float, kinetic: float, work: float, diss: float, pen: float, adv: float) -> None:
        if not self.times:
            self.times.append(t)
            self.kinetic.append(kinetic)
            for seq in (self.forcing_work, self.dissipation, self.penalization, self.advection_residual):
                seq.append(0.0)
            return
        self.times.append(t)
        self.kinetic.append(kinetic)
        self.forcing_work.append(self.forcing_work[-1] + work)
        self.dissipation.append(self.dissipation[-1] + diss)
        self.penalization.append(self.penalization[-1] + pen)
        self.advection_residual.append(self.advection_residual[-1] + adv)

    def residual(self) -> np.ndarray:
        """``E(t) + D(t) + Pen(t) - W(t) - E(0)``; the inequality asks for <= 0."""
        e = np.asarray(self.kinetic)
        return e + np.asarray(self.dissipation) + np.asarray(self.penalization) - np.asarray(self.forcing_work) - e[0]

    def max_energy(self) -> float:
        return float(max(self.kinetic)) if self.kinetic else 0.0

    def holds(self, rtol: float = 1e-6) -> bool:
        """Discrete energy inequality at every recorded time, up to ``rtol * max E``."""
        if not self.times:
            return True
        scale = max(self.max_energy(), abs(self.forcing_work[-1]), 1e-300)
        return bool(np.all(self.residual() <= rtol * scale)) and min(self.penalization_increments()) >= 0

    def penalization_increments(self) -> np.ndarray:
        p = np.asarray(self.penalization)
        return np.diff(p) if len(p) > 1 else np.zeros(1)

    def as_rows(self) -> list[dict[str, float]]:
        res = self.residual() if self.times else []
        return [
            {
                "t": t,
                "kinetic": k,
                "forcing_work": w,
                "dissipation": d,
                "penalization": p,
                "advection_residual": a,
                "inequality_residual": float(r),
            }
            for t, k, w, d, p, a, r in zip(
                self.times,
                self.kinetic,
                self.forcing_work,
                self.dissipation,
                self.penalization,
                self.advection_residual,
                res,
            )
        ]


@dataclass
class Trajectory:
    """Time sequence of velocity (and optionally pressure/forcing) snapshots."""

    times: np.ndarray
    velocity: list[np.ndarray]
    pressure: list[np.ndarray] | None = None
    forcing: list[np.ndarray] | None = None
    frame: FrameSpec | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.velocity[0].shape[-1]

    def snapshot(self, i: int) -> GridField:
        return GridField(np.asarray(self.velocity[i], dtype=float), float(self.times[i]))


def hole_mask(domain: PerforatedDomain | None, grid: SpectralGrid, width_cells: float = 1.0) -> np.ndarray:
    """Smoothed hole indicator on the grid (zero everywhere without a domain)."""
    if domain is None:
        return np.zeros(grid.shape)
    sd = domain.signed_distance(grid.points.reshape(-1, 3)).reshape(grid.shape)
    if width_cells <= 0:
        return (sd < 0).astype(float)
    return 0.5 * (1.0 - np.tanh(sd / (width_cells * grid.h)))


def drag_mask(domain: PerforatedDomain, grid: SpectralGrid, min_cells: float, width_cells: float = 1.0) -> np.ndarray:
    """Unit-peak bumps of radius ``max(hole radius, min_cells * h)`` around every hole center."""
    radius = max(domain.hole_radius, min_cells * grid.h)
    dist = np.linalg.norm(domain.offset_to_nearest(grid.points.reshape(-1, 3)), axis=-1)
    return (0.5 * (1.0 - np.tanh((dist - radius) / (width_cells * grid.h)))).reshape(grid.shape)


def stokes_drag(domain: PerforatedDomain) -> float:
    """Scalar Stokes drag of one hole per unit viscosity and velocity.

    Balls get ``6 pi r``; ellipsoids use the ball of equal volume.
    """
    shape = domain.spec.shape
    radius = (shape.volume * 3.0 / (4.0 * np.pi)) ** (1.0 / 3.0)
    return 6.0 * np.pi * radius * domain.hole_scale


def drag_kappa(domain: PerforatedDomain, grid: SpectralGrid, mask: np.ndarray, viscosity: float) -> float:
    """Penalization parameter whose integrated force per hole equals the Stokes drag."""
    mask_volume = float(mask.sum()) * grid.h**3 / domain.n_holes
    return mask_volume / (viscosity * stokes_drag(domain))


def fluid_mask(domain: PerforatedDomain | None, grid: SpectralGrid) -> np.ndarray:
    """Indicator of grid nodes lying in the fluid domain."""
    if domain is None:
        return np.ones(grid.shape)
    return domain.contains(grid.points.reshape(-1, 3)).reshape(grid.shape).astype(float)


def check_resolution(domain: PerforatedDomain | None, n: int, min_cells: float = 2.0) -> None:
    if domain is None:
        return
    cells = domain.hole_radius * n
    if cells < min_cells:
        raise UnresolvedHoles(
            f"hole radius spans {cells:.2f} grid cells at n={n}; need {min_cells}"
        )


def random_solenoidal(grid: SpectralGrid, l2_norm: float, seed: int, max_mode: int = 4) -> np.ndarray:
    """Random divergence-free field with low-mode content and the given L2 norm."""
    rng = np.random.default_rng(seed)
    shape = (3,) + grid.k2.shape
    uh = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    kmax = 2 * np.pi * max_mode
    uh *= (grid.k2 <= kmax**2) & (grid.k2 > 0)
    u = grid.inverse(grid.project_hat(uh))
    norm = grid.l2(u)
    return u * (l2_norm / norm) if norm > 0 else u


class NavierStokesStepper:
    """Precomputed operators for repeated steps of one configuration."""

    def __init__(self, cfg: SolverConfig, domain: PerforatedDomain | None):
        self.cfg = cfg
        self.domain = domain
        self.grid = SpectralGrid(cfg.n)
        self.kappa = cfg.kappa
        if cfg.hole_model == "drag" and domain is not None:
            self.mask = drag_mask(domain, self.grid, cfg.min_hole_cells, cfg.mask_width)
            self.kappa = drag_kappa(domain, self.grid, self.mask, cfg.viscosity)
        else:
            if cfg.enforce_resolution:
                check_resolution(domain, cfg.n, cfg.min_hole_cells)
            self.mask = hole_mask(domain, self.grid, cfg.mask_width)
        self.has_holes = domain is not None and bool(np.any(self.mask > 0))
        self.rate = 1.0 / (self.kappa * cfg.inertia)
        self.nu_eff = cfg.viscosity / cfg.inertia
        self.keep = self.grid.dealias.astype(float)
        self._half_heat = np.exp(-self.nu_eff * self.grid.k2 * cfg.dt / 2.0)

    def clean(self, uh: np.ndarray) -> np.ndarray:
        """Project and truncate to the dealiased band."""
        return self.grid.project_hat(uh) * self.keep

    def advection(self, uh: np.ndarray) -> tuple[np.ndarray, float]:
        g = self.grid
        u = g.inverse(uh)
        w = g.inverse(g.curl_hat(uh))
        cross = np.stack(
            [w[1] * u[2] - w[2] * u[1], w[2] * u[0] - w[0] * u[2], w[0] * u[1] - w[1] * u[0]]
        )
        umax = float(np.sqrt(np.max(np.sum(u * u, axis=0))))
        return -self.clean(g.forward(cross)), umax

    def forcing_increment(self, t0: float, t1: float) -> np.ndarray | None:
        f = self.cfg.forcing
        if f is None:
            return None
        mid, half = 0.5 * (t0 + t1), 0.5 * (t1 - t0)
        total = sum(wq * f(mid + half * xq) for xq, wq in zip(_GAUSS_NODES, _GAUSS_WEIGHTS))
        total = np.asarray(total, dtype=float) * (half / self.cfg.inertia)
        if not np.any(total):
            return None
        return self.clean(self.grid.forward(total))

    def step(self, uh: np.ndarray, t: float) -> tuple[np.ndarray, dict[str, float]]:
        g, cfg, dt = self.grid, self.cfg, self.cfg.dt
        a = cfg.inertia
        work = diss = pen = 0.0

        def force(uh, t0, t1):
            nonlocal work
            inc = self.forcing_increment(t0, t1)
            if inc is None:
                return uh
            work += a * (g.inner_hat(uh, inc) + 0.5 * g.inner_hat(inc, inc))
            return uh + inc

        def heat(uh):
            nonlocal diss
            e0 = g.energy_hat(uh)
            out = uh * self._half_heat
            diss += a * (e0 - g.energy_hat(out))
            return out

        uh = force(uh, t, t + dt / 2)
        uh = heat(uh)
        e_before = g.energy_hat(uh)
        k1, umax = self.advection(uh)
        if umax * dt * cfg.n > cfg.cfl_max:
            raise CFLViolation(f"CFL number {umax * dt * cfg.n:.3f} exceeds {cfg.cfl_max}")
        u1 = uh + dt * k1
        k2, _ = self.advection(u1)
        u2 = 0.75 * uh + 0.25 * (u1 + dt * k2)
        k3, _ = self.advection(u2)
        uh = uh / 3.0 + 2.0 / 3.0 * (u2 + dt * k3)
        adv = a * (g.energy_hat(uh) - e_before)
        uh = heat(uh)
        uh = force(uh, t + dt / 2, t + dt)
        if self.has_holes:
            e0 = g.energy_hat(uh)
            u = g.inverse(uh) / (1.0 + dt * self.rate * self.mask)
            uh = self.clean(g.forward(u))
            pen = a * (e0 - g.energy_hat(uh))
        energy = g.energy_hat(uh)
        if not np.isfinite(energy):
            raise NaNDetected(f"non-finite energy at t={t + dt:.6g}")
        return uh, {"work": work, "diss": diss, "pen": pen, "adv": adv, "umax": umax}

    def pressure(self, uh: np.ndarray, t: float) -> np.ndarray:
        """Pressure solving the momentum balance for the given velocity."""
        g, cfg = self.grid, self.cfg
        u = g.inverse(uh)
        jac = np.stack([g.inverse(g.gradient_hat(uh[i])) for i in range(3)])
        conv = np.einsum("jxyz,ijxyz->ixyz", u, jac)
        rhs = -cfg.inertia * conv - (1.0 / self.kappa) * self.mask * u
        if cfg.forcing is not None:
            rhs = rhs + cfg.forcing(t)
        rh = g.forward(rhs)
        kx, ky, kz = g.k_deriv
        ph = -1j * (kx * rh[0] + ky * rh[1] + kz * rh[2]) * g.inv_kd2
        return g.inverse(ph)


def initial_field(cfg: SolverConfig, domain: PerforatedDomain | None, grid: SpectralGrid) -> np.ndarray:
    init = cfg.initial
    if init.kind == "zero" or init.l2_norm == 0.0:
        return np.zeros((3,) + grid.shape)
    norm = init.l2_norm
    if cfg.theorem_check and cfg.frame is not None:
        fr = cfg.frame
        cap = initial_data_cap(fr.regime, fr.alpha, fr.beta, fr.eps)
        if fr.scaled:
            cap *= fr.eps**fr.time_exponent
        if norm > cap:
            log.info("initial L2 norm %.6g clamped to theorem cap %.6g", norm, cap)
            norm = cap
    u = random_solenoidal(grid, 1.0, init.seed, init.max_mode)
    weight = fluid_mask(domain, grid)
    measured = grid.l2(u, weight)
    return u * (norm / measured)


def step_ns(state: GridField, cfg: SolverConfig, domain: PerforatedDomain | None, t: float) -> GridField:
    """Advance ``state`` by one step of size ``cfg.dt`` starting at time ``t``."""
    stepper = NavierStokesStepper(cfg, domain)
    g = stepper.grid
    uh = stepper.clean(g.forward(state.data))
    uh, _ = stepper.step(uh, t)
    return GridField(g.inverse(uh), t + cfg.dt)


def run_ns(
    cfg: SolverConfig,
    domain: PerforatedDomain | None,
    control=None,
    frame: FrameKind | None = None,
) -> tuple[Trajectory, EnergyLedger]:
    """Integrate over ``[0, cfg.T]`` and return snapshots plus the energy ledger.

    ``control`` may be any object exposing ``forcing_on_grid(t, n)`` in the
    scaled frame; it is mapped to ``cfg.frame`` automatically.  ``frame``, if
    given, must agree with ``cfg.frame``.
    """
    if frame is not None and cfg.frame is not None and cfg.frame.kind != frame:
        raise ValueError(f"config frame {cfg.frame.kind} does not match requested {frame}")
    if control is not None and cfg.forcing is None:
        cfg.forcing = frame_forcing(control, cfg.frame, cfg.n)
    stepper = NavierStokesStepper(cfg, domain)
    g = stepper.grid
    u0 = initial_field(cfg, domain, g)
    uh = stepper.clean(g.forward(u0))
    ledger = EnergyLedger()
    ledger.record(0.0, cfg.inertia * g.energy_hat(uh), 0.0, 0.0, 0.0, 0.0)
    times, vel, pres = [0.0], [g.inverse(uh).astype(cfg.snapshot_dtype)], []
    if cfg.store_pressure:
        pres.append(stepper.pressure(uh, 0.0))
    t = 0.0
    umax_seen = 0.0
    for i in range(cfg.n_steps):
        uh, info = stepper.step(uh, t)
        t = (i + 1) * cfg.dt
        umax_seen = max(umax_seen, info["umax"])
        ledger.record(t, cfg.inertia * g.energy_hat(uh), info["work"], info["diss"], info["pen"], info["adv"])
        if (i + 1) % cfg.snapshot_every == 0 or i + 1 == cfg.n_steps:
            times.append(t)
            vel.append(g.inverse(uh).astype(cfg.snapshot_dtype))
            if cfg.store_pressure:
                pres.append(stepper.pressure(uh, t))
    forcing = None
    if cfg.forcing is not None:
        forcing = [np.asarray(cfg.forcing(tt)) for tt in times] if cfg.store_pressure else None
    traj = Trajectory(
        np.asarray(times),
        vel,
        pres if cfg.store_pressure else None,
        forcing,
        cfg.frame,
        {"umax": umax_seen, "energy_inequality": ledger.holds(), "kappa": stepper.kappa, "hole_model": cfg.hole_model},
    )
    return traj, ledger


class FrameForcing:
    """Scaled-frame control forcing expressed in another frame."""

    def __init__(self, control, frame: FrameSpec | None, n: int):
        self.control = control
        self.frame = frame
        self.n = n

    def __call__(self, t: float) -> np.ndarray:
        fr = self.frame
        if fr is None or fr.scaled:
            return self.control.forcing_on_grid(t, self.n)
        tau = t / fr.eps**fr.time_exponent
        return fr.forcing_from_scaled() * self.control.forcing_on_grid(tau, self.n)


def frame_forcing(control, frame: FrameSpec | None, n: int) -> ForcingFn:
    return FrameForcing(control, frame, n)


def apply_scaling(
    traj: Trajectory,
    mode: Regime,
    eps: float,
    direction: Literal["to_unit", "to_scaled"],
    alpha: float | None = None,
    beta: float = 1.0,
) -> Trajectory:
    """Exact rescaling of a trajectory between the scaled and unit frames.

    Velocities scale by ``eps^-g``, pressures and forcings by ``eps^(-2 beta)``
    and times by ``eps^g``, where ``g = beta`` (Euler) or ``alpha + 2 beta - 3``
    (Darcy).
    """
    if mode == "darcy" and alpha is None:
        raise ValueError("darcy scaling needs alpha")
    g = time_exponent(mode, alpha if alpha is not None else 0.0, beta)
    sign = 1.0 if direction == "to_unit" else -1.0
    tfac = eps ** (sign * g)
    vfac = eps ** (-sign * g)
    pfac = eps ** (-sign * 2.0 * beta)
    frame = None
    if traj.frame is not None:
        frame = traj.frame.with_scaled(direction == "to_scaled")
    return Trajectory(
        np.asarray(traj.times) * tfac,
        [v * vfac for v in traj.velocity],
        None if traj.pressure is None else [p * pfac for p in traj.pressure],
        None if traj.forcing is None else [f * pfac for f in traj.forcing],
        frame,
        dict(traj.meta),
    )
