import numpy as np
import pytest

from perfcontrol.errors import CFLViolation, UnresolvedHoles
from perfcontrol.geometry import DomainSpec, build_perforated_domain
from perfcontrol.ns_solver import (
    FrameSpec,
    GridField,
    InitialData,
    NavierStokesStepper,
    SolverConfig,
    Trajectory,
    apply_scaling,
    hole_mask,
    run_ns,
    step_ns,
)
from perfcontrol.spectral import SpectralGrid


def taylor_green(n: int, amp: float = 1.0) -> np.ndarray:
    g = SpectralGrid(n)
    x, y = g.points[..., 0], g.points[..., 1]
    k = 2 * np.pi
    return amp * np.stack([np.cos(k * x) * np.sin(k * y), -np.sin(k * x) * np.cos(k * y), 0 * x])


class BumpControl:
    """Smooth localized forcing in the scaled frame, vanishing at t=0 and t=1."""

    def __init__(self, center=(0.7, 0.7, 0.7), radius=0.15, amp=2.0):
        self.center = np.asarray(center)
        self.radius = radius
        self.amp = amp
        self._cache = {}

    def profile(self, n):
        if n not in self._cache:
            g = SpectralGrid(n)
            d = g.points - self.center
            d -= np.round(d)
            r2 = np.sum(d**2, axis=-1) / self.radius**2
            bump = np.where(r2 < 1, (1 - r2) ** 4, 0.0)
            self._cache[n] = np.stack([bump, 0.5 * bump, -bump])
        return self._cache[n]

    def forcing_on_grid(self, t, n):
        return self.amp * np.sin(np.pi * t) ** 2 * self.profile(n)


def full_domain():
    return build_perforated_domain(DomainSpec("full", N=2, alpha=1.1))


def test_zero_stays_zero():
    cfg = SolverConfig(n=16, viscosity=0.1, dt=0.01, T=0.05, enforce_resolution=False)
    out = step_ns(GridField(np.zeros((3, 16, 16, 16))), cfg, full_domain(), 0.0)
    assert not np.any(out.data)
    traj, ledger = run_ns(cfg, None)
    assert all(not np.any(v) for v in traj.velocity)
    assert max(ledger.kinetic) == 0.0


def test_taylor_green_viscous_decay():
    n, nu, dt = 64, 0.01, 2e-3
    cfg = SolverConfig(n=n, viscosity=nu, dt=dt, T=100 * dt)
    state = GridField(taylor_green(n))
    g = SpectralGrid(n)
    e0 = 0.5 * np.mean(np.sum(state.data**2, axis=0))
    t = 0.0
    for _ in range(100):
        state = step_ns(state, cfg, None, t)
        t += dt
    e = 0.5 * np.mean(np.sum(state.data**2, axis=0))
    exact = e0 * np.exp(-4 * nu * (2 * np.pi) ** 2 * t)
    assert abs(e - exact) <= 0.01 * exact
    assert e0 == pytest.approx(0.25, rel=1e-12)
    assert g.n == n


def _hole_residual(kappa):
    n = 64
    dom = full_domain()
    g = SpectralGrid(n)
    cfg = SolverConfig(n=n, viscosity=0.02, dt=1e-3, T=50e-3, kappa=kappa)
    from perfcontrol.ns_solver import NavierStokesStepper

    stepper = NavierStokesStepper(cfg, dom)
    uh = stepper.clean(g.forward(taylor_green(n)))
    for i in range(50):
        uh, _ = stepper.step(uh, i * cfg.dt)
    u = g.inverse(uh)
    speed = np.sqrt(np.sum(u**2, axis=0))
    sd = dom.signed_distance(g.points.reshape(-1, 3)).reshape(g.shape)
    interior = sd < -1.0 * g.h
    assert interior.sum() > 0
    return float(speed[interior].max()), float(speed.max())


def test_penalization_residual_and_refinement():
    kappa = 1e-3
    r1, umax1 = _hole_residual(kappa)
    r2, umax2 = _hole_residual(kappa / 2)
    assert r1 <= 10 * np.sqrt(kappa) * umax1
    assert r2 <= 10 * np.sqrt(kappa / 2) * umax2
    ratio = (r1 / umax1) / (r2 / umax2)
    assert 1.0 <= ratio <= 4.0


def test_energy_inequality_forced_run():
    frame = FrameSpec("euler", True, 0.5, 2.0, 1.0)
    cfg = SolverConfig.for_frame(
        frame, n=64, dt_scaled=0.01, kappa_scaled=1e-3,
        initial=InitialData("random", 0.05, seed=2), enforce_resolution=False,
    )
    dom = build_perforated_domain(DomainSpec("partial", N=2, alpha=2.0, L=0.5))
    traj, ledger = run_ns(cfg, dom, BumpControl(), "scaled_euler")
    assert ledger.max_energy() > 0
    assert np.max(ledger.residual()) <= 1e-6 * ledger.max_energy()
    assert ledger.holds()
    assert np.all(np.diff(ledger.penalization) >= 0)
    assert np.all(np.diff(ledger.dissipation) >= 0)
    assert traj.times[-1] == pytest.approx(1.0)


@pytest.mark.parametrize("regime,alpha,beta", [("euler", 1.55, 1.5), ("darcy", 1.2, 0.5)])
def test_scaled_and_unit_frames_agree(regime, alpha, beta):
    eps, n = 0.5, 48
    if regime == "euler":
        dom = build_perforated_domain(DomainSpec("partial", N=1, alpha=alpha, L=eps))
    else:
        dom = build_perforated_domain(DomainSpec("full", N=2, alpha=alpha))
    control = BumpControl()
    runs = {}
    for scaled in (True, False):
        frame = FrameSpec(regime, scaled, eps, alpha, beta)
        cfg = SolverConfig.for_frame(
            frame, n=n, dt_scaled=0.02, kappa_scaled=1e-2, snapshot_every=10,
            initial=InitialData("random", 0.1 * frame.velocity_from_scaled(), seed=5),
        )
        runs[scaled], _ = run_ns(cfg, dom, control)
    mapped = apply_scaling(runs[True], regime, eps, "to_unit", alpha=alpha, beta=beta)
    unit = runs[False]
    assert np.allclose(mapped.times, unit.times, rtol=1e-12)
    for a, b in zip(mapped.velocity[1:], unit.velocity[1:]):
        assert np.linalg.norm(a - b) <= 2e-2 * np.linalg.norm(b)


def test_apply_scaling_round_trip_and_formula():
    rng = np.random.default_rng(0)
    traj = Trajectory(
        np.linspace(0, 1, 3),
        [rng.standard_normal((3, 4, 4, 4)) for _ in range(3)],
        [rng.standard_normal((4, 4, 4)) for _ in range(3)],
        [rng.standard_normal((3, 4, 4, 4)) for _ in range(3)],
    )
    unit = apply_scaling(traj, "euler", 0.5, "to_unit", beta=1.0)
    assert np.allclose(unit.times, traj.times / 2, rtol=0, atol=0)
    assert np.array_equal(unit.velocity[1], 2 * traj.velocity[1])
    assert np.array_equal(unit.pressure[2], 4 * traj.pressure[2])
    back = apply_scaling(unit, "euler", 0.5, "to_scaled", beta=1.0)
    for a, b in zip(back.velocity + back.pressure + back.forcing, traj.velocity + traj.pressure + traj.forcing):
        assert np.max(np.abs(a - b)) <= 1e-14 * np.max(np.abs(b))
    d = apply_scaling(traj, "darcy", 1 / 3, "to_unit", alpha=1.5, beta=0.6)
    back = apply_scaling(d, "darcy", 1 / 3, "to_scaled", alpha=1.5, beta=0.6)
    assert np.max(np.abs(back.times - traj.times)) <= 1e-14
    assert np.max(np.abs(back.velocity[2] - traj.velocity[2])) <= 1e-14 * np.max(np.abs(traj.velocity[2]))


def test_cfl_and_resolution_errors():
    cfg = SolverConfig(n=16, viscosity=0.0, dt=1.0, T=1.0)
    with pytest.raises(CFLViolation):
        step_ns(GridField(taylor_green(16)), cfg, None, 0.0)
    deep = build_perforated_domain(DomainSpec("full", N=4, alpha=2.5))
    with pytest.raises(UnresolvedHoles):
        run_ns(SolverConfig(n=16, viscosity=1.0, dt=0.1, T=0.1), deep)


def test_theorem_clamp_limits_initial_norm(caplog):
    frame = FrameSpec("euler", False, 0.5, 2.2, 1.0)
    cfg = SolverConfig.for_frame(
        frame, n=16, dt_scaled=0.25, initial=InitialData("random", 100.0, seed=1),
        theorem_check=True, enforce_resolution=False,
    )
    with caplog.at_level("INFO"):
        traj, _ = run_ns(cfg, None)
    g = SpectralGrid(16)
    cap = 0.5 ** (min(0.2, 0.7, 1.0) - 1.0)
    assert g.l2(traj.velocity[0]) == pytest.approx(cap, rel=1e-10)
    assert "clamped" in caplog.text


def test_hole_mask_range():
    g = SpectralGrid(32)
    m = hole_mask(full_domain(), g)
    assert m.min() >= 0 and m.max() <= 1 and m.max() > 0.9


def test_drag_model_force_matches_stokes_drag():
    dom = build_perforated_domain(DomainSpec("full", 4, 1.8))
    n, nu, dt, speed = 32, 0.1, 1e-6, 0.5
    cfg = SolverConfig(n=n, viscosity=nu, dt=dt, T=dt, hole_model="drag")
    stepper = NavierStokesStepper(cfg, dom)
    g = stepper.grid
    u = np.zeros((3,) + g.shape)
    u[0] = speed
    _, info = stepper.step(g.forward(u), 0.0)
    expected = dom.n_holes * 6 * np.pi * dom.hole_radius * nu * speed**2
    assert info["pen"] / dt == pytest.approx(expected, rel=1e-3)


def test_drag_model_skips_resolution_check():
    dom = build_perforated_domain(DomainSpec("full", 4, 2.5))
    with pytest.raises(UnresolvedHoles):
        NavierStokesStepper(SolverConfig(n=16, viscosity=1.0, dt=1e-3), dom)
    stepper = NavierStokesStepper(SolverConfig(n=16, viscosity=1.0, dt=1e-3, hole_model="drag"), dom)
    assert stepper.mask.max() <= 1.0 and stepper.kappa > 0
