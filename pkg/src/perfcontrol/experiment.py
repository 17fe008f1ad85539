"""Epsilon sweeps: limit control, scaled Navier-Stokes runs, errors and rate fits."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy import stats

from .control import ControlTriplet, darcy_control, euler_control, synthesize_control
from .errors import IOFailure, PerfControlError
from .exponents import Exponents, initial_data_cap, time_exponent
from .geometry import (
    ControlZone,
    DomainSpec,
    ParticleShape,
    Patch,
    PerforatedDomain,
    build_perforated_domain,
    snap_epsilon,
)
from .greens import EllipticOperator
from .homogenization import resistance_matrix
from .io import write_csv
from .ns_solver import FrameSpec, InitialData, SolverConfig, Trajectory, fluid_mask, run_ns
from .spectral import SpectralGrid

log = logging.getLogger(__name__)

Regime = Literal["euler", "darcy"]


@dataclass(frozen=True)
class ControlSpec:
    """Limit control recipe.

    ``dipole``: one source/sink pair of blob charges inside the zone with a
    single ramped snapshot.  ``isotopy``: the patch-transport control fitted
    along a translation of ``P0`` to ``P1``.
    """

    kind: Literal["dipole", "isotopy"] = "dipole"
    zone_center: tuple[float, float, float] = (0.5, 0.5, 0.5)
    zone_radius: float = 0.25
    strength: float = 0.02
    separation: float = 0.08
    blob_radius: float = 0.15
    axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    P0_center: tuple[float, float, float] = (0.2, 0.15, 0.5)
    P1_center: tuple[float, float, float] = (0.8, 0.15, 0.5)
    patch_radius: float = 0.05
    charges: int = 64
    charge_radius: float = 0.6
    regularization: float = 1e-8
    tube_margin: float = 0.05
    start_knots: int = 3
    max_knots: int = 12

    @property
    def zone(self) -> ControlZone:
        return ControlZone(self.zone_center, self.zone_radius)


@dataclass(frozen=True)
class FlowSpec:
    """Lagrangian diagnostics on one patch: defect, discrepancy, clearance."""

    P0_center: tuple[float, float, float]
    P1_center: tuple[float, float, float] | None = None
    radius: float = 0.05
    samples: int = 20000
    steps: int = 100
    eta: float = 0.01
    boundary_samples: int = 400
    limit_table: int | None = 64

    @property
    def P0(self) -> Patch:
        return Patch.ball(self.P0_center, self.radius)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one sweep."""

    regime: Regime = "euler"
    domain_mode: Literal["partial", "full"] = "full"
    N_values: tuple[int, ...] = (2, 3, 4)
    alpha: float = 1.8
    beta: float = 1.5
    L: float = 1.0
    K_origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    particle_radius: float = 0.125
    n: int = 64
    steps: int = 160
    snapshot_every: int = 8
    hole_model: Literal["penalized", "drag"] = "drag"
    kappa_scaled: float = 1e-4
    initial_norm: float = 0.0
    theorem_check: bool = False
    seed: int = 0
    control: ControlSpec = field(default_factory=ControlSpec)
    flow: FlowSpec | None = None
    workers: int = 1

    @property
    def exponents(self) -> Exponents:
        return Exponents(self.alpha, self.beta)

    def eps_values(self) -> list[float]:
        return [snap_epsilon(self.L / N, self.L) for N in self.N_values]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        if "control" in data and isinstance(data["control"], dict):
            data["control"] = ControlSpec(**_tuples(data["control"]))
        if data.get("flow") is not None and isinstance(data["flow"], dict):
            data["flow"] = FlowSpec(**_tuples(data["flow"]))
        return cls(**_tuples(data))

    def to_dict(self) -> dict:
        return asdict(self)


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


# ---------------------------------------------------------------- limit control

def scaled_resistance(particle_radius: float) -> np.ndarray:
    """Darcy coefficient ``6 pi r`` of the scaled frame for ball particles."""
    return resistance_matrix(ParticleShape.ball(particle_radius), "analytic_ball").entries


def dipole_control(spec: ControlSpec, regime: Regime, A: np.ndarray | None = None) -> ControlTriplet:
    """Source/sink pair along ``spec.axis`` with one ramped snapshot."""
    from .potential import ChargeLayout, PotentialSnapshot, assemble_theta

    zone = spec.zone
    axis = np.asarray(spec.axis, dtype=float)
    axis /= np.linalg.norm(axis)
    pts = np.asarray(zone.center) + spec.separation * np.stack([axis, -axis])
    if regime == "euler":
        op = EllipticOperator.laplace()
    else:
        op = EllipticOperator.a_harmonic(A)
    # blob radius is measured in the A-metric
    layout = ChargeLayout(pts, spec.blob_radius * math.sqrt(op.eig_A[0]), op, zone)
    layout.check()
    weights = spec.strength * np.array([1.0, -1.0])
    theta = assemble_theta([PotentialSnapshot(0.5, weights, layout, 0.0, 1.0, 1.0)])
    if regime == "euler":
        return euler_control(theta, zone)
    return darcy_control(theta, op.A, zone)


def build_control(spec: ControlSpec, regime: Regime, A: np.ndarray | None = None) -> ControlTriplet:
    if spec.kind == "dipole":
        return dipole_control(spec, regime, A)
    from .isotopy import build_isotopy
    from .potential import ChargeLayout

    zone = spec.zone
    P0 = Patch.ball(spec.P0_center, spec.patch_radius)
    P1 = Patch.ball(spec.P1_center, spec.patch_radius)
    iso = build_isotopy(P0, P1, None, zone)
    op = EllipticOperator.laplace() if regime == "euler" else EllipticOperator.a_harmonic(A)
    layout = ChargeLayout.on_sphere(zone, spec.charges, spec.charge_radius, op)
    triplet, _ = synthesize_control(
        iso,
        layout,
        regime,
        start_knots=spec.start_knots,
        max_knots=spec.max_knots,
        tube_margin=spec.tube_margin,
        regularization=spec.regularization,
        raise_on_residual=False,
    )
    return triplet


# ---------------------------------------------------------------- results

@dataclass
class SweepRow:
    eps: float
    N: int
    n: int
    field_error: float = math.nan
    field_error_sup: float = math.nan
    field_error_time: float = math.nan
    limit_norm: float = math.nan
    flow_error: float = math.nan
    defect: float = math.nan
    defect_half_width: float = math.nan
    limit_defect: float = math.nan
    discrepancy: float = math.nan
    exceedance: float = math.nan
    hole_volume: float = math.nan
    decomposition_holds: bool | None = None
    exceedance_bound_holds: bool | None = None
    clearance: float = math.nan
    poincare_ratio: float = math.nan
    kappa: float = math.nan
    initial_norm: float = 0.0
    admissible: bool = False
    initial_within_cap: bool = True
    energy_ok: bool = False
    note: str = ""

    def as_row(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RateFit:
    """Least-squares fit ``log error = rate * log eps + c`` with a 95% interval."""

    rate: float
    intercept: float
    ci_low: float
    ci_high: float
    points: int
    status: str

    @property
    def excludes_zero(self) -> bool:
        return self.status == "ok" and (self.ci_low > 0 or self.ci_high < 0)


def fit_rate(eps: Sequence[float], errors: Sequence[float], level: float = 0.95) -> RateFit:
    """Log-log regression of errors against eps; the rate is positive when errors shrink with eps."""
    eps = np.asarray(eps, dtype=float)
    err = np.asarray(errors, dtype=float)
    ok = np.isfinite(err) & (err > 0) & (eps > 0)
    x, y = np.log(eps[ok]), np.log(err[ok])
    m = len(x)
    if m < 2 or np.ptp(x) == 0:
        return RateFit(math.nan, math.nan, math.nan, math.nan, m, "insufficient points")
    res = stats.linregress(x, y)
    if m == 2:
        return RateFit(res.slope, res.intercept, -math.inf, math.inf, m, "no interval")
    tq = stats.t.ppf(0.5 + level / 2, m - 2)
    half = tq * res.stderr
    return RateFit(res.slope, res.intercept, res.slope - half, res.slope + half, m, "ok")


@dataclass
class SweepResult:
    config: ExperimentConfig
    rows: list[SweepRow]
    fit: RateFit
    reference_rate: float
    runtime: float = 0.0
    clearance_curves: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def strictly_decreasing(self, name: str = "field_error") -> bool:
        """Errors shrink strictly along the sweep (rows are ordered by decreasing eps)."""
        vals = self.column(name)
        return bool(np.all(np.isfinite(vals)) and np.all(np.diff(vals) < 0))


# ---------------------------------------------------------------- one sweep point

def _frame(cfg: ExperimentConfig, eps: float) -> FrameSpec:
    return FrameSpec(cfg.regime, True, eps, cfg.alpha, cfg.beta)


def _weighted_l2(grid: SpectralGrid, u: np.ndarray, weight: np.ndarray) -> float:
    return grid.l2(u, weight)


def _time_l2(times: np.ndarray, values: np.ndarray) -> float:
    return float(np.sqrt(np.trapezoid(np.square(values), times)))


def run_point(cfg: ExperimentConfig, N: int, control: ControlTriplet | None = None,
              keep_trajectory: bool = False):
    """Run one sweep point; returns ``(row, trajectory or None, clearance curve)``."""
    eps = snap_epsilon(cfg.L / N, cfg.L)
    row = SweepRow(eps=eps, N=N, n=cfg.n)
    ex = cfg.exponents
    row.admissible = ex.admissible(cfg.regime)
    curve = None
    try:
        spec = DomainSpec(cfg.domain_mode, N, cfg.alpha, L=cfg.L,
                          shape=ParticleShape.ball(cfg.particle_radius), K_origin=cfg.K_origin,
                          rng_seed=cfg.seed)
        domain = build_perforated_domain(spec)
        if control is None:
            A = scaled_resistance(cfg.particle_radius) if cfg.regime == "darcy" else None
            control = build_control(cfg.control, cfg.regime, A)
        frame = _frame(cfg, eps)
        initial = InitialData("random" if cfg.initial_norm > 0 else "zero", cfg.initial_norm, cfg.seed)
        solver = SolverConfig.for_frame(
            frame, cfg.n, 1.0 / cfg.steps, cfg.kappa_scaled,
            hole_model=cfg.hole_model, initial=initial, snapshot_every=cfg.snapshot_every,
            theorem_check=cfg.theorem_check,
        )
        if cfg.initial_norm > 0:
            cap = initial_data_cap(cfg.regime, cfg.alpha, cfg.beta, eps) * eps ** time_exponent(cfg.regime, cfg.alpha, cfg.beta)
            row.initial_norm = min(cfg.initial_norm, cap) if cfg.theorem_check else cfg.initial_norm
            row.initial_within_cap = row.initial_norm <= cap * (1 + 1e-12)
        traj, ledger = run_ns(solver, domain, control)
        row.energy_ok = bool(ledger.holds())
        row.kappa = float(traj.meta["kappa"])
        _field_errors(row, cfg, traj, control, domain)
        if cfg.flow is not None:
            curve = _flow_diagnostics(row, cfg, traj, control, domain)
        if not keep_trajectory:
            traj = None
        return row, traj, curve
    except PerfControlError as exc:
        row.note = f"{type(exc).__name__}: {exc}"
        log.warning("sweep point N=%d failed: %s", N, row.note)
        return row, None, curve


def _field_errors(row: SweepRow, cfg: ExperimentConfig, traj: Trajectory,
                  control: ControlTriplet, domain: PerforatedDomain) -> None:
    grid = SpectralGrid(cfg.n)
    weight = fluid_mask(domain, grid)
    times = np.asarray(traj.times)
    errs, norms, grads = [], [], []
    for t, u in zip(times, traj.velocity):
        limit = control.velocity_on_grid(float(t), cfg.n)
        u = np.asarray(u, dtype=float)
        errs.append(_weighted_l2(grid, u - limit, weight))
        norms.append(_weighted_l2(grid, u, weight))
        uh = grid.forward(u)
        grads.append(math.sqrt(grid.gradient_norm_sq_hat(uh)))
        row.limit_norm = max(row.limit_norm if math.isfinite(row.limit_norm) else 0.0,
                             _weighted_l2(grid, limit, weight))
    errs = np.array(errs)
    row.field_error_sup = float(errs.max())
    row.field_error_time = _time_l2(times, errs)
    row.field_error = float(errs[-1]) if cfg.regime == "euler" else row.field_error_time
    denom = _time_l2(times, np.array(grads))
    row.poincare_ratio = _time_l2(times, np.array(norms)) / denom if denom > 0 else math.nan


def _flow_diagnostics(row: SweepRow, cfg: ExperimentConfig, traj: Trajectory,
                      control: ControlTriplet, domain: PerforatedDomain):
    from .flowmap import advect, exact_limit_velocity, measure_defect, tabulated_limit_velocity, trajectory_velocity

    fs = cfg.flow
    ns_velocity = trajectory_velocity(traj)
    # tricubic tables are far cheaper than pointwise Green's sums for large ensembles
    if fs.limit_table:
        limit = tabulated_limit_velocity(control, fs.limit_table)
    else:
        limit = exact_limit_velocity(control)
    P0 = fs.P0
    if fs.P1_center is None:
        center = advect(np.asarray(P0.center)[None], limit, (0.0, 1.0), fs.steps)[0]
        P1 = Patch.ball(center, fs.radius)
    else:
        P1 = Patch.ball(fs.P1_center, fs.radius)
    rep = measure_defect(ns_velocity, P0, P1, 1.0, fs.samples, fs.steps, domain, cfg.seed,
                         limit_velocity=limit, eta=fs.eta)
    row.defect = rep.measure_estimate.value
    row.defect_half_width = rep.half_width
    row.limit_defect = rep.limit_defect.value
    row.discrepancy = rep.discrepancy.value
    row.exceedance = rep.exceedance.value
    row.hole_volume = rep.hole_volume
    row.flow_error = rep.L2_flow_distance if rep.L2_flow_distance is not None else math.nan
    row.decomposition_holds = rep.decomposition_holds(3.0)
    row.exceedance_bound_holds = bool(rep.measure_estimate.value <= exceedance_bound(rep))
    gamma0, _ = P0.boundary_samples(fs.boundary_samples)
    hist = advect(gamma0, ns_velocity, (0.0, 1.0), fs.steps, record=True)
    dist = np.array([control.zone.distance(h).min() for h in hist])
    row.clearance = float(dist.min())
    return np.stack([np.linspace(0.0, 1.0, fs.steps + 1), dist])


def exceedance_bound(rep, widths: float = 3.0) -> float:
    """Limit defect + hole volume + exceedance of ``|Phi - phi_L| > eta`` + ``widths`` half-widths."""
    hw = rep.measure_estimate.half_width + rep.limit_defect.half_width + rep.exceedance.half_width
    return rep.limit_defect.value + (rep.hole_volume or 0.0) + rep.exceedance.value + widths * hw


def run_sweep(cfg: ExperimentConfig) -> SweepResult:
    """Run every sweep point (sorted by decreasing eps) and fit the error rate."""
    start = time.perf_counter()
    Ns = sorted(set(cfg.N_values), key=lambda N: -cfg.L / N)
    A = scaled_resistance(cfg.particle_radius) if cfg.regime == "darcy" else None
    outputs = []
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            outputs = list(pool.map(run_point, [cfg] * len(Ns), Ns))
    else:
        control = build_control(cfg.control, cfg.regime, A)
        outputs = [run_point(cfg, N, control) for N in Ns]
    rows = [o[0] for o in outputs]
    curves = {r.N: o[2] for r, o in zip(rows, outputs) if o[2] is not None}
    fit = fit_rate([r.eps for r in rows], [r.field_error for r in rows])
    reference = cfg.exponents.rate(cfg.regime)
    return SweepResult(cfg, rows, fit, reference, time.perf_counter() - start, curves)


# ---------------------------------------------------------------- reports

def poincare_spread(result: SweepResult) -> float:
    """max/min over the sweep of ``ratio / eps^((3 - alpha)/2)``."""
    p = (3.0 - result.config.alpha) / 2.0
    scaled = result.column("poincare_ratio") / result.column("eps") ** p
    return float(scaled.max() / scaled.min())


def _hypothesis_text(row: SweepRow, cfg: ExperimentConfig) -> str:
    theorem = "Euler-limit theorem" if cfg.regime == "euler" else "Darcy-limit theorem"
    flags = [
        f"exponents {'admissible' if row.admissible else 'outside the admissible region'} for the {theorem}",
        f"initial data {'within' if row.initial_within_cap else 'above'} the theorem cap",
        f"energy inequality {'holds' if row.energy_ok else 'violated'}",
    ]
    if row.note:
        flags.append(f"failed: {row.note}")
    return f"eps={row.eps:.6g} (N={row.N}): " + "; ".join(flags)


def report(result: SweepResult, out_dir, plots: bool = True) -> dict[str, Path]:
    """Write CSV tables, a text summary and (optionally) plots; returns the paths."""
    if not result.rows:
        raise ValueError("cannot report an empty sweep")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {out}: {exc}") from exc
    paths = {"rows": write_csv(out / "sweep.csv", [r.as_row() for r in result.rows])}
    fit = result.fit
    paths["fit"] = write_csv(out / "fit.csv", [{
        "rate": fit.rate, "ci_low": fit.ci_low, "ci_high": fit.ci_high, "points": fit.points,
        "status": fit.status, "reference_rate": result.reference_rate,
    }])
    lines = [
        f"regime: {result.config.regime}, alpha={result.config.alpha}, beta={result.config.beta}",
        f"fitted rate: {fit.rate:.4g} [{fit.ci_low:.4g}, {fit.ci_high:.4g}] ({fit.status})",
        f"reference rate: {result.reference_rate:.4g}",
        f"strictly decreasing field error: {result.strictly_decreasing()}",
    ]
    lines += [_hypothesis_text(r, result.config) for r in result.rows]
    paths["summary"] = out / "summary.txt"
    try:
        paths["summary"].write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IOFailure(f"cannot write summary: {exc}") from exc
    if plots and len(result.rows) > 1:
        paths.update(_plots(result, out))
    return paths


def _plots(result: SweepResult, out: Path) -> dict[str, Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    eps = result.column("eps")
    err = result.column("field_error")
    paths = {}
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(eps, err, "o-", label="field error")
    fit = result.fit
    if math.isfinite(fit.rate):
        ax.loglog(eps, np.exp(fit.intercept) * eps**fit.rate, "--", label=f"fit, rate {fit.rate:.3g}")
    ref = result.reference_rate
    ax.loglog(eps, err[0] * (eps / eps[0]) ** ref, ":", label=f"reference slope {ref:.3g}")
    ax.set_xlabel("eps")
    ax.set_ylabel("L2 error")
    ax.legend()
    paths["error_plot"] = out / "error_vs_eps.png"
    fig.savefig(paths["error_plot"], dpi=100)
    plt.close(fig)

    defect = result.column("defect")
    if np.any(np.isfinite(defect)):
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.plot(eps, defect, "o-")
        ax.set_xlabel("eps")
        ax.set_ylabel("defect measure")
        paths["defect_plot"] = out / "defect_vs_eps.png"
        fig.savefig(paths["defect_plot"], dpi=100)
        plt.close(fig)
    if result.clearance_curves:
        fig, ax = plt.subplots(figsize=(5, 4))
        for N, curve in sorted(result.clearance_curves.items()):
            ax.plot(curve[0], curve[1], label=f"N={N}")
        ax.set_xlabel("t")
        ax.set_ylabel("distance to control zone")
        ax.legend()
        paths["clearance_plot"] = out / "clearance_vs_t.png"
        fig.savefig(paths["clearance_plot"], dpi=100)
        plt.close(fig)
    return paths


def _json_float(x):
    return x if not isinstance(x, float) or math.isfinite(x) else repr(x)


def _from_json_float(x):
    return float(x) if isinstance(x, str) and x in ("nan", "inf", "-inf") else x


def save_sweep(result: SweepResult, path) -> Path:
    """JSON dump of a sweep (config, rows, fit, clearance curves)."""
    data = {
        "config": result.config.to_dict(),
        "rows": [{k: _json_float(v) for k, v in r.as_row().items()} for r in result.rows],
        "fit": {k: _json_float(float(v)) if k != "status" and k != "points" else v
                for k, v in asdict(result.fit).items()},
        "reference_rate": result.reference_rate,
        "runtime": result.runtime,
        "clearance_curves": {str(k): v.tolist() for k, v in result.clearance_curves.items()},
    }
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=1))
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
    return path


def load_sweep(path) -> SweepResult:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    rows = [SweepRow(**{k: _from_json_float(v) for k, v in r.items()}) for r in data["rows"]]
    fit = RateFit(**{k: _from_json_float(v) for k, v in data["fit"].items()})
    curves = {int(k): np.asarray(v) for k, v in data["clearance_curves"].items()}
    return SweepResult(ExperimentConfig.from_dict(data["config"]), rows, fit,
                       data["reference_rate"], data["runtime"], curves)
