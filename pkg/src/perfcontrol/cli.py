"""Command-line interface.

Config files are YAML with these optional sections (all keys optional)::

    domain:  {mode, N, alpha, L, particle_radius, K_origin, seed}
    zone:    {center, radius}
    patches: {P0: {center, radius}, P1: {center, radius}}
    control: ControlSpec fields (kind, strength, separation, blob_radius, axis,
             charges, charge_radius, regularization, tube_margin, ...)
    solver:  {regime, alpha, beta, n, steps, snapshot_every, hole_model,
              kappa_scaled, initial_norm, theorem_check, seed}
    flow:    {samples, steps, eta, radius}
    sweep:   {N_values, workers}
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from .errors import FormatError, IOFailure, PerfControlError
from .experiment import (
    ControlSpec,
    ExperimentConfig,
    FlowSpec,
    build_control,
    load_sweep,
    report,
    run_point,
    run_sweep,
    save_sweep,
    scaled_resistance,
)
from .geometry import DomainSpec, ParticleShape, Patch, build_perforated_domain
from .io import save_trajectory, load_trajectory, write_bundle, write_csv

log = logging.getLogger("perfcontrol")

MANIFEST_HEADER = "# perfcontrol domain manifest v1"


# ---------------------------------------------------------------- config

def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise FormatError(f"{path}: top level must be a mapping")
    return data


def _pick(cls, section: dict) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise FormatError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}


def domain_spec(cfg: dict, N: int | None = None) -> DomainSpec:
    d = dict(cfg.get("domain", {}))
    if "manifest" in d:
        return read_manifest(d.pop("manifest"))
    radius = d.pop("particle_radius", 0.125)
    seed = d.pop("seed", 0)
    return DomainSpec(
        d.pop("mode", "full"),
        N if N is not None else d.pop("N", 2),
        d.pop("alpha", 2.0),
        L=d.pop("L", 1.0),
        shape=ParticleShape.ball(radius),
        rng_seed=seed,
        K_origin=tuple(d.pop("K_origin", (0.0, 0.0, 0.0))),
    )


def control_spec(cfg: dict) -> ControlSpec:
    section = dict(cfg.get("control", {}))
    zone = cfg.get("zone", {})
    if "center" in zone:
        section["zone_center"] = zone["center"]
    if "radius" in zone:
        section["zone_radius"] = zone["radius"]
    patches = cfg.get("patches", {})
    if "P0" in patches:
        section["P0_center"] = patches["P0"]["center"]
        section["patch_radius"] = patches["P0"].get("radius", 0.05)
    if "P1" in patches:
        section["P1_center"] = patches["P1"]["center"]
    return ControlSpec(**_pick(ControlSpec, section))


def patches(cfg: dict) -> tuple[Patch, Patch]:
    spec = control_spec(cfg)
    return (Patch.ball(spec.P0_center, spec.patch_radius), Patch.ball(spec.P1_center, spec.patch_radius))


def experiment_config(cfg: dict) -> ExperimentConfig:
    d = cfg.get("domain", {})
    solver = dict(cfg.get("solver", {}))
    sweep = dict(cfg.get("sweep", {}))
    args = {
        "domain_mode": d.get("mode", "full"),
        "L": d.get("L", 1.0),
        "K_origin": tuple(d.get("K_origin", (0.0, 0.0, 0.0))),
        "particle_radius": d.get("particle_radius", 0.125),
        "control": control_spec(cfg),
    }
    if "alpha" in d:
        args["alpha"] = d["alpha"]
    args.update(_pick(ExperimentConfig, solver))
    args.update(_pick(ExperimentConfig, sweep))
    if "flow" in cfg:
        spec = args["control"]
        flow = {"P0_center": spec.P0_center, "P1_center": None, "radius": spec.patch_radius}
        flow.update(cfg["flow"] or {})
        args["flow"] = FlowSpec(**_pick(FlowSpec, flow))
    return ExperimentConfig(**args)


# ---------------------------------------------------------------- manifest

def write_manifest(path, spec: DomainSpec) -> Path:
    """Text header with the domain parameters followed by one hole center per line."""
    domain = build_perforated_domain(spec)
    lines = [
        MANIFEST_HEADER,
        f"mode: {spec.mode}",
        f"N: {spec.N}",
        f"alpha: {spec.alpha!r}",
        f"L: {spec.L!r}",
        f"K_origin: {' '.join(repr(v) for v in spec.K_origin)}",
        f"particle_radii: {' '.join(repr(float(v)) for v in spec.shape.radii)}",
        f"epsilon: {spec.epsilon!r}",
        f"hole_radius: {domain.hole_radius!r}",
        f"holes: {domain.n_holes}",
        "centers:",
    ]
    lines += [" ".join(repr(float(v)) for v in c) for c in domain.centers]
    path = Path(path)
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
    return path


def read_manifest(path) -> DomainSpec:
    try:
        text = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    if not text or text[0] != MANIFEST_HEADER:
        raise FormatError(f"{path}: missing manifest header")
    header = {}
    for line in text[1:]:
        if line == "centers:":
            break
        key, _, value = line.partition(":")
        header[key.strip()] = value.strip()
    try:
        radii = tuple(float(v) for v in header["particle_radii"].split())
        return DomainSpec(
            header["mode"],
            int(header["N"]),
            float(header["alpha"]),
            L=float(header["L"]),
            shape=ParticleShape("ball" if len(set(radii)) == 1 else "ellipsoid", radii),
            K_origin=tuple(float(v) for v in header["K_origin"].split()),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad manifest header ({exc})") from exc


# ---------------------------------------------------------------- commands

def cmd_gen_domain(args, cfg):
    spec = domain_spec(cfg, args.N)
    write_manifest(args.output, spec)
    print(f"wrote {args.output}")


def _limit_control(cfg: dict, regime: str):
    exp = experiment_config(cfg)
    A = scaled_resistance(exp.particle_radius) if regime == "darcy" else None
    return build_control(exp.control, regime, A)


def cmd_synthesize(args, cfg):
    regime = args.regime or cfg.get("solver", {}).get("regime", "euler")
    triplet = _limit_control(cfg, regime)
    times = np.linspace(0.0, 1.0, args.times)
    velocity = np.stack([triplet.velocity_on_grid(float(t), args.n) for t in times])
    forcing = np.stack([triplet.forcing_on_grid(float(t), args.n) for t in times])
    meta = {"regime": regime, "n": args.n, "control": asdict(control_spec(cfg))}
    write_bundle(args.output, {"times": times, "velocity": velocity, "forcing": forcing}, meta)
    print(f"wrote {args.output} (max residual {triplet.theta.max_residual():.3e})")


def _limit_run(args, cfg, regime):
    from .flowmap import advect, exact_limit_velocity, measure_defect

    exp = experiment_config(cfg)
    triplet = _limit_control(cfg, regime)
    P0, P1 = patches(cfg)
    velocity = exact_limit_velocity(triplet)
    domain = build_perforated_domain(domain_spec(cfg))
    rep = measure_defect(velocity, P0, P1, 1.0, args.samples, args.steps, domain, exp.seed)
    gamma0, _ = P0.boundary_samples(400)
    hist = advect(gamma0, velocity, (0.0, 1.0), args.steps, record=True)
    row = rep.as_row()
    row["clearance"] = float(min(triplet.zone.distance(h).min() for h in hist))
    row["regime"] = regime
    write_csv(args.output, [row])
    print(f"defect {rep.measure_estimate.value:.4e} +- {rep.half_width:.1e}, clearance {row['clearance']:.4f}")


def cmd_run_euler(args, cfg):
    _limit_run(args, cfg, "euler")


def cmd_run_darcy(args, cfg):
    _limit_run(args, cfg, "darcy")


def cmd_run_ns(args, cfg):
    exp = experiment_config(cfg)
    if args.regime:
        exp = ExperimentConfig.from_dict({**exp.to_dict(), "regime": args.regime})
    row, traj, _ = run_point(exp, args.N, keep_trajectory=True)
    if traj is None:
        raise PerfControlError(row.note or "run failed")
    save_trajectory(args.output, traj)
    write_csv(Path(args.output).with_suffix(".csv"), [row.as_row()])
    print(f"eps={row.eps:.4g} field error {row.field_error:.4e}, energy inequality {row.energy_ok}")


def cmd_flowmap(args, cfg):
    from .flowmap import measure_defect, trajectory_velocity

    traj = load_trajectory(args.trajectory)
    P0, P1 = patches(cfg)
    N = args.N or cfg.get("domain", {}).get("N", 2)
    domain = build_perforated_domain(domain_spec(cfg, N))
    rep = measure_defect(trajectory_velocity(traj), P0, P1, float(traj.times[-1]),
                         args.samples, args.steps, domain, args.seed)
    write_csv(args.output, [rep.as_row()])
    print(f"defect {rep.measure_estimate.value:.4e} +- {rep.half_width:.1e}")


def cmd_sweep(args, cfg):
    exp = experiment_config(cfg)
    result = run_sweep(exp)
    out = Path(args.output)
    save_sweep(result, out / "sweep.json")
    paths = report(result, out, plots=not args.no_plots)
    fit = result.fit
    print(f"rate {fit.rate:.4g} [{fit.ci_low:.4g}, {fit.ci_high:.4g}] ({fit.status}); {len(paths)} artifacts in {out}")


def cmd_report(args, cfg):
    result = load_sweep(args.sweep)
    paths = report(result, args.output, plots=not args.no_plots)
    for name, p in sorted(paths.items()):
        print(f"{name}: {p}")


def cmd_resistance(args, cfg):
    from .homogenization import resistance_matrix

    radii = args.radii if len(args.radii) == 3 else args.radii * 3
    R = resistance_matrix(tuple(radii), args.method, grid=args.grid, box=args.box)
    np.set_printoptions(precision=6, suppress=True)
    print(R.entries)
    print(f"error bar {R.error_bar:.3e}")


def cmd_corrector_report(args, cfg):
    from .homogenization import build_corrector, corrector_bounds_report

    spec = domain_spec(cfg, args.N)
    corr = build_corrector(build_perforated_domain(spec), args.eta)
    rep = corrector_bounds_report(corr, samples=args.samples, seed=args.seed)
    row = rep.as_row()
    if args.output:
        write_csv(args.output, [row])
    for k, v in row.items():
        print(f"{k}: {v}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perfcontrol", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, output=True, config=True):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("config", nargs="?", help="YAML config file")
        if output:
            p.add_argument("-o", "--output", required=True)
        p.set_defaults(func=func)
        return p

    p = add("gen-domain", cmd_gen_domain, "write a domain manifest")
    p.add_argument("--N", type=int)
    p = add("synthesize", cmd_synthesize, "tabulate a limit control")
    p.add_argument("--regime", choices=("euler", "darcy"))
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--times", type=int, default=5)
    for name, func in (("run-euler", cmd_run_euler), ("run-darcy", cmd_run_darcy)):
        p = add(name, func, f"flow the {name[4:]} limit control and measure the defect")
        p.add_argument("--samples", type=int, default=100_000)
        p.add_argument("--steps", type=int, default=200)
    p = add("run-ns", cmd_run_ns, "run the scaled Navier-Stokes equations for one eps")
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--regime", choices=("euler", "darcy"))
    p = add("flowmap", cmd_flowmap, "measure the defect of a stored trajectory")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--N", type=int)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p = add("sweep", cmd_sweep, "run an eps sweep and write the report")
    p.add_argument("--no-plots", action="store_true")
    p = add("report", cmd_report, "regenerate a report from sweep.json", config=False)
    p.add_argument("sweep")
    p.add_argument("--no-plots", action="store_true")
    p = add("resistance", cmd_resistance, "resistance matrix of a particle", output=False, config=False)
    p.add_argument("--radii", type=float, nargs="+", default=[1.0])
    p.add_argument("--method", choices=("analytic_ball", "numeric_exterior"), default="analytic_ball")
    p.add_argument("--grid", type=int, default=128)
    p.add_argument("--box", type=float, default=16.0)
    p = add("corrector-report", cmd_corrector_report, "corrector bound constants", output=False)
    p.add_argument("-o", "--output")
    p.add_argument("--N", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--samples", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        cfg = load_config(getattr(args, "config", None))
        args.func(args, cfg)
    except (PerfControlError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
