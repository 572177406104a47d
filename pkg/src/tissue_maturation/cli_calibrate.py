"""Command-line entry points, parameter calibration and fiber-orientation statistics.

Subcommands::

    tissue-maturation point     --config point.toml --out out/
    tissue-maturation run       strip_table1 --out out/ [--dry-run]
    tissue-maturation calibrate strip_table1 --out calib/
    tissue-maturation mesh      cruciform_table2 --out mesh/
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import scenarios_io as sio
from . import tensor_core as tc
from .fem_solver import N_QP, AssemblyError, GlobalState, Mesh, SolverError
from .local_integrator import LocalConvergenceError
from .meshing import PLANES, ConfigError

log = logging.getLogger(__name__)

PENALTY = 1e12
CALIBRATION_DAYS = (7.0, 14.0, 21.0, 28.0)
# parameters that may be fitted, with default search bounds
FITTABLE = {
    "a1": (1e-4, 1e-2),
    "tau": (1.0, 20.0),
    "h": (0.5, 5.0),
    "a2": (0.0, 1e-4),
    "psi_crit": (1e-6, 1e-3),
    "rho_th": (1.0, 30.0),
}


# ---------------------------------------------------------------------------
# fiber orientation statistics


@dataclass
class OrientationHistogram:
    bin_edges: np.ndarray  # degrees, [0, 90]
    counts: np.ndarray  # percent of region fibers per bin
    region: str
    time: float

    @property
    def modal_bin(self) -> int:
        return int(np.argmax(self.counts))


def fiber_angles(st: GlobalState, mesh: Mesh, region: str, plane: str = "xy"):
    """Folded in-plane angle (deg) of each region fiber against the plane's first axis.

    Fibers are taken in the current configuration (``F a_ref``) when the state
    carries deformation fields, otherwise the stored ``a_tilde`` is used.
    """
    if region not in mesh.element_sets:
        raise KeyError(f"unknown element set {region!r}")
    elems = np.asarray(mesh.element_sets[region], dtype=int)
    if elems.size == 0:
        raise ValueError(f"element set {region!r} is empty")
    qp = (elems[:, None] * N_QP + np.arange(N_QP)).ravel()
    if "F" in st.fields and "a_ref" in st.fields:
        a = np.einsum("nij,nj->ni", np.asarray(st.fields["F"])[qp],
                      np.asarray(st.fields["a_ref"])[qp])
    else:
        a = st.gp_states.a_tilde[qp]
    i, j = PLANES[plane]
    return np.degrees(np.arctan2(np.abs(a[:, j]), np.abs(a[:, i])))


def fiber_histogram(st: GlobalState, mesh: Mesh, region: str, plane: str = "xy",
                    bins: int = 30) -> OrientationHistogram:
    """Percentage of region fibers per orientation bin over ``[0, 90]`` degrees."""
    ang = fiber_angles(st, mesh, region, plane)
    edges = np.linspace(0.0, 90.0, bins + 1)
    counts, _ = np.histogram(ang, bins=edges)
    return OrientationHistogram(edges, 100.0 * counts / ang.size, region, st.time)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class NelderMeadOptions:
    max_evals: int = 2000
    xtol: float = 1e-6  # simplex diameter, relative to max(1, |x_best|)
    initial_step: float = 0.05


def nelder_mead(objective, x0, bounds, opts: NelderMeadOptions | None = None):
    """Bounded Nelder-Mead (reflect 1, expand 2, contract 0.5, shrink 0.5).

    Trial points are projected onto the box. Returns ``(x_best, f_best, evals)``.
    """
    o = opts or NelderMeadOptions()
    x0 = np.asarray(x0, dtype=float).ravel()
    lo = np.array([b[0] for b in bounds], dtype=float)
    hi = np.array([b[1] for b in bounds], dtype=float)
    if x0.size < 1 or lo.shape != x0.shape or np.any(lo > hi):
        raise ValueError("need dim >= 1 and one (low, high) pair per coordinate")
    if np.any(x0 < lo) or np.any(x0 > hi):
        raise ValueError("x0 lies outside the bounds")
    n = x0.size
    evals = 0

    def f(x):
        nonlocal evals
        evals += 1
        return float(objective(x))

    def proj(x):
        return np.clip(x, lo, hi)

    simplex = [x0.copy()]
    for k in range(n):
        x = x0.copy()
        step = o.initial_step * x[k] if x[k] != 0 else 0.00025 * max(1.0, hi[k] - lo[k])
        x[k] += step
        if x[k] > hi[k]:
            x[k] = x0[k] - step
        simplex.append(proj(x))
    pts = np.array(simplex)
    vals = np.array([f(x) for x in pts])
    while evals < o.max_evals:
        order = np.argsort(vals, kind="stable")
        pts, vals = pts[order], vals[order]
        diam = max(np.linalg.norm(pts[1:] - pts[0], axis=1))
        if diam < o.xtol * max(1.0, np.linalg.norm(pts[0])):
            break
        c = pts[:-1].mean(axis=0)
        xr = proj(c + (c - pts[-1]))
        fr = f(xr)
        if fr < vals[0]:
            xe = proj(c + 2.0 * (c - pts[-1]))
            fe = f(xe)
            pts[-1], vals[-1] = (xe, fe) if fe < fr else (xr, fr)
        elif fr < vals[-2]:
            pts[-1], vals[-1] = xr, fr
        else:
            if fr < vals[-1]:
                xc = proj(c + 0.5 * (xr - c))  # outside contraction
            else:
                xc = proj(c + 0.5 * (pts[-1] - c))  # inside contraction
            fc = f(xc)
            if fc < min(fr, vals[-1]):
                pts[-1], vals[-1] = xc, fc
            else:
                for k in range(1, n + 1):
                    pts[k] = proj(pts[0] + 0.5 * (pts[k] - pts[0]))
                    vals[k] = f(pts[k])
    k = int(np.argmin(vals))
    return pts[k].copy(), float(vals[k]), evals


# ---------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationProblem:
    free_params: tuple  # names from FITTABLE
    bounds: tuple  # (low, high) per free parameter
    scenario: sio.SimulationConfig
    dataset: tuple

    def __post_init__(self):
        if not self.free_params:
            raise ValueError("free parameter set is empty")
        for name, (a, b) in zip(self.free_params, self.bounds):
            if name not in FITTABLE:
                raise ValueError(f"{name} is not a fittable parameter")
            if not (math.isfinite(a) and math.isfinite(b) and a < b):
                raise ValueError(f"bounds of {name} must be finite with low < high")
        if len(self.bounds) != len(self.free_params):
            raise ValueError("one bound pair per free parameter")

    @property
    def x0(self):
        p = self.scenario.params
        return np.array([getattr(p, n) for n in self.free_params])

    def config_at(self, x) -> sio.SimulationConfig:
        p = self.scenario.params.with_(**dict(zip(self.free_params, map(float, x))))
        return dataclasses.replace(self.scenario, params=p)


def default_problem(cfg: sio.SimulationConfig | None = None, free=("a1", "a2", "psi_crit"),
                    coarse=True) -> CalibrationProblem:
    """Strip calibration; ``coarse`` swaps in the 256-element mesh."""
    cfg = cfg or sio.load_config("strip_table1")
    if coarse and cfg.scenario == "strip":
        cfg = dataclasses.replace(cfg, geometry={**cfg.geometry, "nx": 32, "ny": 4, "nz": 2})
    cfg = dataclasses.replace(cfg, outputs=dataclasses.replace(cfg.outputs, snapshot_times=()))
    return CalibrationProblem(tuple(free), tuple(FITTABLE[n] for n in free), cfg,
                              tuple(sio.load_experimental_dataset()))


def simulate_density(cfg: sio.SimulationConfig, days=CALIBRATION_DAYS):
    """Volume-mean referential collagen density of a scenario at ``days``."""
    sc = sio.build_scenario(cfg)
    res = sio.run_scenario(sc)
    t = np.array([0.0] + [r.time for r in res.rows])
    rho = np.array([sc.initial.gp_states.rho_co0.mean()] + [r.mean_rho_co0 for r in res.rows])
    return np.interp(days, t, rho)


def calibration_objective(x, problem: CalibrationProblem) -> float:
    """Range-weighted squared misfit of the simulated density curve.

    Raises:
        ValueError: if ``x`` lies outside the bounds (nothing is simulated).
    """
    x = np.asarray(x, dtype=float)
    for v, name, (a, b) in zip(x, problem.free_params, problem.bounds):
        if not a <= v <= b:
            raise ValueError(f"{name} = {v} outside bounds [{a}, {b}]")
    try:
        cfg = problem.config_at(x)
        model = simulate_density(cfg, [r.day for r in problem.dataset])
    except (SolverError, AssemblyError, LocalConvergenceError, ValueError) as exc:
        log.warning("calibration: simulation failed at %s (%s); penalty applied", x, exc)
        return PENALTY
    err = 0.0
    for m, r in zip(model, problem.dataset):
        err += (m - r.mean) ** 2 / (r.high - r.low) ** 2
    return float(err) if math.isfinite(err) else PENALTY


def calibrate(problem: CalibrationProblem, out_dir, opts: NelderMeadOptions | None = None):
    """Fit the free parameters and write the report CSV plus the resolved config."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    history = []

    def obj(x):
        val = calibration_objective(x, problem)
        history.append((len(history), *map(float, x), val))
        print(f"eval {len(history):4d} " + " ".join(
            f"{n}={v:.6g}" for n, v in zip(problem.free_params, x)) + f" f={val:.6g}",
            flush=True)
        return val

    x, fbest, evals = nelder_mead(obj, problem.x0, problem.bounds, opts)
    with (out_dir / "calibration_report.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", *problem.free_params, "objective"])
        for row in history:
            w.writerow([row[0]] + [repr(v) for v in row[1:]])
    (out_dir / "calibrated.toml").write_text(sio.serialize_config(problem.config_at(x)))
    return x, fbest, evals


# ---------------------------------------------------------------------------
# command implementations

POINT_HEADER = ["time_days", "rho_co0", "gamma_dot", "fiber_angle_deg", "psi_co", "tau_eig1",
                "tau_eig2", "tau_eig3", "diss_growth_m", "diss_growth_co", "diss_remodel",
                "diss_density", "diss_total"]


def point_rows(samples, plane="xy"):
    """Table rows of a material-point trajectory (see ``POINT_HEADER``)."""
    i, j = PLANES[plane]
    rows = []
    for s in samples:
        a = s.state.a_tilde[0]
        ang = math.degrees(math.atan2(abs(a[j]), abs(a[i])))
        eig = tc.sym_eig(s.stress.tau_tilde[0])[0]
        d = s.dissipation
        diss = [0.0] * 5 if d is None else [
            float(np.ravel(v)[0]) for v in (d.term_growth_m, d.term_growth_co, d.term_remodel,
                                            d.term_density, d.total_mechanical)]
        rows.append([s.time, float(s.state.rho_co0[0]), float(s.state.gamma_dot[0]), ang,
                     float(np.ravel(s.stress.psi_co)[0]), *map(float, eig), *diss])
    return rows


def cmd_point(cfg: sio.SimulationConfig, out_dir) -> Path:
    if cfg.scenario != "material_point":
        raise ConfigError(f"point needs a material_point config, got {cfg.scenario!r}")
    samples = sio.run_material_point(cfg)
    path = Path(out_dir) / "point.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POINT_HEADER)
        for r in point_rows(samples, cfg.fiber_init.plane):
            w.writerow([f"{v:.17g}" for v in r])
    print(f"wrote {len(samples)} rows to {path}")
    return path


def parameter_table(cfg: sio.SimulationConfig) -> str:
    lines = [f"scenario: {cfg.scenario} ({cfg.units})"]
    for key, dim in sio.PARAM_UNITS.items():
        v = getattr(cfg.params, sio.PARAM_FIELD.get(key, key))
        unit = {"stress": cfg.units, None: "-", "J/mm3 per stress": f"J/mm3 per {cfg.units}"}
        lines.append(f"  {key:<22} {v:<14.6g} {unit.get(dim, dim)}")
    s = cfg.stepping
    lines.append(f"stepping: dt {s.dt_base:g}..{s.dt_max:g} days, horizon {s.horizon:g} days, "
                 f"events {list(s.event_times)}")
    if cfg.scenario != "material_point":
        mesh = sio.build_mesh(cfg)
        lines.append(f"mesh: {mesh.n_elements} elements, {mesh.n_nodes} nodes")
    return "\n".join(lines)


def cmd_run(cfg: sio.SimulationConfig, out_dir, dry_run=False):
    if cfg.scenario == "material_point":
        return cmd_point(cfg, out_dir)
    print(parameter_table(cfg))
    if dry_run:
        return None
    sc = sio.build_scenario(cfg)
    t0 = time.time()

    def progress(st, row):
        print(f"t={row.time:8.3f} dt={row.dt:.4g} iters={row.newton_iterations} "
              f"mean_rho={row.mean_rho_co0:.4f} wall={time.time() - t0:.1f}s", flush=True)

    res = sio.run_scenario(sc, progress)
    paths = sio.write_outputs(sc, res, out_dir)
    print(f"wrote {paths['csv']} and {len(paths['vtk'])} VTK snapshots")
    return paths


def cmd_mesh(cfg: sio.SimulationConfig, out_dir):
    mesh = sio.build_mesh(cfg)
    f = cfg.fiber_init
    a = sio.init_fiber_field(mesh, f.mode, f.seed, f.plane, f.angle_deg)
    from .constitutive import GaussPointState

    st = GlobalState(np.zeros((mesh.n_nodes, 3)), GaussPointState.initial(a), 0.0)
    path = sio.write_vtk_snapshot(mesh, st, Path(out_dir) / "mesh.vtk")
    print(f"{mesh.n_elements} elements, {mesh.n_nodes} nodes; node sets: "
          + ", ".join(f"{k}({len(v)})" for k, v in mesh.node_sets.items()))
    print(f"wrote {path}")
    return path


def _common(p, suppress=False):
    # sub-command copies must not overwrite values given before the sub-command
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="config file or preset name")
    p.add_argument("--seed", type=int, default=d(None), help="override the fiber seed (64-bit)")
    p.add_argument("--threads", type=int, default=d(None), help="material-update worker threads")
    p.add_argument("--out", default=d("out"), help="output directory (default: out)")
    p.add_argument("--dry-run", action="store_true", default=d(False),
                   help="validate the config and print the parameters only")


def build_parser():
    top, common = argparse.ArgumentParser(add_help=False), argparse.ArgumentParser(add_help=False)
    _common(top)
    _common(common, suppress=True)
    ap = argparse.ArgumentParser(prog="tissue-maturation", parents=[top],
                                 description="Growth and maturation of engineered tissue.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("point", "integrate a single material point"),
                        ("run", "run a strip or cruciform simulation"),
                        ("calibrate", "fit Weibull/mechanobiology parameters to the dataset"),
                        ("mesh", "build and export the mesh of a config")):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.add_argument("config_pos", nargs="?", metavar="CONFIG")
        if name == "calibrate":
            sp.add_argument("--free", default="a1,a2,psi_crit",
                            help="comma-separated free parameters")
            sp.add_argument("--max-evals", type=int, default=200)
            sp.add_argument("--full-mesh", action="store_true",
                            help="calibrate on the config mesh instead of 256 elements")
    return ap


def _resolve(args) -> sio.SimulationConfig:
    src = args.config_pos or args.config
    if src is None:
        raise ConfigError("no config given (positional CONFIG or --config)")
    cfg = sio.load_config(src)
    if args.seed is not None:
        if not 0 <= args.seed < 1 << 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg.fiber_init = dataclasses.replace(cfg.fiber_init, seed=args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg.solver = dataclasses.replace(cfg.solver, threads=args.threads)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        if args.command == "point":
            if args.dry_run:
                print(parameter_table(cfg))
            else:
                cmd_point(cfg, args.out)
        elif args.command == "run":
            cmd_run(cfg, args.out, args.dry_run)
        elif args.command == "mesh":
            cmd_mesh(cfg, args.out)
        else:
            free = tuple(s.strip() for s in args.free.split(",") if s.strip())
            bad = [n for n in free if n not in FITTABLE]
            if bad:
                raise ConfigError(f"not fittable: {bad}; choose from {sorted(FITTABLE)}")
            prob = default_problem(cfg, free, coarse=not args.full_mesh)
            if args.dry_run:
                print(parameter_table(prob.scenario))
                return 0
            x, fbest, evals = calibrate(prob, args.out, NelderMeadOptions(max_evals=args.max_evals))
            print("best: " + " ".join(f"{n}={v:.6g}" for n, v in zip(free, x))
                  + f" objective={fbest:.6g} after {evals} evaluations")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (SolverError, AssemblyError, LocalConvergenceError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
