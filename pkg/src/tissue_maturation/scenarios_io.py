"""Scenario descriptions and file I/O.

Config files are TOML documents with explicit unit tags on physical
quantities (``mu = "0.25 MPa"``); see ``docs/config.md``. Parsing is strict:
unknown keys, missing mandatory entries, wrong units and out-of-range values
are all rejected with a line/column location.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli

from . import tensor_core as tc
from .constitutive import ENERGY_SCALE, MaterialParams
from .fem_solver import N_QP, GlobalState, Mesh, Stepping, TimeSeriesRow
from .meshing import (  # noqa: F401  (re-exported scenario builders)
    ConfigError,
    SplitMix64,
    build_cruciform_mesh,
    build_strip_mesh,
    cruciform_element_count,
    init_fiber_field,
    plane_vectors,
)

SCENARIOS = ("strip", "cruciform", "material_point")
UNIT_SYSTEMS = ("MPa", "uN/mm2")
CSV_HEADER = ["time_days", "fx_min", "fx_max", "fz_min", "fz_max", "mean_rho_co0", "mean_J",
              "newton_iters"]
DEFAULT_SNAPSHOTS = ("0", "5", "7", "10", "14", "17-", "17+", "21", "28")

# physical dimension of each material parameter; "stress" resolves to the unit system
PARAM_UNITS = {
    "lambda": "stress", "mu": "stress", "k1": "stress", "k2": None, "kappa": None,
    "sigma_g0": "stress", "r1": None, "beta_g": "stress", "eta_g": "days", "eta_s": "days",
    "v_g": None, "a1": "ug/cells", "tau": "days", "h": None, "a2": "mm3/cells/day",
    "psi_crit": "J/ug", "rho_th": "ug/mm3", "rho_co_f": "ug/mm3", "c_cell": "cells/mm3",
    "energy_per_mass_scale": "J/mm3 per stress",
}
PARAM_FIELD = {"lambda": "lam"}
PARAM_RANGES = {
    "kappa": (lambda v: 0.0 <= v <= 1.0 / 3.0, "0 ≤ κ ≤ 1/3"),
    "mu": (lambda v: v > 0, "µ > 0"),
    "k1": (lambda v: v >= 0, "k1 ≥ 0"),
    "k2": (lambda v: v > 0, "k2 > 0"),
    "eta_g": (lambda v: v > 0, "η_g > 0"),
    "eta_s": (lambda v: v > 0, "η_s > 0"),
    "v_g": (lambda v: v > 0, "v_g > 0"),
    "tau": (lambda v: v > 0, "τ > 0"),
    "h": (lambda v: v > 0, "h > 0"),
    "rho_th": (lambda v: v > 0, "ρ_th > 0"),
    "rho_co_f": (lambda v: v > 0, "ρ_co,f > 0"),
    "c_cell": (lambda v: v >= 0, "c_cell ≥ 0"),
    "psi_crit": (lambda v: v > 0, "ψ_crit > 0"),
    "a1": (lambda v: v >= 0, "a1 ≥ 0"),
    "a2": (lambda v: v >= 0, "a2 ≥ 0"),
    "energy_per_mass_scale": (lambda v: v > 0, "energy_per_mass_scale > 0"),
}

STRIP_GEOMETRY = {"length": "mm", "width": "mm", "thickness": "mm", "nx": int, "ny": int,
                  "nz": int}
CRUCIFORM_GEOMETRY = {"arm_length": "mm", "arm_width": "mm", "thickness": "mm",
                      "center_width": "mm", "center_div": int, "arm_width_div": int,
                      "arm_div": int, "thickness_div": int}


@dataclass
class FiberInit:
    mode: str = "in_plane_uniform"
    seed: int | None = None
    plane: str = "xy"
    angle_deg: float = 0.0


@dataclass
class Outputs:
    snapshot_times: tuple = DEFAULT_SNAPSHOTS
    vtk_dir: str = "vtk"
    csv_path: str = "timeseries.csv"


@dataclass
class Perturbation:
    time: float = 17.0
    fraction: float = 0.2
    mode: str = "displacement"  # or "force"


@dataclass
class SolverSettings:
    threads: int = 1
    global_tol_rel: float = 1e-8
    global_max_iter: int = 25
    max_bisections: int = 8
    local_tol: float = 1e-10
    local_max_iter: int = 50
    local_max_depth: int = 10
    bio_integration: str = "exact"
    direction_method: str = "analytic"
    pi_mode: str = "dyadic"


@dataclass
class PointKnot:
    time: float
    F: tuple  # 3x3 row-major, nested tuples


@dataclass
class SimulationConfig:
    scenario: str
    units: str
    params: MaterialParams
    geometry: dict = field(default_factory=dict)
    stepping: Stepping = field(default_factory=Stepping)
    fiber_init: FiberInit = field(default_factory=FiberInit)
    outputs: Outputs = field(default_factory=Outputs)
    perturbation: Perturbation | None = None
    solver: SolverSettings = field(default_factory=SolverSettings)
    point: tuple = ()  # PointKnot sequence for material_point runs


# ---------------------------------------------------------------------------
# parsing helpers


def _locate(text: str, path: tuple):
    """Best-effort (line, col) of a dotted key path in TOML source."""
    if not path:
        return None, None
    table, key = path[:-1], path[-1]
    current: tuple = ()
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"^\[\[?\s*([^\]]+?)\s*\]\]?", line)
        if m:
            current = tuple(p.strip() for p in m.group(1).split("."))
            if current == tuple(path):
                return ln, raw.index("[") + 1
            continue
        if current == table:
            m = re.match(r"^(\s*)(" + re.escape(key) + r")\s*=", raw)
            if m:
                return ln, len(m.group(1)) + 1
    return None, None


class _Ctx:
    def __init__(self, text):
        self.text = text

    def error(self, msg, *path):
        line, col = _locate(self.text, tuple(path))
        return ConfigError(msg, line, col)


def _norm_unit(u: str) -> str:
    u = u.strip().replace("µ", "u").replace("μ", "u").replace("²", "2").replace("³", "3")
    u = re.sub(r"\s+", " ", u)
    if u in ("day", "d"):
        u = "days"
    if u == "cell/mm3":
        u = "cells/mm3"
    if u == "ug/cell":
        u = "ug/cells"
    if u == "mm3/cell/day":
        u = "mm3/cells/day"
    if u == "degrees":
        u = "deg"
    return u


def _quantity(ctx, raw, expected, *path):
    """Value of a unit-tagged quantity; ``expected=None`` means dimensionless."""
    key = ".".join(path)
    if expected is None:
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ctx.error(f"{key} is dimensionless and must be a plain number", *path)
        return float(raw)
    if not isinstance(raw, str):
        raise ctx.error(f"{key} needs a unit tag, e.g. \"{raw} {expected}\"", *path)
    m = re.match(r"^\s*([-+0-9.eE]+|[-+]?inf)\s+(.+?)\s*$", raw)
    if not m:
        raise ctx.error(f"{key}: cannot read quantity {raw!r} (expected \"<number> <unit>\")",
                        *path)
    try:
        val = float(m.group(1))
    except ValueError:
        raise ctx.error(f"{key}: bad number {m.group(1)!r}", *path) from None
    unit = _norm_unit(m.group(2))
    if unit != _norm_unit(expected):
        raise ctx.error(f"{key}: unit mismatch, got {m.group(2)!r}, expected {expected!r}", *path)
    if not math.isfinite(val):
        raise ctx.error(f"{key} must be finite", *path)
    return val


def _check_keys(ctx, table: dict, allowed, *path):
    for k in table:
        if k not in allowed:
            raise ctx.error(f"unknown key {'.'.join(path + (k,))!r}", *(path + (k,)))


def _int(ctx, raw, *path, minimum=None):
    if isinstance(raw, bool) or not isinstance(raw, int):
        raise ctx.error(f"{'.'.join(path)} must be an integer", *path)
    if minimum is not None and raw < minimum:
        raise ctx.error(f"{'.'.join(path)} must be >= {minimum}", *path)
    return raw


def _str(ctx, raw, choices, *path):
    if not isinstance(raw, str) or (choices and raw not in choices):
        raise ctx.error(f"{'.'.join(path)} must be one of {list(choices)}, got {raw!r}", *path)
    return raw


def _snapshot_label(ctx, raw, *path):
    """``"17- days"`` -> ``"17-"``."""
    if not isinstance(raw, str):
        raise ctx.error("snapshot times need a unit tag, e.g. \"7 days\"", *path)
    m = re.match(r"^\s*([0-9.]+(?:[eE][-+]?[0-9]+)?)([-+]?)\s+(\S+)\s*$", raw)
    if not m or _norm_unit(m.group(3)) != "days":
        raise ctx.error(f"bad snapshot time {raw!r} (expected e.g. \"17- days\")", *path)
    try:
        float(m.group(1))
    except ValueError:
        raise ctx.error(f"bad snapshot time {raw!r}", *path) from None
    return m.group(1) + m.group(2)


def snapshot_time(label: str, event_step: float = 0.01) -> float:
    """Nominal time of a snapshot label (``"17+"`` is the end of the event step)."""
    if label.endswith("+"):
        return float(label[:-1]) + event_step
    if label.endswith("-"):
        return float(label[:-1])
    return float(label)


# ---------------------------------------------------------------------------


def parse_config(text: str) -> SimulationConfig:
    """Parse and validate a config document.

    Raises:
        ConfigError: with a line/column location where one can be found.
    """
    ctx = _Ctx(text)
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+), column (\d+)", str(exc))
        raise ConfigError(f"syntax error: {exc}",
                          int(m.group(1)) if m else None, int(m.group(2)) if m else None) from None
    if "scenario" not in doc:
        raise ConfigError("scenario missing", 1, 1)
    _check_keys(ctx, doc, ("scenario", "units", "geometry", "params", "stepping", "fiber_init",
                           "outputs", "perturbation", "solver", "point"))
    scenario = _str(ctx, doc["scenario"], SCENARIOS, "scenario")
    if "units" not in doc:
        raise ConfigError("units missing (\"MPa\" or \"uN/mm2\")", 1, 1)
    units = _norm_unit(_str(ctx, _norm_unit(str(doc["units"])), UNIT_SYSTEMS, "units"))

    params = _parse_params(ctx, doc.get("params"), units)
    geometry = _parse_geometry(ctx, doc.get("geometry"), scenario)
    stepping = _parse_stepping(ctx, doc.get("stepping"))
    fiber = _parse_fiber(ctx, doc.get("fiber_init"))
    outputs = _parse_outputs(ctx, doc.get("outputs", {}), stepping)
    pert = _parse_perturbation(ctx, doc.get("perturbation"), scenario, stepping)
    solver = _parse_solver(ctx, doc.get("solver", {}))
    point = _parse_point(ctx, doc.get("point"), scenario)
    if pert is not None and pert.time not in stepping.event_times:
        stepping = dataclasses.replace(
            stepping, event_times=tuple(sorted(set(stepping.event_times) | {pert.time})))
    return SimulationConfig(scenario, units, params, geometry, stepping, fiber, outputs, pert,
                            solver, point)


def _parse_params(ctx, tab, units) -> MaterialParams:
    if tab is None:
        raise ConfigError("params table missing", 1, 1)
    if not isinstance(tab, dict):
        raise ctx.error("params must be a table", "params")
    _check_keys(ctx, tab, PARAM_UNITS.keys(), "params")
    vals = {}
    for key, dim in PARAM_UNITS.items():
        if key not in tab:
            if key == "energy_per_mass_scale":
                vals[key] = ENERGY_SCALE[units]
                continue
            raise ctx.error(f"params.{key} missing", "params")
        exp = dim
        if dim == "stress":
            exp = units
        elif dim == "J/mm3 per stress":
            exp = f"J/mm3 per {units}"
        v = _quantity(ctx, tab[key], exp, "params", key)
        if key in PARAM_RANGES and not PARAM_RANGES[key][0](v):
            raise ctx.error(f"params.{key} = {v} out of range: {PARAM_RANGES[key][1]}",
                            "params", key)
        vals[PARAM_FIELD.get(key, key)] = v
    try:
        return MaterialParams(**vals)
    except ValueError as exc:
        raise ctx.error(str(exc), "params") from None


def _parse_geometry(ctx, tab, scenario):
    if scenario == "material_point":
        if tab:
            raise ctx.error("geometry is not used by material_point runs", "geometry")
        return {}
    spec = STRIP_GEOMETRY if scenario == "strip" else CRUCIFORM_GEOMETRY
    if tab is None:
        raise ConfigError("geometry table missing", 1, 1)
    _check_keys(ctx, tab, spec.keys(), "geometry")
    out = {}
    for key, unit in spec.items():
        if key not in tab:
            raise ctx.error(f"geometry.{key} missing", "geometry")
        if unit is int:
            out[key] = _int(ctx, tab[key], "geometry", key, minimum=1)
        else:
            v = _quantity(ctx, tab[key], unit, "geometry", key)
            if v <= 0:
                raise ctx.error(f"geometry.{key} must be positive", "geometry", key)
            out[key] = v
    if scenario == "cruciform":
        # layout feasibility is checked cheaply here so errors point at the table
        try:
            build_cruciform_mesh(**out)
        except ConfigError as exc:
            raise ctx.error(str(exc), "geometry") from None
    return out


def _parse_stepping(ctx, tab) -> Stepping:
    if tab is None:
        raise ConfigError("stepping table missing", 1, 1)
    allowed = ("dt_base", "dt_max", "horizon", "event_times", "event_step", "grow_after",
               "grow_factor")
    _check_keys(ctx, tab, allowed, "stepping")
    if "horizon" not in tab:
        raise ctx.error("stepping.horizon missing", "stepping")
    kw = {}
    for key in ("dt_base", "dt_max", "horizon", "event_step"):
        if key in tab:
            kw[key] = _quantity(ctx, tab[key], "days", "stepping", key)
    if "event_times" in tab:
        if not isinstance(tab["event_times"], list):
            raise ctx.error("stepping.event_times must be a list", "stepping", "event_times")
        kw["event_times"] = tuple(sorted(_quantity(ctx, v, "days", "stepping", "event_times")
                                         for v in tab["event_times"]))
    if "grow_after" in tab:
        kw["grow_after"] = _int(ctx, tab["grow_after"], "stepping", "grow_after", minimum=1)
    if "grow_factor" in tab:
        kw["grow_factor"] = _quantity(ctx, tab["grow_factor"], None, "stepping", "grow_factor")
    st = Stepping(**kw)
    if st.horizon < 0:
        raise ctx.error("stepping.horizon must be >= 0", "stepping", "horizon")
    if st.dt_base <= 0 or st.dt_max < st.dt_base:
        raise ctx.error("need 0 < dt_base <= dt_max", "stepping")
    if st.event_step <= 0 or st.grow_factor < 1.0:
        raise ctx.error("need event_step > 0 and grow_factor >= 1", "stepping")
    return st


def _parse_fiber(ctx, tab) -> FiberInit:
    if tab is None:
        raise ConfigError("fiber_init table missing", 1, 1)
    _check_keys(ctx, tab, ("mode", "seed", "plane", "angle"), "fiber_init")
    mode = _str(ctx, tab.get("mode", "in_plane_uniform"), ("in_plane_uniform", "fixed_angle"),
                "fiber_init", "mode")
    seed = tab.get("seed")
    if seed is not None:
        if isinstance(seed, str) and seed.strip().isdigit():
            seed = int(seed)
        seed = _int(ctx, seed, "fiber_init", "seed", minimum=0)
        if seed >= 1 << 64:
            raise ctx.error("fiber_init.seed must fit in 64 bits", "fiber_init", "seed")
    if mode == "in_plane_uniform" and seed is None:
        raise ctx.error("fiber_init.seed is mandatory for in_plane_uniform", "fiber_init")
    plane = _str(ctx, tab.get("plane", "xy"), ("xy", "xz", "yz", "yx", "zx", "zy"),
                 "fiber_init", "plane")
    angle = _quantity(ctx, tab["angle"], "deg", "fiber_init", "angle") if "angle" in tab else 0.0
    return FiberInit(mode, seed, plane, angle)


def _parse_outputs(ctx, tab, stepping) -> Outputs:
    _check_keys(ctx, tab, ("snapshot_times", "vtk_dir", "csv_path"), "outputs")
    out = Outputs()
    if "snapshot_times" in tab:
        if not isinstance(tab["snapshot_times"], list):
            raise ctx.error("outputs.snapshot_times must be a list", "outputs", "snapshot_times")
        out.snapshot_times = tuple(_snapshot_label(ctx, v, "outputs", "snapshot_times")
                                   for v in tab["snapshot_times"])
    for lab in out.snapshot_times:
        if snapshot_time(lab, stepping.event_step) > stepping.horizon + 1e-9:
            # the default list is trimmed to the horizon, explicit entries must fit
            if "snapshot_times" in tab:
                raise ctx.error(f"snapshot time {lab} lies beyond the horizon",
                                "outputs", "snapshot_times")
    if "snapshot_times" not in tab:
        out.snapshot_times = tuple(lab for lab in out.snapshot_times
                                   if snapshot_time(lab, stepping.event_step)
                                   <= stepping.horizon + 1e-9)
    for key in ("vtk_dir", "csv_path"):
        if key in tab:
            if not isinstance(tab[key], str) or not tab[key]:
                raise ctx.error(f"outputs.{key} must be a non-empty string", "outputs", key)
            setattr(out, key, tab[key])
    return out


def _parse_perturbation(ctx, tab, scenario, stepping):
    if tab is None:
        return None
    if scenario != "cruciform":
        raise ctx.error("perturbation is only supported for the cruciform", "perturbation")
    _check_keys(ctx, tab, ("time", "fraction", "mode"), "perturbation")
    if "time" not in tab or "fraction" not in tab:
        raise ctx.error("perturbation needs time and fraction", "perturbation")
    t = _quantity(ctx, tab["time"], "days", "perturbation", "time")
    frac = _quantity(ctx, tab["fraction"], None, "perturbation", "fraction")
    mode = _str(ctx, tab.get("mode", "displacement"), ("displacement", "force"),
                "perturbation", "mode")
    if not (0 < t < stepping.horizon):
        raise ctx.error("perturbation.time must lie inside the horizon", "perturbation", "time")
    if frac <= -1.0:
        raise ctx.error("perturbation.fraction must exceed -1", "perturbation", "fraction")
    return Perturbation(t, frac, mode)


def _parse_solver(ctx, tab) -> SolverSettings:
    s = SolverSettings()
    _check_keys(ctx, tab, [f.name for f in dataclasses.fields(SolverSettings)], "solver")
    ints = {"threads", "global_max_iter", "max_bisections", "local_max_iter", "local_max_depth"}
    choices = {"bio_integration": ("exact", "backward_euler"),
               "direction_method": ("analytic", "fd"), "pi_mode": ("dyadic", "sandwich")}
    for k, v in tab.items():
        if k in ints:
            setattr(s, k, _int(ctx, v, "solver", k, minimum=0 if k == "max_bisections" else 1))
        elif k in choices:
            setattr(s, k, _str(ctx, v, choices[k], "solver", k))
        else:
            val = _quantity(ctx, v, None, "solver", k)
            if val <= 0:
                raise ctx.error(f"solver.{k} must be positive", "solver", k)
            setattr(s, k, val)
    return s


def _parse_point(ctx, tab, scenario):
    if scenario != "material_point":
        if tab is not None:
            raise ctx.error("point is only used by material_point runs", "point")
        return ()
    if tab is None:
        return (PointKnot(0.0, tuple(map(tuple, np.eye(3)))),)
    _check_keys(ctx, tab, ("knots",), "point")
    knots = []
    for i, kn in enumerate(tab.get("knots", [])):
        if not isinstance(kn, dict):
            raise ctx.error("point.knots entries must be tables", "point", "knots")
        _check_keys(ctx, kn, ("time", "F"), "point", "knots")
        t = _quantity(ctx, kn.get("time"), "days", "point", "knots")
        Fm = np.asarray(kn.get("F"), dtype=float)
        if Fm.shape != (3, 3) or not np.all(np.isfinite(Fm)) or np.linalg.det(Fm) <= 0:
            raise ctx.error(f"point.knots[{i}].F must be a 3x3 matrix with det > 0",
                            "point", "knots")
        knots.append(PointKnot(t, tuple(map(tuple, Fm.tolist()))))
    if not knots:
        raise ctx.error("point.knots is empty", "point")
    if any(b.time <= a.time for a, b in zip(knots, knots[1:])):
        raise ctx.error("point.knots times must increase", "point", "knots")
    return tuple(knots)


# ---------------------------------------------------------------------------
# canonical serialization


def _fmt(v: float) -> str:
    return repr(float(v))


def _q(v, unit) -> str:
    return f'"{_fmt(v)} {unit}"'


def serialize_config(cfg: SimulationConfig) -> str:
    """Canonical text form; ``parse_config(serialize_config(c)) == c``."""
    u = cfg.units
    lines = [f'scenario = "{cfg.scenario}"', f'units = "{u}"', ""]
    if cfg.geometry:
        lines.append("[geometry]")
        spec = STRIP_GEOMETRY if cfg.scenario == "strip" else CRUCIFORM_GEOMETRY
        for k, unit in spec.items():
            v = cfg.geometry[k]
            lines.append(f"{k} = {int(v)}" if unit is int else f"{k} = {_q(v, unit)}")
        lines.append("")
    lines.append("[params]")
    p = cfg.params
    for key, dim in PARAM_UNITS.items():
        v = getattr(p, PARAM_FIELD.get(key, key))
        if dim is None:
            lines.append(f"{key} = {_fmt(v)}")
        elif dim == "stress":
            lines.append(f"{key} = {_q(v, u)}")
        elif dim == "J/mm3 per stress":
            lines.append(f"{key} = {_q(v, 'J/mm3 per ' + u)}")
        else:
            lines.append(f"{key} = {_q(v, dim)}")
    s = cfg.stepping
    lines += ["", "[stepping]", f"dt_base = {_q(s.dt_base, 'days')}",
              f"dt_max = {_q(s.dt_max, 'days')}", f"horizon = {_q(s.horizon, 'days')}",
              "event_times = [" + ", ".join(_q(t, "days") for t in s.event_times) + "]",
              f"event_step = {_q(s.event_step, 'days')}", f"grow_after = {s.grow_after}",
              f"grow_factor = {_fmt(s.grow_factor)}"]
    f = cfg.fiber_init
    lines += ["", "[fiber_init]", f'mode = "{f.mode}"']
    if f.seed is not None:
        lines.append(f"seed = {f.seed}" if f.seed < 1 << 63 else f'seed = "{f.seed}"')
    lines += [f'plane = "{f.plane}"', f"angle = {_q(f.angle_deg, 'deg')}"]
    o = cfg.outputs
    lines += ["", "[outputs]",
              "snapshot_times = [" + ", ".join(f'"{lab} days"' for lab in o.snapshot_times) + "]",
              f'vtk_dir = "{o.vtk_dir}"', f'csv_path = "{o.csv_path}"']
    if cfg.perturbation is not None:
        pe = cfg.perturbation
        lines += ["", "[perturbation]", f"time = {_q(pe.time, 'days')}",
                  f"fraction = {_fmt(pe.fraction)}", f'mode = "{pe.mode}"']
    lines += ["", "[solver]"]
    for fd in dataclasses.fields(SolverSettings):
        v = getattr(cfg.solver, fd.name)
        if isinstance(v, str):
            lines.append(f'{fd.name} = "{v}"')
        elif isinstance(v, int):
            lines.append(f"{fd.name} = {v}")
        else:
            lines.append(f"{fd.name} = {_fmt(v)}")
    if cfg.point:
        lines += ["", "[point]", "knots = ["]
        for kn in cfg.point:
            rows = ", ".join("[" + ", ".join(_fmt(x) for x in r) + "]" for r in kn.F)
            lines.append(f"  {{ time = {_q(kn.time, 'days')}, F = [{rows}] }},")
        lines.append("]")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# presets and bundled data


def preset_text(name: str) -> str:
    path = resources.files("tissue_maturation") / "presets" / f"{name}.toml"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}")
    return path.read_text(encoding="utf-8")


def list_presets():
    base = resources.files("tissue_maturation") / "presets"
    return sorted(p.name[:-5] for p in base.iterdir() if p.name.endswith(".toml"))


def load_config(source: str) -> SimulationConfig:
    """Parse a config file path, or a bundled preset name."""
    p = Path(source)
    if p.is_file():
        try:
            text = p.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot read config {source}: {exc}") from None
        try:
            return parse_config(text)
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from None
    if re.fullmatch(r"[A-Za-z0-9_]+", source) and source in list_presets():
        return parse_config(preset_text(source))
    raise ConfigError(f"config file not found: {source}")


@dataclass(frozen=True)
class ExperimentalRow:
    day: float
    mean: float
    low: float
    high: float


def load_experimental_dataset():
    """Measured collagen densities of the uniaxial strip (ug/mm^3)."""
    path = resources.files("tissue_maturation") / "data" / "strip_collagen_density.csv"
    rows = []
    with path.open("r", encoding="utf-8") as fh:
        for rec in csv.DictReader(line for line in fh if not line.startswith("#")):
            rows.append(ExperimentalRow(float(rec["day"]), float(rec["mean"]), float(rec["low"]),
                                        float(rec["high"])))
    for r in rows:
        if not r.low <= r.mean <= r.high:
            raise ValueError(f"dataset row {r} violates low <= mean <= high")
    if any(b.day <= a.day for a, b in zip(rows, rows[1:])):
        raise ValueError("dataset days must ascend")
    return rows


# ---------------------------------------------------------------------------
# writers


def _g9(x) -> str:
    return f"{float(x):.9g}"


def cell_fields(mesh: Mesh, st: GlobalState) -> dict:
    """Per-cell averages of the quadrature-point fields written to VTK."""
    ne = mesh.n_elements
    rho0 = st.gp_states.rho_co0.reshape(ne, N_QP)
    out = {"rho_co0": rho0.mean(axis=1)}
    fl = st.fields
    if "J" in fl:
        J = np.asarray(fl["J"]).reshape(ne, N_QP)
        F = np.asarray(fl["F"]).reshape(ne, N_QP, 3, 3)
        S = np.asarray(fl["S"]).reshape(ne, N_QP, 3, 3)
        sig = F @ S @ tc.transpose(F) / J[..., None, None]
        out["J"] = J.mean(axis=1)
        out["rho_current"] = (rho0 / J).mean(axis=1)
        out["cauchy"] = sig.mean(axis=1)
        a = np.einsum("eqij,eqj->eqi", F, np.asarray(fl["a_ref"]).reshape(ne, N_QP, 3))
        a = tc.normalize(a)
        sgn = np.where(np.einsum("eqi,ei->eq", a, a[:, 0]) < 0, -1.0, 1.0)
        fib = (a * sgn[..., None]).mean(axis=1)
        n = np.linalg.norm(fib, axis=-1, keepdims=True)
        out["fiber"] = np.where(n > 0, fib / np.where(n > 0, n, 1.0), 0.0)
    else:
        out["J"] = np.ones(ne)
        out["rho_current"] = out["rho_co0"]
        out["cauchy"] = np.zeros((ne, 3, 3))
        out["fiber"] = tc.normalize(st.gp_states.a_tilde.reshape(ne, N_QP, 3).mean(axis=1))
    return out


def write_vtk_snapshot(mesh: Mesh, st: GlobalState, path, title="tissue maturation"):
    """Legacy ASCII unstructured grid with point displacements and cell fields."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cf = cell_fields(mesh, st)
    ne = mesh.n_elements
    lines = ["# vtk DataFile Version 3.0", f"{title} t={_g9(st.time)} days", "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {mesh.n_nodes} double"]
    lines += [" ".join(_g9(x) for x in p) for p in mesh.nodes]
    lines.append(f"CELLS {ne} {ne * 9}")
    lines += ["8 " + " ".join(str(int(i)) for i in e) for e in mesh.elements]
    lines.append(f"CELL_TYPES {ne}")
    lines += ["12"] * ne
    lines += [f"POINT_DATA {mesh.n_nodes}", "VECTORS displacement double"]
    lines += [" ".join(_g9(x) for x in u) for u in st.displacements]
    lines.append(f"CELL_DATA {ne}")
    for name in ("rho_co0", "rho_current", "J"):
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [_g9(v) for v in cf[name]]
    comps = {"sigma_xx": (0, 0), "sigma_yy": (1, 1), "sigma_zz": (2, 2), "sigma_xy": (0, 1),
             "sigma_yz": (1, 2), "sigma_xz": (0, 2)}
    for name, (i, j) in comps.items():
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [_g9(v) for v in cf["cauchy"][:, i, j]]
    lines.append("VECTORS fiber double")
    lines += [" ".join(_g9(x) for x in v) for v in cf["fiber"]]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def read_vtk_grid(path):
    """Minimal reader for files from :func:`write_vtk_snapshot` (nodes, cells, cell types)."""
    toks = Path(path).read_text(encoding="ascii").split("\n")
    i = 0
    nodes = cells = types = None
    while i < len(toks):
        line = toks[i].strip()
        if line.startswith("POINTS"):
            n = int(line.split()[1])
            nodes = np.array([[float(x) for x in toks[i + 1 + k].split()] for k in range(n)])
            i += n
        elif line.startswith("CELLS"):
            n = int(line.split()[1])
            cells = np.array([[int(x) for x in toks[i + 1 + k].split()[1:]] for k in range(n)])
            i += n
        elif line.startswith("CELL_TYPES"):
            n = int(line.split()[1])
            types = np.array([int(toks[i + 1 + k]) for k in range(n)])
            i += n
        i += 1
    return nodes, cells, types


def timeseries_record(row: TimeSeriesRow) -> list:
    r = row.reactions
    return [row.time, r.get("fx_min", 0.0), r.get("fx_max", 0.0), r.get("fz_min", 0.0),
            r.get("fz_max", 0.0), row.mean_rho_co0, row.mean_J, int(row.newton_iterations)]


def write_timeseries_csv(rows, path):
    """One line per accepted step, ``repr`` floats (17 significant digits)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    last = -math.inf
    for row in rows:
        if row.time < last:
            raise ValueError("time series must be non-decreasing in time")
        last = row.time
    with path.open("w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in rows:
            rec = timeseries_record(row)
            w.writerow([f"{v:.17g}" if isinstance(v, float) else str(v) for v in rec])
    return path


def read_timeseries_csv(path):
    with Path(path).open("r", encoding="ascii") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")
        return [[float(x) for x in rec[:-1]] + [int(rec[-1])] for rec in rd]


# ---------------------------------------------------------------------------
# scenario assembly and execution


@dataclass
class Scenario:
    """A ready-to-march model with its initial state."""

    config: SimulationConfig
    model: object
    initial: GlobalState
    arm_faces: tuple
    perturbation_amount: dict  # mutable {"value": mm}, read by the boundary programs


@dataclass
class RunResult:
    final: GlobalState
    rows: list
    snapshots: dict  # label -> GlobalState
    perturbation_displacement: float | None = None


def solver_options(cfg: SimulationConfig):
    from .fem_solver import SolverOptions
    from .local_integrator import LocalOptions

    s = cfg.solver
    lo = LocalOptions(tol=s.local_tol, max_iter=s.local_max_iter, max_depth=s.local_max_depth,
                      bio_integration=s.bio_integration, direction_method=s.direction_method,
                      pi_mode=s.pi_mode)
    return SolverOptions(tol_rel=s.global_tol_rel, max_iter=s.global_max_iter,
                         max_bisections=s.max_bisections, threads=s.threads, local=lo)


def build_mesh(cfg: SimulationConfig) -> Mesh:
    if cfg.scenario == "strip":
        return build_strip_mesh(**cfg.geometry)
    if cfg.scenario == "cruciform":
        return build_cruciform_mesh(**cfg.geometry)
    raise ConfigError(f"scenario {cfg.scenario!r} has no mesh")


def _moving_face(node_set, direction, holder, t_event, ramp):
    from .fem_solver import DirichletProgram

    d = np.asarray(direction, dtype=float)

    def value(t):
        s = 0.0 if t <= t_event else min(1.0, (t - t_event) / ramp)
        return tuple(holder["value"] * s * d)

    return DirichletProgram(node_set, (True, True, True), value)


def build_scenario(cfg: SimulationConfig) -> Scenario:
    """Mesh, clamped faces, reaction bookkeeping and seeded fibers."""
    from .fem_solver import FEModel, fixed

    mesh = build_mesh(cfg)
    holder = {"value": 0.0}
    if cfg.scenario == "strip":
        programs = [fixed("x_min_face"), fixed("x_max_face")]
        faces = {"fx_min": ("x_min_face", 0), "fx_max": ("x_max_face", 0),
                 "fz_min": ("x_min_face", 2), "fz_max": ("x_max_face", 2)}
        arms = ("fx_min", "fx_max")
    else:
        faces = {"fx_min": ("x_min_face", 0), "fx_max": ("x_max_face", 0),
                 "fz_min": ("z_min_face", 2), "fz_max": ("z_max_face", 2)}
        arms = ("fx_min", "fx_max", "fz_min", "fz_max")
        dirs = {"x_min_face": (-1, 0, 0), "x_max_face": (1, 0, 0),
                "z_min_face": (0, 0, -1), "z_max_face": (0, 0, 1)}
        pe = cfg.perturbation
        if pe is None:
            programs = [fixed(name) for name in dirs]
        else:
            if pe.mode == "displacement":
                holder["value"] = pe.fraction * cfg.geometry["arm_length"]
            programs = [_moving_face(name, d, holder, pe.time, cfg.stepping.event_step)
                        for name, d in dirs.items()]
    model = FEModel(mesh, cfg.params, programs, reaction_faces=faces,
                    options=solver_options(cfg))
    f = cfg.fiber_init
    a = init_fiber_field(mesh, f.mode, f.seed, f.plane, f.angle_deg)
    return Scenario(cfg, model, model.initial_state(a), arms, holder)


def arm_force(row: TimeSeriesRow, arms) -> float:
    """Mean magnitude of the arm (or clamp) reactions."""
    return float(np.mean([abs(row.reactions[a]) for a in arms]))


def _calibrate_force_step(sc: Scenario, st: GlobalState, t_new: float, base: float):
    """Face displacement that raises the mean arm reaction by the perturbation fraction.

    Secant iteration on trial event steps; returns ``(state, row, amount)``.
    """
    target = (1.0 + sc.config.perturbation.fraction) * base
    h = sc.perturbation_amount

    def trial(amount):
        h["value"] = amount
        new, row = sc.model.advance(st, t_new)
        return new, row, arm_force(row, sc.arm_faces) - target

    x0, (s0, r0, g0) = 0.0, trial(0.0)
    x1 = 1e-3 * sc.config.geometry["arm_length"]
    s1, r1, g1 = trial(x1)
    for _ in range(30):
        if abs(g1) <= 1e-6 * target:
            break
        if g1 == g0:
            raise RuntimeError("force perturbation search stalled")
        x2 = x1 - g1 * (x1 - x0) / (g1 - g0)
        x2 = min(max(x2, 0.25 * x1), 4.0 * x1) if x1 > 0 else x2
        x0, g0 = x1, g1
        x1 = x2
        s1, r1, g1 = trial(x1)
    return s1, r1, x1


def run_scenario(sc: Scenario, on_step=None) -> RunResult:
    """March the scenario to the horizon, keeping the configured snapshots.

    A snapshot holds the first accepted state at or after its nominal time;
    snapshots never alter the step sequence.
    """
    from .fem_solver import march

    cfg = sc.config
    stp = cfg.stepping
    pending = sorted(((snapshot_time(lab, stp.event_step), lab)
                      for lab in cfg.outputs.snapshot_times), key=lambda x: x[0])
    snaps = {}
    rows = []

    def record(st, row):
        while pending and st.time >= pending[0][0] - 1e-9:
            snaps[pending.pop(0)[1]] = st.copy()
        if row is not None:
            rows.append(row)
            if on_step is not None:
                on_step(st, row)

    st = sc.initial
    record(st, None)
    pe = cfg.perturbation
    amount = None
    if pe is None:
        st, _ = march(sc.model, st, stp, record)
    else:
        st, _ = march(sc.model, st, dataclasses.replace(stp, horizon=pe.time), record)
        t_new = pe.time + stp.event_step
        if pe.mode == "force":
            st, row, amount = _calibrate_force_step(sc, st, t_new, arm_force(rows[-1],
                                                                              sc.arm_faces))
        else:
            st, row = sc.model.advance(st, t_new)
            amount = sc.perturbation_amount["value"]
        record(st, row)
        rest = dataclasses.replace(
            stp, event_times=tuple(t for t in stp.event_times if t != pe.time))
        st, _ = march(sc.model, st, rest, record)
    return RunResult(st, rows, snaps, amount)


def run_material_point(cfg: SimulationConfig, on_step=None):
    """Drive one integration point with the piecewise-linear F(t) program.

    Returns a list of :class:`PointSample`, starting at t = 0.

    Raises:
        SolverError: when local integration fails, naming the failed step.
    """
    from .constitutive import GaussPointState, evaluate_stress
    from .fem_solver import SolverError
    from .local_integrator import LocalConvergenceError, integrate_point

    knots = cfg.point or (PointKnot(0.0, tuple(map(tuple, np.eye(3)))),)
    times = np.array([k.time for k in knots])
    Fs = np.array([np.asarray(k.F, dtype=float) for k in knots])

    def F_at(t):
        if len(knots) == 1 or t <= times[0]:
            return Fs[0]
        if t >= times[-1]:
            return Fs[-1]
        i = int(np.searchsorted(times, t, side="right")) - 1
        w = (t - times[i]) / (times[i + 1] - times[i])
        return (1 - w) * Fs[i] + w * Fs[i + 1]

    f = cfg.fiber_init
    a0 = plane_vectors(f.angle_deg, f.plane)
    if f.mode == "in_plane_uniform":
        a0 = plane_vectors(180.0 * SplitMix64(f.seed).next_float(), f.plane)
    st = GaussPointState.initial(a0[None])
    opts = solver_options(cfg).local
    b0 = evaluate_stress(F_at(0.0)[None], st, cfg.params, pi_mode=opts.pi_mode)
    out = [PointSample(0.0, st, b0, None)]
    dt0 = cfg.stepping.dt_base
    n = int(math.ceil(cfg.stepping.horizon / dt0 - 1e-9))
    for k in range(1, n + 1):
        t = min(k * dt0, cfg.stepping.horizon)
        try:
            res = integrate_point(F_at(t)[None], t, t - out[-1].time, st, cfg.params, opts,
                                  dissipation=True)
        except LocalConvergenceError as exc:
            raise SolverError(f"material point failed in step {k} (t={t:.6g} days): {exc}") \
                from exc
        st = res.state_new
        out.append(PointSample(t, st, res.stress, res.dissipation))
        if on_step is not None:
            on_step(out[-1])
    return out


@dataclass
class PointSample:
    time: float
    state: object
    stress: object
    dissipation: object


def write_outputs(sc: Scenario, result: RunResult, out_dir) -> dict:
    """Time-series CSV plus one VTK file per snapshot, paths relative to ``out_dir``."""
    out_dir = Path(out_dir)
    o = sc.config.outputs
    paths = {"csv": write_timeseries_csv(result.rows, out_dir / o.csv_path), "vtk": {}}
    for lab, st in result.snapshots.items():
        tag = lab.replace("-", "minus").replace("+", "plus").replace(".", "p")
        paths["vtk"][lab] = write_vtk_snapshot(sc.model.mesh, st,
                                               out_dir / o.vtk_dir / f"snapshot_{tag}.vtk")
    return paths
