"""Total-Lagrangian quasi-static finite elements with hex8 bricks.

Trilinear hexahedra with full 2x2x2 Gauss quadrature; internal variables live
at the 8 quadrature points of every element (element-major order). Boundary
conditions are prescribed displacements with time programs; there are no body
forces or tractions, so the response is driven by growth and by the
prescribed motion alone.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import tensor_core as tc
from .constitutive import GaussPointState, MaterialParams
from .local_integrator import (
    DEFAULT_OPTIONS,
    LocalConvergenceError,
    LocalOptions,
    integrate_point,
)

log = logging.getLogger(__name__)

# VTK hexahedron node order in the parent cube
HEX8_CORNERS = np.array([
    [-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
    [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1],
], dtype=float)
_G = 1.0 / math.sqrt(3.0)
GAUSS_POINTS = HEX8_CORNERS * _G
GAUSS_WEIGHTS = np.ones(8)
N_QP = 8


class MeshError(ValueError):
    pass


class AssemblyError(RuntimeError):
    def __init__(self, msg, qp=None):
        super().__init__(msg)
        self.qp = qp


class SolverError(RuntimeError):
    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


def shape_functions(xi):
    """Values ``(..., 8)`` and parent gradients ``(..., 8, 3)`` at ``xi``."""
    xi = np.asarray(xi, dtype=float)
    c = HEX8_CORNERS
    t = 1.0 + xi[..., None, :] * c  # (..., 8, 3)
    N = 0.125 * t[..., 0] * t[..., 1] * t[..., 2]
    dN = np.empty(xi.shape[:-1] + (8, 3))
    dN[..., 0] = 0.125 * c[:, 0] * t[..., 1] * t[..., 2]
    dN[..., 1] = 0.125 * c[:, 1] * t[..., 0] * t[..., 2]
    dN[..., 2] = 0.125 * c[:, 2] * t[..., 0] * t[..., 1]
    return N, dN


_, DN_PARENT = shape_functions(GAUSS_POINTS)  # (8 qp, 8 nodes, 3)


@dataclass
class Mesh:
    nodes: np.ndarray  # (n_nodes, 3) mm
    elements: np.ndarray  # (n_elem, 8)
    node_sets: dict = field(default_factory=dict)
    element_sets: dict = field(default_factory=dict)

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    def validate(self):
        if self.elements.size and (self.elements.min() < 0 or self.elements.max() >= self.n_nodes):
            raise MeshError("element connectivity references missing nodes")
        _, _, wdetJ = reference_geometry(self)
        return wdetJ


def reference_geometry(mesh: Mesh):
    """Reference Jacobians: ``(dN/dX (e, q, a, 3), detJ (e, q), w*detJ (e, q))``."""
    Xe = mesh.nodes[mesh.elements]  # (e, 8, 3)
    Jm = np.einsum("qaj,eai->eqij", DN_PARENT, Xe)  # dX_i/dxi_j
    detJ = tc.det(Jm)
    if np.any(detJ <= 0.0):
        bad = np.argwhere(detJ <= 0.0)[0]
        raise MeshError(f"non-positive reference Jacobian in element {bad[0]}")
    Jinv = tc.inv(Jm)
    dNdX = np.einsum("qaj,eqji->eqai", DN_PARENT, Jinv)
    return dNdX, detJ, detJ * GAUSS_WEIGHTS


def hex8_quadrature(X_e, u_e):
    """Deformation gradients at the 8 Gauss points of each element.

    Args:
        X_e: reference nodal coordinates ``(n_elem, 8, 3)``.
        u_e: nodal displacements ``(n_elem, 8, 3)``.

    Returns:
        ``(F, dNdX, wdetJ)`` with shapes ``(e, 8, 3, 3)``, ``(e, 8, 8, 3)``,
        ``(e, 8)``.
    """
    X_e = np.asarray(X_e, dtype=float).reshape(-1, 8, 3)
    u_e = np.asarray(u_e, dtype=float).reshape(-1, 8, 3)
    Jm = np.einsum("qaj,eai->eqij", DN_PARENT, X_e)
    detJ = tc.det(Jm)
    if np.any(detJ <= 0.0):
        raise MeshError("non-positive reference Jacobian")
    dNdX = np.einsum("qaj,eqji->eqai", DN_PARENT, tc.inv(Jm))
    F = tc.EYE + np.einsum("eai,eqaj->eqij", u_e, dNdX)
    return F, dNdX, detJ * GAUSS_WEIGHTS


@dataclass
class DirichletProgram:
    """Prescribed displacement of a node set.

    ``value_fn(t)`` returns the displacement (mm) of the masked components,
    as an array of length 3 (unmasked entries are ignored).
    """

    node_set: str
    dof_mask: tuple
    value_fn: Callable[[float], Sequence[float]]


def fixed(node_set: str, mask=(True, True, True)) -> DirichletProgram:
    return DirichletProgram(node_set, tuple(mask), lambda t: (0.0, 0.0, 0.0))


def step_program(node_set: str, direction, amount: float, t_event: float, ramp: float):
    """Clamped face that moves by ``amount * direction`` in ``[t_event, t_event + ramp]``."""
    d = np.asarray(direction, dtype=float)

    def value(t):
        s = 0.0 if t <= t_event else min(1.0, (t - t_event) / ramp)
        return tuple(amount * s * d)

    return DirichletProgram(node_set, (True, True, True), value)


@dataclass
class GlobalState:
    displacements: np.ndarray  # (n_nodes, 3)
    gp_states: GaussPointState  # n_elem * 8 points, element-major
    time: float
    fields: dict = field(default_factory=dict)

    def copy(self):
        return GlobalState(self.displacements.copy(), self.gp_states.copy(), self.time,
                           {k: np.array(v) for k, v in self.fields.items()})


@dataclass
class TimeSeriesRow:
    time: float
    reactions: dict
    mean_rho_co0: float
    mean_J: float
    newton_iterations: int
    dt: float = 0.0


@dataclass
class SolverOptions:
    tol_rel: float = 1e-8
    tol_abs: float = 1e-12
    max_iter: int = 25
    max_bisections: int = 8
    refresh_ratio: float = 0.25
    threads: int = 1
    local: LocalOptions = DEFAULT_OPTIONS


class FEModel:
    """Mesh, parameters and boundary programs with cached geometry."""

    def __init__(self, mesh: Mesh, params: MaterialParams, programs: Sequence[DirichletProgram],
                 reaction_faces: dict | None = None, options: SolverOptions | None = None):
        self.mesh = mesh
        self.params = params
        self.programs = list(programs)
        self.opts = options or SolverOptions()
        self.dNdX, self.detJ, self.wdetJ = reference_geometry(mesh)
        self.n_dof = 3 * mesh.n_nodes
        self.n_qp = mesh.n_elements * N_QP
        edofs = (3 * mesh.elements[:, :, None] + np.arange(3)).reshape(mesh.n_elements, 24)
        self.edofs = edofs
        self.rows = np.repeat(edofs, 24, axis=1).ravel()
        self.cols = np.tile(edofs, (1, 24)).ravel()
        self.reaction_faces = reaction_faces or {}
        fixed_mask = np.zeros((mesh.n_nodes, 3), dtype=bool)
        for pr in self.programs:
            fixed_mask[mesh.node_sets[pr.node_set]] |= np.asarray(pr.dof_mask)
        self.fixed = fixed_mask.ravel()
        self.free = ~self.fixed
        self.volume = float(self.wdetJ.sum())

    # -- kinematics ---------------------------------------------------------
    def deformation_gradients(self, u):
        ue = u[self.mesh.elements]  # (e, 8, 3)
        return tc.EYE + np.einsum("eai,eqaj->eqij", ue, self.dNdX)

    def prescribed(self, t):
        u = np.zeros((self.mesh.n_nodes, 3))
        for pr in self.programs:
            nodes = self.mesh.node_sets[pr.node_set]
            val = np.asarray(pr.value_fn(t), dtype=float)
            for d in range(3):
                if pr.dof_mask[d]:
                    u[nodes, d] = val[d]
        return u

    def apply_dirichlet(self, u, t):
        out = u.copy().ravel()
        out[self.fixed] = self.prescribed(t).ravel()[self.fixed]
        return out.reshape(-1, 3)

    # -- material -----------------------------------------------------------
    def _material(self, F, t_new, dt, old: GaussPointState, warm, tangent=True):
        p, lo = self.params, self.opts.local
        nt = max(1, int(self.opts.threads))
        z0, jac = (None, None) if warm is None else (warm.get("z"), warm.get("jac"))

        def run(idx):
            return integrate_point(
                F[idx], t_new, dt, old.take(idx), p, lo, tangent=tangent,
                z0=None if z0 is None else z0[idx], jac_hint=None if jac is None else jac[idx])

        if nt == 1 or F.shape[0] < 2 * nt:
            res = run(np.arange(F.shape[0]))
        else:
            chunks = np.array_split(np.arange(F.shape[0]), nt)
            with ThreadPoolExecutor(max_workers=nt) as ex:
                res = _concat_results(list(ex.map(run, chunks)))
        if warm is not None:
            warm["z"] = res.extra["z"]
            if "jacobian" in res.extra:
                warm["jac"] = res.extra["jacobian"]
        return res

    def assemble(self, u, t_new, dt, gp_old: GaussPointState, need_tangent=True, warm=None):
        """Internal force vector, tangent matrix and the trial material results.

        ``warm`` is a per-step scratch dict: the converged local unknowns and
        Jacobians of one call seed the next call within the same step.
        """
        F = self.deformation_gradients(u).reshape(-1, 3, 3)
        if np.any(tc.det(F) <= 0.0):
            bad = int(np.flatnonzero(tc.det(F) <= 0.0)[0])
            raise AssemblyError(f"inverted element at quadrature point {bad}", qp=bad)
        try:
            res = self._material(F, t_new, dt, gp_old, warm, tangent=need_tangent)
        except LocalConvergenceError as exc:
            qp = None if exc.failed is None else int(exc.failed[0])
            raise AssemblyError(f"local integration failed (qp {qp}): {exc}", qp=qp) from exc
        ne = self.mesh.n_elements
        S = res.stress.S.reshape(ne, N_QP, 3, 3)
        Fe = F.reshape(ne, N_QP, 3, 3)
        P = Fe @ S
        w = self.wdetJ
        fe = np.einsum("eqiJ,eqaJ->eai", P * w[..., None, None], self.dNdX)
        f = np.bincount(self.edofs.ravel(), weights=fe.reshape(-1), minlength=self.n_dof)
        K = None
        if need_tangent:
            D = 2.0 * tc.unpack_minor(res.tangent).reshape(ne, N_QP, 3, 3, 3, 3)  # dS/dE
            A = np.einsum("eqMJNL,eqiM,eqkN->eqiJkL", D, Fe, Fe, optimize=True)
            A += np.einsum("ik,eqJL->eqiJkL", tc.EYE, S)
            A *= w[..., None, None, None, None]
            BA = np.einsum("eqaJ,eqiJkL->eqaikL", self.dNdX, A, optimize=True)
            Ke = np.einsum("eqaikL,eqbL->eaibk", BA, self.dNdX, optimize=True)
            K = sp.coo_matrix((Ke.reshape(-1), (self.rows, self.cols)),
                              shape=(self.n_dof, self.n_dof)).tocsc()
        return f, K, res

    def reactions(self, f):
        fr = f.reshape(-1, 3)
        out = {}
        for name, (node_set, comp) in self.reaction_faces.items():
            out[name] = float(fr[self.mesh.node_sets[node_set], comp].sum())
        return out

    def volume_mean(self, qp_values):
        v = np.asarray(qp_values).reshape(self.mesh.n_elements, N_QP)
        return float((v * self.wdetJ).sum() / self.volume)

    # -- stepping -----------------------------------------------------------
    def initial_state(self, a_tilde_qp) -> GlobalState:
        gp = GaussPointState.initial(a_tilde_qp)
        if len(gp) != self.n_qp:
            raise ValueError(f"expected {self.n_qp} fiber vectors, got {len(gp)}")
        st = GlobalState(np.zeros((self.mesh.n_nodes, 3)), gp, 0.0)
        f, _, res = self.assemble(st.displacements, 0.0, 0.0, gp, need_tangent=False)
        self._store_fields(st, res, f)
        return st

    def _store_fields(self, st: GlobalState, res, f):
        b = res.stress
        F = self.deformation_gradients(st.displacements).reshape(-1, 3, 3)
        st.fields = {
            "F": F, "S": b.S, "J": b.J, "a_ref": b.a_ref, "psi_co": b.psi_co,
            "psi_co_mass": b.psi_co_mass, "tau_tilde": b.tau_tilde, "f_int": f,
        }

    def _factor(self, K):
        free = self.free
        Kff = sp.csc_matrix(K[free][:, free])
        return spla.splu(Kff) if Kff.shape[0] else None, K[free][:, self.fixed]

    def solve_step(self, st: GlobalState, t_new: float, dt: float):
        """One implicit load/time increment; returns ``(new_state, row)``.

        Modified Newton: the factorized stiffness of an earlier iteration (or
        step, when ``dt`` is unchanged) is reused while the residual contracts
        by at least ``refresh_ratio`` per iteration, and re-formed otherwise.

        Raises:
            SolverError: when Newton fails (the caller may bisect ``dt``).
        """
        o = self.opts
        u_old = st.displacements
        gp_old = st.gp_states
        u_pres = self.apply_dirichlet(u_old, t_new).ravel()
        du_c = (u_pres - u_old.ravel())
        u = u_old.ravel().copy()
        free = self.free
        cache = getattr(self, "_cache", None)
        if cache is None or cache["dt"] != dt:
            cache = {"dt": dt, "jac": np.full((self.n_qp, 17, 17), np.nan), "lu": None}
        warm = {"jac": cache["jac"].copy()}
        lu = cache["lu"]
        jump = bool(np.any(du_c[self.fixed] != 0.0))
        try:
            fresh = lu is None or jump
            f, K, res = self.assemble(u_old, t_new, dt, gp_old, need_tangent=fresh, warm=warm)
            if fresh:
                lu = self._factor(K)
            if jump:
                # predictor: prescribed increment pushed through the current tangent
                rhs = -(f[free] + lu[1] @ du_c[self.fixed])
                u[free] += _lu_solve(lu[0], rhs)
                u[self.fixed] = u_pres[self.fixed]
                f, K, res = self.assemble(u.reshape(-1, 3), t_new, dt, gp_old,
                                          need_tangent=True, warm=warm)
                lu = self._factor(K)
            iters = 0
            prev = np.inf
            while True:
                r = f[free]
                rn = np.max(np.abs(r)) if r.size else 0.0
                scale = max(o.tol_rel * np.max(np.abs(f)), o.tol_abs)
                if not np.isfinite(rn):
                    raise SolverError("non-finite residual")
                if rn <= scale:
                    break
                if iters >= o.max_iter:
                    raise SolverError(f"global Newton did not converge (|r|={rn:.3e})")
                if not fresh and rn > o.refresh_ratio * prev:
                    f, K, res = self.assemble(u.reshape(-1, 3), t_new, dt, gp_old,
                                              need_tangent=True, warm=warm)
                    lu = self._factor(K)
                    fresh = True
                    r = f[free]
                else:
                    fresh = False
                prev = rn
                u[free] += _lu_solve(lu[0], -r)
                iters += 1
                f, K, res = self.assemble(u.reshape(-1, 3), t_new, dt, gp_old,
                                          need_tangent=False, warm=warm)
        except (AssemblyError, np.linalg.LinAlgError, RuntimeError) as exc:
            self._cache = None
            if isinstance(exc, SolverError):
                raise
            raise SolverError(str(exc)) from exc
        self._cache = {"dt": dt, "jac": warm["jac"], "lu": lu}
        new = GlobalState(u.reshape(-1, 3), res.state_new, t_new)
        self._store_fields(new, res, f)
        row = TimeSeriesRow(
            time=t_new, reactions=self.reactions(f),
            mean_rho_co0=self.volume_mean(res.state_new.rho_co0),
            mean_J=self.volume_mean(res.stress.J), newton_iterations=iters, dt=dt,
        )
        return new, row

    def advance(self, st: GlobalState, t_new: float):
        """``solve_step`` with recursive bisection of the increment."""
        return self._advance(st, t_new, t_new - st.time, 0)

    def _advance(self, st, t_new, dt, depth):
        try:
            return self.solve_step(st, t_new, dt)
        except SolverError as exc:
            if depth >= self.opts.max_bisections:
                raise SolverError(
                    f"step to t={t_new:.6g} failed after {depth} bisections: {exc}", state=st
                ) from exc
            log.info("bisecting step t=%.6g dt=%.3g (%s)", t_new, dt, exc)
            mid, row1 = self._advance(st, t_new - 0.5 * dt, 0.5 * dt, depth + 1)
            new, row2 = self._advance(mid, t_new, 0.5 * dt, depth + 1)
            row2.newton_iterations += row1.newton_iterations
            row2.dt = dt
            return new, row2


def _lu_solve(lu, rhs):
    if lu is None:
        return np.zeros(0)
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        raise np.linalg.LinAlgError("singular tangent")
    return x


def _concat_results(parts):
    from .local_integrator import StepResult
    from .constitutive import StressBundle
    import dataclasses

    def cat(objs):
        first = objs[0]
        kw = {}
        for fd in dataclasses.fields(first):
            vals = [getattr(o, fd.name) for o in objs]
            if isinstance(vals[0], np.ndarray):
                kw[fd.name] = np.concatenate(vals, axis=0)
            elif isinstance(vals[0], dict):
                kw[fd.name] = {k: np.concatenate([v[k] for v in vals], axis=0) for k in vals[0]}
            else:
                kw[fd.name] = vals[0]
        return type(first)(**kw)

    return StepResult(
        state_new=cat([r.state_new for r in parts]),
        stress=cat([r.stress for r in parts]),
        iterations=np.concatenate([r.iterations for r in parts]),
        residual_norm=np.concatenate([r.residual_norm for r in parts]),
        substeps=np.concatenate([r.substeps for r in parts]),
        tangent=np.concatenate([r.tangent for r in parts]),
        extra={k: np.concatenate([r.extra[k] for r in parts]) for k in parts[0].extra},
    )


@dataclass
class Stepping:
    dt_base: float = 0.1
    dt_max: float = 0.25
    horizon: float = 28.0
    event_times: tuple = ()
    event_step: float = 0.01
    grow_after: int = 4
    grow_factor: float = 1.5


def time_grid_hits(stepping: Stepping):
    hits = {stepping.horizon}
    for te in stepping.event_times:
        if 0.0 < te < stepping.horizon:
            hits.add(te)
            hits.add(min(te + stepping.event_step, stepping.horizon))
    return sorted(hits)


def march(model: FEModel, st: GlobalState, stepping: Stepping,
          on_step: Callable[[GlobalState, TimeSeriesRow], None] | None = None):
    """March from ``st.time`` to the horizon; returns ``(final_state, rows)``.

    The step size is ``dt_base``, grown by ``grow_factor`` after
    ``grow_after`` consecutive accepted steps up to ``dt_max``; event times
    (and the end of each event ramp) are hit exactly and the step that
    follows an event always starts again from ``dt_base``.
    """
    rows = []
    hits = time_grid_hits(stepping)
    dt = stepping.dt_base
    streak = 0
    eps = 1e-9
    events = set(stepping.event_times)
    while st.time < stepping.horizon - eps:
        t = st.time
        nxt = next(h for h in hits if h > t + eps)
        in_event = any(abs(t - te) < eps for te in events)
        step = stepping.event_step if in_event else dt
        step = min(step, nxt - t)
        t_new = nxt if abs(t + step - nxt) < eps else t + step
        st, row = model.advance(st, t_new)
        rows.append(row)
        if on_step is not None:
            on_step(st, row)
        if in_event:
            streak = 0
            dt = stepping.dt_base
            continue
        streak += 1
        if streak >= stepping.grow_after and dt < stepping.dt_max:
            dt = min(dt * stepping.grow_factor, stepping.dt_max)
            streak = 0
    return st, rows


def run_simulation(config):
    """Build and march a parsed scenario config; returns a ``RunResult``."""
    from .scenarios_io import build_scenario, run_scenario

    return run_scenario(build_scenario(config))
