"""Implicit exponential update of the internal variables at integration points.

Unknown vector per point (length 17)::

    [0:6]   U_gm   (xx, yy, zz, xy, yz, xz)
    [6:12]  U_gco
    [12:15] a_tilde
    [15]    gamma_dot
    [16]    rho_co0

The residual is solved by Newton's method with a forward-difference Jacobian.
Everything is batched: ``F_new`` has shape ``(n, 3, 3)`` and the state holds
``n`` points; points that fail to converge are re-integrated with recursively
bisected time steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import growth_laws as gl
from . import tensor_core as tc
from .constitutive import GaussPointState, MaterialParams, StressBundle, evaluate_stress

N_UNKNOWNS = 17
SL_UGM = slice(0, 6)
SL_UGCO = slice(6, 12)
SL_A = slice(12, 15)
I_GD = 15
I_RHO = 16

INV_SQRT3 = 1.0 / math.sqrt(3.0)


class LocalConvergenceError(RuntimeError):
    def __init__(self, msg, residual_norm=float("nan"), failed=None):
        super().__init__(msg)
        self.residual_norm = residual_norm
        self.failed = failed


@dataclass(frozen=True)
class LocalOptions:
    tol: float = 1e-10
    max_iter: int = 50
    max_depth: int = 10
    fd_step: float = 1e-7
    tangent_step: float = 1e-6
    bio_integration: str = "exact"  # or "backward_euler"
    direction_method: str = "analytic"  # or "fd"
    pi_mode: str = "dyadic"


DEFAULT_OPTIONS = LocalOptions()


def flatten_state(s: GaussPointState) -> np.ndarray:
    n = len(s)
    z = np.empty((n, N_UNKNOWNS))
    z[:, SL_UGM] = tc.sym_to_vec(s.U_gm)
    z[:, SL_UGCO] = tc.sym_to_vec(s.U_gco)
    z[:, SL_A] = s.a_tilde
    z[:, I_GD] = s.gamma_dot
    z[:, I_RHO] = s.rho_co0
    return z


def unflatten_state(z) -> GaussPointState:
    z = np.atleast_2d(z)
    return GaussPointState(
        U_gm=tc.vec_to_sym(z[:, SL_UGM]),
        U_gco=tc.vec_to_sym(z[:, SL_UGCO]),
        a_tilde=np.array(z[:, SL_A]),
        gamma_dot=np.array(z[:, I_GD]),
        rho_co0=np.array(z[:, I_RHO]),
    )


def _gamma_scale(p: MaterialParams) -> float:
    return max(abs(4.0 * p.sigma_g0**2 - p.beta_g), p.sigma_g0**2, 1e-12)


def bio_increment(t_new, dt, p: MaterialParams, mode: str):
    if mode == "exact":
        return p.a1 * p.c_cell * (gl.weibull_cdf(t_new, p) - gl.weibull_cdf(t_new - dt, p))
    if mode == "backward_euler":
        return dt * gl.collagen_rate_bio(t_new, p)
    raise ValueError(f"unknown bio_integration {mode!r}")


def _evaluate(z, F, U, t_new, dt, old: GaussPointState, p: MaterialParams, opts: LocalOptions):
    """Residual rows, stress bundle and a mask of inadmissible rows."""
    n = z.shape[0]
    Ugm = tc.vec_to_sym(z[:, SL_UGM])
    Ugco = tc.vec_to_sym(z[:, SL_UGCO])
    a = z[:, SL_A]
    gd = z[:, I_GD]
    rho = z[:, I_RHO]

    bad = (tc.det(Ugm) <= 0) | (tc.det(Ugco) <= 0) | (np.linalg.norm(a, axis=-1) < 1e-8)
    bad |= ~np.all(np.isfinite(z), axis=-1)
    if np.any(bad):
        Ugm = np.where(bad[:, None, None], tc.EYE, Ugm)
        Ugco = np.where(bad[:, None, None], tc.EYE, Ugco)
        a = np.where(bad[:, None], old.a_tilde, a)
        gd = np.where(bad, 0.0, gd)
        rho = np.where(bad, 0.0, rho)

    st = GaussPointState(Ugm, Ugco, a, gd, rho)
    with np.errstate(over="ignore", invalid="ignore"):
        b = evaluate_stress(F, st, p, pi_mode=opts.pi_mode, U=U)
        sigma_g = gl.homeostatic_stress(rho / b.J, p)
        phi = gl.homeostatic_surface(b.Y_g, b.J, sigma_g, p.beta_g)
        if opts.direction_method == "analytic":
            Nco = gl.collagen_direction_raw(b.Ce_co, b.M_bar, b.J)
            Nco_hat, _ = gl._normalized(Nco)
        else:
            _, Nco_hat, _, _ = gl.flow_directions(b, p, method="fd")

        R = np.empty((n, N_UNKNOWNS))
        # matrix direction is always I / sqrt(3): its exponential is a scalar
        R[:, SL_UGM] = tc.sym_to_vec(Ugm - np.exp(dt * gd * INV_SQRT3)[:, None, None] * old.U_gm)
        E = tc.exp_sym((dt * gd)[:, None, None] * Nco_hat)
        R[:, SL_UGCO] = tc.sym_to_vec(Ugco - tc.sym(E @ old.U_gco))
        # overflowing fiber energies make the stress non-finite: flag, don't crash
        finite = np.all(np.isfinite(b.tau_tilde), axis=(-2, -1))
        bad |= ~finite
        tau_safe = np.where(finite[:, None, None], b.tau_tilde, 0.0)
        adot = gl.fiber_rate(a, tau_safe, p.eta_s)
        R[:, SL_A] = a - tc.normalize(old.a_tilde + dt * adot)
        visc = (4.0 * sigma_g**2 - p.beta_g) * gl.signed_power(p.eta_g * gd, p.v_g)
        R[:, I_GD] = (phi - visc) / _gamma_scale(p)
        mech = gl.collagen_rate_mech(rho, b.psi_co_mass, p)
        R[:, I_RHO] = rho - old.rho_co0 - bio_increment(t_new, dt, p, opts.bio_integration) - dt * mech

    bad |= ~np.all(np.isfinite(R), axis=-1)
    R[bad] = np.nan
    b.extra["phi_g"] = phi
    b.extra["sigma_g"] = sigma_g
    b.extra["N_hat_co"] = Nco_hat
    b.extra["a_tilde_dot"] = adot
    return R, b, bad


def local_residual(z, F_new, t_new, dt, state_old: GaussPointState, p: MaterialParams,
                   opts: LocalOptions = DEFAULT_OPTIONS):
    """Residual of the implicit update evaluated at unknowns ``z``.

    Raises:
        tc.TensorInputError: when ``det F_new <= 0``.
    """
    F = np.asarray(F_new, dtype=float).reshape(-1, 3, 3)
    _, U = tc.polar_decompose(F)
    R, _, _ = _evaluate(np.atleast_2d(z), F, U, t_new, dt, state_old, p, opts)
    return R


def _fd_jacobian(z, F, U, t_new, dt, old, p, opts, R0=None, want_stress=False):
    n = z.shape[0]
    h = opts.fd_step * np.maximum(1.0, np.abs(z))  # (n, 17)
    Z = np.repeat(z[:, None, :], N_UNKNOWNS, axis=1)
    idx = np.arange(N_UNKNOWNS)
    Z[:, idx, idx] += h
    Zf = Z.reshape(-1, N_UNKNOWNS)
    Fr = np.repeat(F, N_UNKNOWNS, axis=0)
    Ur = np.repeat(U, N_UNKNOWNS, axis=0)
    old_r = old.take(np.repeat(np.arange(n), N_UNKNOWNS))
    Rp, bp, _ = _evaluate(Zf, Fr, Ur, t_new, dt, old_r, p, opts)
    if R0 is None:
        R0, b0, _ = _evaluate(z, F, U, t_new, dt, old, p, opts)
    Rp = Rp.reshape(n, N_UNKNOWNS, N_UNKNOWNS)  # [point, column, row]
    with np.errstate(over="ignore", invalid="ignore"):
        Jac = np.swapaxes((Rp - R0[:, None, :]) / h[:, :, None], 1, 2)
    if not want_stress:
        return Jac
    return Jac, bp.S.reshape(n, N_UNKNOWNS, 3, 3), h


def _inf(x):
    return np.max(np.abs(x), axis=-1)


@dataclass
class StepResult:
    state_new: GaussPointState
    stress: StressBundle
    iterations: np.ndarray
    residual_norm: np.ndarray
    substeps: np.ndarray
    dissipation: gl.DissipationReport | None = None
    tangent: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def _newton(F, U, t_new, dt, old: GaussPointState, p, opts, z0=None, jac_store=None):
    """One Newton solve over a batch; returns (z, converged, iters, rnorm).

    ``z0`` is an optional initial guess. When ``jac_store`` (n, 17, 17) is
    given, its finite rows are reused as (chord) Jacobians and only refreshed
    when the residual fails to drop by a factor of 4; every Jacobian formed is
    written back into it.
    """
    z = flatten_state(old) if z0 is None else np.array(z0, dtype=float)
    n = z.shape[0]
    iters = np.zeros(n, dtype=int)
    rnorm = np.full(n, np.inf)
    prev = np.full(n, np.inf)
    if jac_store is None:
        jac_store = np.full((n, N_UNKNOWNS, N_UNKNOWNS), np.nan)
    have = np.all(np.isfinite(jac_store), axis=(1, 2))
    fresh = np.zeros(n, dtype=bool)
    active = np.arange(n)
    converged = np.zeros(n, dtype=bool)
    failed = np.zeros(n, dtype=bool)
    for it in range(opts.max_iter + 1):
        if active.size == 0:
            break
        za = z[active]
        Fa, Ua, olda = F[active], U[active], old.take(active)
        R, _, bad = _evaluate(za, Fa, Ua, t_new, dt, olda, p, opts)
        rn = _inf(R)
        rnorm[active] = rn
        ok = (rn < opts.tol * (1.0 + _inf(za))) & ~bad
        converged[active[ok]] = True
        failed[active[bad]] = True
        keep = ~ok & ~bad
        if it == opts.max_iter:
            failed[active[keep]] = True
            break
        active = active[keep]
        if active.size == 0:
            break
        za, R, rn = za[keep], R[keep], rn[keep]
        slow = ~have[active] | (~fresh[active] & (rn > 0.25 * prev[active]))
        prev[active] = rn
        Jac = np.empty((active.size, N_UNKNOWNS, N_UNKNOWNS))
        Jac[~slow] = jac_store[active[~slow]]
        fresh[active] = False
        if np.any(slow):
            k = np.flatnonzero(slow)
            sel = active[k]
            Jac[k] = _fd_jacobian(za[k], F[sel], U[sel], t_new, dt, old.take(sel), p, opts, R0=R[k])
            fresh[sel] = True
            have[sel] = True
            jac_store[sel] = Jac[k]
        good = np.all(np.isfinite(Jac), axis=(1, 2))
        dz = np.zeros_like(za)
        if np.any(good):
            try:
                dz[good] = np.linalg.solve(Jac[good], -R[good][..., None])[..., 0]
            except np.linalg.LinAlgError:
                for k in np.flatnonzero(good):
                    try:
                        dz[k] = np.linalg.solve(Jac[k], -R[k])
                    except np.linalg.LinAlgError:
                        good[k] = False
        failed[active[~good]] = True
        z[active] = za + dz
        iters[active] += 1
        active = active[good]
    return z, converged & ~failed, iters, rnorm


def _integrate(F, U, t_new, dt, old: GaussPointState, p, opts, depth, z0=None, jac_store=None):
    """Returns (z, iters, rnorm, substeps); raises on exhausted bisection."""
    z, ok, iters, rnorm = _newton(F, U, t_new, dt, old, p, opts, z0=z0, jac_store=jac_store)
    substeps = np.ones(len(old), dtype=int)
    if np.all(ok):
        return z, iters, rnorm, substeps
    bad = np.flatnonzero(~ok)
    if depth >= opts.max_depth or dt <= 0.0:
        raise LocalConvergenceError(
            f"local integration failed at {bad.size} point(s) after {depth} bisections",
            residual_norm=float(np.nanmax(np.where(np.isfinite(rnorm[bad]), rnorm[bad], np.inf))),
            failed=bad,
        )
    half = 0.5 * dt
    old_b = old.take(bad)
    z1, i1, _, s1 = _integrate(F[bad], U[bad], t_new - half, half, old_b, p, opts, depth + 1)
    mid = _finish_state(z1)
    z2, i2, r2, s2 = _integrate(F[bad], U[bad], t_new, half, mid, p, opts, depth + 1)
    z[bad] = z2
    iters[bad] = i1 + i2
    rnorm[bad] = r2
    substeps[bad] = s1 + s2
    return z, iters, rnorm, substeps


def _finish_state(z) -> GaussPointState:
    s = unflatten_state(z)
    s.a_tilde = tc.normalize(s.a_tilde)
    return s


def integrate_point(F_new, t_new, dt, state_old: GaussPointState, p: MaterialParams,
                    opts: LocalOptions = DEFAULT_OPTIONS, tangent: bool = False,
                    dissipation: bool = False, z0=None, jac_hint=None) -> StepResult:
    """Advance the internal variables of a batch of points from ``t_new - dt``.

    With ``tangent=True`` the consistent ``dS/dC`` (6x6 per point, see
    :mod:`tensor_core` for the convention) is returned in ``result.tangent``.

    ``z0`` optionally replaces ``state_old`` as the Newton starting point (the
    converged answer is the same within tolerance). ``jac_hint`` supplies local
    Jacobians from a nearby solve; the tangent then reuses the most recent
    Jacobian of each point instead of forming a new one, which only affects the
    tangent to first order in the distance between the two iterates. The
    Jacobians used are returned in ``result.extra["jacobian"]`` and the
    converged unknowns in ``result.extra["z"]``.

    Raises:
        LocalConvergenceError: if bisection depth is exhausted.
    """
    F = np.asarray(F_new, dtype=float).reshape(-1, 3, 3)
    _, U = tc.polar_decompose(F)
    if dt == 0.0:
        z = flatten_state(state_old)
        iters = np.zeros(len(state_old), dtype=int)
        rnorm = np.zeros(len(state_old))
        subs = np.ones(len(state_old), dtype=int)
    else:
        reuse = jac_hint is not None
        jac_store = np.array(jac_hint, dtype=float) if reuse else None
        z, iters, rnorm, subs = _integrate(F, U, t_new, dt, state_old, p, opts, 0, z0=z0,
                                           jac_store=jac_store)
    new = _finish_state(z)
    if dt == 0.0:
        new = state_old.copy()
    zf = flatten_state(new)
    _, b, _ = _evaluate(zf, F, U, t_new, dt, state_old, p, opts)
    res = StepResult(new, b, iters, rnorm, subs)
    res.extra["z"] = zf
    jac = jac_store if (dt != 0.0 and jac_hint is not None) else None
    if tangent:
        res.tangent = _tangent(F, U, t_new, dt, state_old, zf, subs, p, opts, b.S, jac=jac)
    if jac is not None:
        res.extra["jacobian"] = jac
    if dissipation:
        res.dissipation = step_dissipation(F, U, dt, state_old, new, b, p, opts)
    return res


def step_dissipation(F, U, dt, old, new, b_new, p, opts):
    b_old = evaluate_stress(F, old, p, pi_mode=opts.pi_mode, U=U)
    Nm = np.broadcast_to(INV_SQRT3 * tc.EYE, b_new.S.shape)
    rho_dot = (new.rho_co0 - old.rho_co0) / dt if dt > 0 else np.zeros(len(new))
    rates = gl.RateBundle(
        N_hat_m=Nm, N_hat_co=b_new.extra["N_hat_co"], gamma_dot=new.gamma_dot,
        rho_dot=rho_dot, a_tilde_dot=b_new.extra["a_tilde_dot"],
        phi_g=b_new.extra["phi_g"], sigma_g=b_new.extra["sigma_g"],
        degenerate=np.zeros(len(new), dtype=bool),
    )
    return gl.dissipation_report(b_new, b_old, new.U_gco, old.U_gco, rates, dt, p)


def _perturbed_F(F, U, eps):
    """F rebuilt from C + eps * dC_k for the six Voigt strain directions.

    Returns arrays of shape ``(n, 6, 3, 3)`` for F and U.
    """
    R = F @ tc.inv(U)
    C = tc.transpose(F) @ F
    dC = tc.voigt_to_strain(np.eye(6))  # (6, 3, 3), engineering shear
    Ck = C[:, None] + eps[:, None, None, None] * dC[None]
    Uk = tc.sqrt_spd(Ck)
    Fk = R[:, None] @ Uk
    return Fk, Uk


def _tangent(F, U, t_new, dt, old, z, subs, p, opts, S0, jac=None):
    n = F.shape[0]
    out = np.empty((n, 6, 6))
    eps = opts.tangent_step * np.maximum(1.0, tc.frob(tc.transpose(F) @ F))
    simple = subs == 1
    if np.any(simple):
        idx = np.flatnonzero(simple)
        out[idx], J_used = _tangent_implicit(F[idx], U[idx], t_new, dt, old.take(idx), z[idx],
                                             p, opts, S0[idx], eps[idx],
                                             None if jac is None else jac[idx])
        if jac is not None and J_used is not None:
            jac[idx] = J_used
    if np.any(~simple):
        idx = np.flatnonzero(~simple)
        out[idx] = _tangent_resolve(F[idx], U[idx], t_new, dt, old.take(idx), p, opts,
                                    S0[idx], eps[idx])
    return out


def _tangent_implicit(F, U, t_new, dt, old, z, p, opts, S0, eps, jac=None):
    """dS/dC by the implicit function theorem on the converged residual.

    Rows of ``jac`` that are finite are used as the residual Jacobian; the
    others are formed by finite differences at ``z``.
    """
    n = F.shape[0]
    Fk, Uk = _perturbed_F(F, U, eps)
    rep = np.repeat(np.arange(n), 6)
    Rk, bk, _ = _evaluate(np.repeat(z, 6, axis=0), Fk.reshape(-1, 3, 3), Uk.reshape(-1, 3, 3),
                          t_new, dt, old.take(rep), p, opts)
    R0, _, _ = _evaluate(z, F, U, t_new, dt, old, p, opts)
    dR_dC = (Rk.reshape(n, 6, N_UNKNOWNS) - R0[:, None, :]) / eps[:, None, None]  # [pt, k, row]
    dS_dC = (tc.stress_to_voigt(bk.S).reshape(n, 6, 6) - tc.stress_to_voigt(S0)[:, None, :]) / eps[:, None, None]
    if dt == 0.0:
        return np.swapaxes(dS_dC, 1, 2), jac
    Jac = np.empty((n, N_UNKNOWNS, N_UNKNOWNS)) if jac is None else np.array(jac)
    fresh = np.ones(n, dtype=bool) if jac is None else ~np.all(np.isfinite(Jac), axis=(1, 2))
    h = opts.fd_step * np.maximum(1.0, np.abs(z))
    if np.any(fresh):
        k = np.flatnonzero(fresh)
        Jac[k] = _fd_jacobian(z[k], F[k], U[k], t_new, dt, old.take(k), p, opts, R0=R0[k])
    dS_dz = _stress_sensitivity(z, F, U, old, p, opts, S0, h)
    dz_dC = np.linalg.solve(Jac, -np.swapaxes(dR_dC, 1, 2))  # (n, 17, 6)
    total = np.swapaxes(dS_dC, 1, 2) + np.einsum("nzs,nzk->nsk", dS_dz, dz_dC)
    return total, Jac


def _stress_sensitivity(z, F, U, old, p, opts, S0, h):
    """Forward-difference ``dS/dz`` (n, 17, 6); only the stretch, fiber and
    density columns can be nonzero, ``gamma_dot`` enters no stress."""
    n = z.shape[0]
    cols = [c for c in range(N_UNKNOWNS) if c != I_GD]
    Z = np.repeat(z[:, None, :], len(cols), axis=1)
    Z[:, np.arange(len(cols)), cols] += h[:, cols]
    st = unflatten_state(Z.reshape(-1, N_UNKNOWNS))
    S = evaluate_stress(np.repeat(F, len(cols), axis=0), st, p, pi_mode=opts.pi_mode,
                        U=np.repeat(U, len(cols), axis=0)).S
    out = np.zeros((n, N_UNKNOWNS, 6))
    out[:, cols, :] = (tc.stress_to_voigt(S).reshape(n, len(cols), 6)
                       - tc.stress_to_voigt(S0)[:, None, :]) / h[:, cols, None]
    return out


def _tangent_resolve(F, U, t_new, dt, old, p, opts, S0, eps):
    """dS/dC by re-running the full local integration for each perturbation."""
    n = F.shape[0]
    Fk, _ = _perturbed_F(F, U, eps)
    rep = np.repeat(np.arange(n), 6)
    r = integrate_point(Fk.reshape(-1, 3, 3), t_new, dt, old.take(rep), p, opts)
    dS = (tc.stress_to_voigt(r.stress.S).reshape(n, 6, 6) - tc.stress_to_voigt(S0)[:, None, :]) / eps[:, None, None]
    return np.swapaxes(dS, 1, 2)


def consistent_tangent(F_new, t_new, dt, state_old: GaussPointState, p: MaterialParams,
                       opts: LocalOptions = DEFAULT_OPTIONS, method: str = "resolve"):
    """Consistent ``dS/dC`` as ``(n, 6, 6)`` Voigt matrices.

    ``method="resolve"`` forward-differences the stress after re-integrating
    from ``state_old`` at each perturbed ``C``; ``method="implicit"`` uses the
    implicit function theorem on the converged local residual.
    """
    F = np.asarray(F_new, dtype=float).reshape(-1, 3, 3)
    _, U = tc.polar_decompose(F)
    res = integrate_point(F, t_new, dt, state_old, p, opts)
    eps = opts.tangent_step * np.maximum(1.0, tc.frob(tc.transpose(F) @ F))
    if method == "resolve":
        return _tangent_resolve(F, U, t_new, dt, state_old, p, opts, res.stress.S, eps)
    if method == "implicit":
        subs = res.substeps
        return _tangent(F, U, t_new, dt, state_old, flatten_state(res.state_new), subs, p, opts,
                        res.stress.S)
    raise ValueError(f"unknown method {method!r}")
