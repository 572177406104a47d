"""Rate equations: volumetric growth, collagen densification, fiber turnover.

Growth follows a single homeostatic surface with two non-associative
pseudo-potentials (matrix, collagen); the common growth multiplier obeys a
Perzyna-type overstress law. Collagen density grows by a time-driven Weibull
term plus an energy-driven mechanobiological term. Fibers rotate toward the
largest principal direction of the co-rotated Kirchhoff stress.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .constitutive import MaterialParams, StressBundle

DEGENERATE_DENOM = 1e-14


class DegenerateFiberError(ValueError):
    pass


def signed_power(x, e):
    """``sign(x) |x|**e`` (odd extension of the power law)."""
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.abs(x) ** e


def homeostatic_stress(rho_co_current, p: MaterialParams):
    """Homeostatic stress, affine in the current collagen density."""
    return p.sigma_g0 * (1.0 + p.r1 * np.asarray(rho_co_current, dtype=float) / p.rho_co_f)


def homeostatic_surface(Y_g, J, sigma_g, beta_g):
    J2 = np.asarray(J, dtype=float) ** 2
    trY = tc.trace(Y_g) / J2
    trY2 = tc.trace(Y_g @ Y_g) / J2
    return trY2 + beta_g - (2.0 * sigma_g - trY) ** 2


def _matrix_radicand(trY_gm, J, beta_g):
    return trY_gm / np.asarray(J, dtype=float) ** 2 + beta_g


def potential_matrix(Y_gm, J, beta_g):
    """Rankine-like matrix potential.

    The square-root branch is used where its radicand is positive, the bare
    trace branch otherwise.
    """
    J = np.asarray(J, dtype=float)
    trY = tc.trace(Y_gm)
    rad = _matrix_radicand(trY, J, beta_g)
    root = np.sqrt(np.where(rad > 0.0, rad, 0.0))
    return trY / J + np.where(rad > 0.0, root, 0.0)


def potential_collagen(Gamma_co, Ce_co, M_bar, J):
    CM = tc.ddot(Ce_co, M_bar)
    if np.any(CM <= 0.0):
        raise DegenerateFiberError("C_e,co : M_bar must be positive")
    return tc.ddot(Gamma_co, tc.sym(Ce_co @ M_bar)) / (np.asarray(J, dtype=float) * CM)


def _normalized(N):
    n = tc.frob(N)
    zero = n <= 1e-300
    safe = np.where(zero, 1.0, n)[..., None, None]
    return np.where(zero[..., None, None], 0.0, N / safe), zero


def matrix_direction_raw(trY_gm, J, beta_g):
    """Raw ``dg_m / dSigma_m`` (a multiple of the identity)."""
    J = np.asarray(J, dtype=float)
    rad = _matrix_radicand(trY_gm, J, beta_g)
    coef = 1.0 / J + np.where(rad > 0.0, 1.0 / (2.0 * J**2 * np.sqrt(np.where(rad > 0, rad, 1.0))), 0.0)
    return coef[..., None, None] * tc.EYE


def collagen_direction_raw(Ce_co, M_bar, J):
    """Analytic ``dg_co / dSigma_co``; exact because ``g_co`` is linear in it."""
    CM = tc.ddot(Ce_co, M_bar)
    return tc.sym(Ce_co @ M_bar) / (np.asarray(J, dtype=float) * CM)[..., None, None]


def collagen_direction_fd(b: StressBundle, rel_step: float = 1e-6):
    """Central differences of ``g_co`` with respect to ``Sigma_co``."""
    Sig = b.Sigma_co
    base = np.broadcast_to(Sig, b.Ce_co.shape)
    scale = np.maximum(tc.frob(base), 1.0)
    N = np.zeros(base.shape)
    for i in range(3):
        for j in range(3):
            h = rel_step * scale
            d = np.zeros(base.shape)
            d[..., i, j] = h
            gp = potential_collagen(base + d - b.Y_co + b.Pi_co, b.Ce_co, b.M_bar, b.J)
            gm = potential_collagen(base - d - b.Y_co + b.Pi_co, b.Ce_co, b.M_bar, b.J)
            N[..., i, j] = (gp - gm) / (2.0 * h)
    return N


def flow_directions(b: StressBundle, p: MaterialParams, method: str = "fd"):
    """Unit growth directions ``(N_hat_m, N_hat_co, zero_m, zero_co)``.

    ``method="fd"`` differentiates the collagen potential numerically,
    ``method="analytic"`` uses its closed-form gradient.
    """
    N_m = matrix_direction_raw(tc.trace(b.Sigma_m), b.J, p.beta_g)
    if method == "fd":
        N_co = collagen_direction_fd(b)
    elif method == "analytic":
        N_co = collagen_direction_raw(b.Ce_co, b.M_bar, b.J)
    else:
        raise ValueError(f"unknown method {method!r}")
    Nm_hat, zm = _normalized(N_m)
    Nco_hat, zco = _normalized(N_co)
    return Nm_hat, Nco_hat, zm, zco


def perzyna_gamma_dot(phi_g, sigma_g, p: MaterialParams):
    """Growth multiplier from the overstress relation.

    Returns ``(gamma_dot, degenerate)``; ``degenerate`` flags points where
    ``4 sigma_g^2 - beta_g`` vanishes (their rate is set to zero).
    """
    denom = 4.0 * np.asarray(sigma_g, dtype=float) ** 2 - p.beta_g
    degenerate = np.abs(denom) < DEGENERATE_DENOM
    q = np.asarray(phi_g, dtype=float) / np.where(degenerate, 1.0, denom)
    gd = signed_power(q, 1.0 / p.v_g) / p.eta_g
    return np.where(degenerate, 0.0, gd), degenerate


def weibull_cdf(t, p: MaterialParams):
    t = np.asarray(t, dtype=float)
    return -np.expm1(-((t / p.tau) ** p.h))


def weibull_rate(t, p: MaterialParams):
    t = np.asarray(t, dtype=float)
    x = t / p.tau
    with np.errstate(divide="ignore", invalid="ignore"):
        r = p.h / p.tau * np.exp(-(x**p.h)) * x ** (p.h - 1.0)
    # limit at t = 0: 0 for h > 1, h/tau for h = 1, unbounded for h < 1
    if p.h > 1.0:
        r = np.where(t <= 0.0, 0.0, r)
    elif p.h == 1.0:
        r = np.where(t <= 0.0, 1.0 / p.tau, r)
    return r


def collagen_rate_bio(t, p: MaterialParams):
    return p.a1 * p.c_cell * weibull_rate(t, p)


def collagen_rate_mech(rho_co0, psi_co_mass, p: MaterialParams):
    rho = np.asarray(rho_co0, dtype=float)
    psi = np.asarray(psi_co_mass, dtype=float)
    on = psi >= p.psi_crit
    val = p.a2 * p.c_cell * np.exp(-rho / p.rho_th) * rho * (psi - p.psi_crit) / p.psi_crit
    return np.where(on, val, 0.0)


def collagen_rate(t, rho_co0, psi_co_mass, p: MaterialParams):
    """Referential collagen production rate (ug/mm^3/day)."""
    return collagen_rate_bio(t, p) + collagen_rate_mech(rho_co0, psi_co_mass, p)


def fiber_target(a_tilde, tau_tilde, tie_rtol: float = 1e-10):
    """Largest principal direction of ``tau_tilde``, oriented toward ``a_tilde``.

    When the largest eigenvalue is repeated, the projection of ``a_tilde`` onto
    the maximal eigenspace is used (so an aligned fiber stays put); if that
    projection vanishes the oriented eigenvector from :func:`tc.sym_eig` is
    used.
    """
    a = np.asarray(a_tilde, dtype=float)
    w, V = tc.sym_eig(tau_tilde)
    scale = np.maximum(np.abs(w).max(axis=-1), 1e-300)
    in_top = (w[..., :1] - w) <= tie_rtol * scale[..., None]  # (..., 3)
    coeff = np.einsum("...ik,...i->...k", V, a) * in_top
    proj = np.einsum("...ik,...k->...i", V, coeff)
    pn = np.linalg.norm(proj, axis=-1)
    multi = in_top.sum(axis=-1) > 1
    use_proj = multi & (pn > 1e-12)
    target = np.where(
        use_proj[..., None], proj / np.where(pn > 1e-12, pn, 1.0)[..., None], V[..., :, 0]
    )
    sgn = np.where(np.einsum("...i,...i->...", target, a) < 0.0, -1.0, 1.0)
    return target * sgn[..., None]


def fiber_rate(a_tilde, tau_tilde, eta_s):
    a = np.asarray(a_tilde, dtype=float)
    t = fiber_target(a, tau_tilde)
    return math.pi / (2.0 * eta_s) * np.cross(np.cross(a, t), a)


@dataclass
class RateBundle:
    N_hat_m: np.ndarray
    N_hat_co: np.ndarray
    gamma_dot: np.ndarray
    rho_dot: np.ndarray
    a_tilde_dot: np.ndarray
    phi_g: np.ndarray
    sigma_g: np.ndarray
    degenerate: np.ndarray


def evaluate_rates(b: StressBundle, a_tilde, rho_co0, t, p: MaterialParams, method: str = "fd"):
    """All rates at one instant for a stress bundle (explicit evaluation)."""
    sigma_g = homeostatic_stress(np.asarray(rho_co0) / b.J, p)
    phi = homeostatic_surface(b.Y_g, b.J, sigma_g, p.beta_g)
    gd, deg = perzyna_gamma_dot(phi, sigma_g, p)
    Nm, Nco, _, _ = flow_directions(b, p, method=method)
    return RateBundle(
        N_hat_m=Nm, N_hat_co=Nco, gamma_dot=gd,
        rho_dot=collagen_rate(t, rho_co0, b.psi_co_mass, p),
        a_tilde_dot=fiber_rate(a_tilde, b.tau_tilde, p.eta_s),
        phi_g=phi, sigma_g=sigma_g, degenerate=deg,
    )


@dataclass
class DissipationReport:
    term_growth_m: np.ndarray
    term_growth_co: np.ndarray
    term_remodel: np.ndarray
    term_density: np.ndarray
    total_mechanical: np.ndarray


def referential_structure(H_bar, U_gco):
    Ui = tc.inv(U_gco)
    return Ui @ H_bar @ Ui


def dissipation_report(b_new: StressBundle, b_old: StressBundle, U_gco_new, U_gco_old,
                       rates: RateBundle, dt, p: MaterialParams) -> DissipationReport:
    """Reduced dissipation terms of a converged step (diagnostic only).

    Entropy supply is not modeled; the referential structural-tensor rate is a
    backward difference over ``dt``.
    """
    gd = np.asarray(rates.gamma_dot, dtype=float)[..., None, None]
    D_m = gd * rates.N_hat_m
    D_co = gd * rates.N_hat_co
    t_m = tc.ddot(b_new.Sigma_m, D_m)
    t_co = tc.ddot(b_new.Gamma_co, D_co)
    if dt > 0:
        H_new = referential_structure(b_new.H_bar, U_gco_new)
        H_old = referential_structure(b_old.H_bar, U_gco_old)
        G = U_gco_new @ b_new.dpsi_dH @ U_gco_new
        t_rem = -tc.ddot(G, (H_new - H_old) / dt)
    else:
        t_rem = np.zeros_like(t_m)
    Ep = np.maximum(b_new.E_co, 0.0)
    dpsi_drho = p.k1 / (2.0 * p.k2) * np.expm1(p.k2 * Ep**2) / p.rho_co_f
    t_rho = -dpsi_drho * rates.rho_dot
    return DissipationReport(
        term_growth_m=t_m, term_growth_co=t_co, term_remodel=t_rem,
        term_density=t_rho, total_mechanical=t_m + t_co + t_rem + t_rho,
    )
