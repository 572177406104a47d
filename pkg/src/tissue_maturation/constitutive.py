"""Free energies, structural tensors and stress measures at material points.

The matrix is a compressible Neo-Hookean solid, the collagen a single
dispersed fiber family with an exponential (tension-only) energy that scales
linearly with the referential collagen density. Each constituent has its own
growth stretch ``U_g``; quantities with a bar live in the co-rotated
intermediate configuration, quantities with a tilde in the co-rotated
configuration.

All routines are batched over leading dimensions (see :mod:`tensor_core`).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import tensor_core as tc

# 1 MPa * mm^3 = 1e-3 J ; 1 uN/mm^2 * mm^3 = 1e-9 J
ENERGY_SCALE = {"MPa": 1.0, "uN/mm2": 1e-6}


class StateError(ValueError):
    """Inadmissible internal state (singular growth stretch, bad fiber)."""


@dataclass(frozen=True)
class MaterialParams:
    lam: float
    mu: float
    k1: float
    k2: float
    kappa: float
    sigma_g0: float
    r1: float
    beta_g: float
    eta_g: float
    eta_s: float
    v_g: float
    a1: float
    tau: float
    h: float
    a2: float
    psi_crit: float
    rho_th: float
    rho_co_f: float
    c_cell: float
    energy_per_mass_scale: float = 1.0

    def __post_init__(self):
        checks = [
            (self.mu > 0, "mu > 0"),
            (self.lam + 2.0 * self.mu / 3.0 > 0, "lambda + 2 mu / 3 > 0"),
            (self.k1 >= 0, "k1 >= 0"),
            (self.k2 > 0, "k2 > 0"),
            (0.0 <= self.kappa <= 1.0 / 3.0, "0 <= kappa <= 1/3"),
            (self.eta_g > 0, "eta_g > 0"),
            (self.eta_s > 0, "eta_s > 0"),
            (self.tau > 0, "tau > 0"),
            (self.h > 0, "h > 0"),
            (self.rho_co_f > 0, "rho_co_f > 0"),
            (self.rho_th > 0, "rho_th > 0"),
            (self.c_cell >= 0, "c_cell >= 0"),
            (self.v_g > 0, "v_g > 0"),
            (self.psi_crit > 0, "psi_crit > 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(f"invalid material parameters: requires {msg}")

    def with_(self, **changes) -> "MaterialParams":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def table1_params() -> MaterialParams:
    """Uniaxially constrained strip, MPa / ug / mm / days."""
    return MaterialParams(
        lam=0.5, mu=0.25, k1=0.825, k2=4.0, kappa=0.15,
        sigma_g0=0.2, r1=0.15, beta_g=1.0, eta_g=50.0, eta_s=5.0, v_g=1.0,
        a1=1e-3, tau=7.0, h=1.65, a2=2.5e-6, psi_crit=2e-5, rho_th=6.5,
        rho_co_f=38.7, c_cell=15e3, energy_per_mass_scale=ENERGY_SCALE["MPa"],
    )


def table2_params() -> MaterialParams:
    """Biaxially constrained cruciform, uN/mm^2 / ug / mm / days."""
    return MaterialParams(
        lam=818.0, mu=982.0, k1=3351.0, k2=14996.0, kappa=0.10,
        sigma_g0=22.9, r1=10.0, beta_g=1.0, eta_g=100.0, eta_s=5.0, v_g=1.0,
        a1=2e-3, tau=7.0, h=1.65, a2=5e-6, psi_crit=3e-5, rho_th=10.0,
        rho_co_f=38.7, c_cell=15e3, energy_per_mass_scale=ENERGY_SCALE["uN/mm2"],
    )


@dataclass
class GaussPointState:
    """Internal variables of a batch of integration points.

    Shapes: ``U_gm``, ``U_gco`` ``(n, 3, 3)``; ``a_tilde`` ``(n, 3)``;
    ``gamma_dot``, ``rho_co0`` ``(n,)``.
    """

    U_gm: np.ndarray
    U_gco: np.ndarray
    a_tilde: np.ndarray
    gamma_dot: np.ndarray
    rho_co0: np.ndarray

    @classmethod
    def initial(cls, a_tilde, rho_co0=0.0) -> "GaussPointState":
        a = tc.normalize(np.atleast_2d(np.asarray(a_tilde, dtype=float)))
        n = a.shape[0]
        eye = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        return cls(
            U_gm=eye, U_gco=eye.copy(), a_tilde=a,
            gamma_dot=np.zeros(n), rho_co0=np.full(n, float(rho_co0)),
        )

    def __len__(self):
        return self.a_tilde.shape[0]

    def copy(self) -> "GaussPointState":
        return GaussPointState(*(np.array(getattr(self, f.name)) for f in fields(self)))

    def take(self, idx) -> "GaussPointState":
        return GaussPointState(*(np.array(getattr(self, f.name)[idx]) for f in fields(self)))

    def put(self, idx, other: "GaussPointState") -> None:
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)

    def validate(self) -> None:
        if np.any(tc.det(self.U_gm) <= 0) or np.any(tc.det(self.U_gco) <= 0):
            raise StateError("growth stretch with non-positive determinant")
        if np.any(np.abs(np.linalg.norm(self.a_tilde, axis=-1) - 1.0) > 1e-10):
            raise StateError("fiber direction is not a unit vector")
        if np.any(self.rho_co0 < 0):
            raise StateError("negative collagen density")


@dataclass
class StressBundle:
    S: np.ndarray
    tau_tilde: np.ndarray
    Y_g: np.ndarray
    Y_gm: np.ndarray
    Sigma_m: np.ndarray
    Sigma_co: np.ndarray
    Y_co: np.ndarray
    Pi_co: np.ndarray
    Gamma_co: np.ndarray
    J: np.ndarray
    psi_m: np.ndarray
    psi_co: np.ndarray
    psi_co_mass: np.ndarray
    E_co: np.ndarray
    H_bar: np.ndarray
    M_bar: np.ndarray
    a_ref: np.ndarray
    Ce_m: np.ndarray
    Ce_co: np.ndarray
    dpsi_dH: np.ndarray
    U: np.ndarray
    extra: dict = field(default_factory=dict)


def psi_matrix(Ce_m, p: MaterialParams):
    """Neo-Hookean energy of the matrix as a function of its elastic ``C``."""
    Ce_m = np.asarray(Ce_m, dtype=float)
    d = tc.det(Ce_m)
    if np.any(d <= 0) or not np.all(tc.is_spd(Ce_m)):
        raise tc.TensorInputError("matrix energy needs a positive definite C_e")
    Je = np.sqrt(d)
    lnJ = np.log(Je)
    return (
        0.5 * p.mu * (tc.trace(Ce_m) - 3.0)
        - p.mu * lnJ
        + 0.25 * p.lam * (Je**2 - 1.0 - 2.0 * lnJ)
    )


def _dpsi_matrix(Ce_m, p: MaterialParams):
    Ci = tc.inv(Ce_m)
    Je2 = tc.det(Ce_m)
    return 0.5 * p.mu * (tc.EYE - Ci) + 0.25 * p.lam * (Je2 - 1.0)[..., None, None] * Ci


def fiber_strain(Ce_co, H_bar):
    return tc.ddot(Ce_co, H_bar) - 1.0


def psi_collagen(Ce_co, H_bar, rho_co0, p: MaterialParams):
    """Tension-only exponential fiber energy scaled by ``rho_co0 / rho_co_f``."""
    E = fiber_strain(Ce_co, H_bar)
    Ep = np.maximum(E, 0.0)
    return np.asarray(rho_co0) / p.rho_co_f * p.k1 / (2.0 * p.k2) * np.expm1(p.k2 * Ep**2)


def psi_collagen_mass(E_co, p: MaterialParams):
    """Collagen energy per unit collagen mass, in J/ug.

    This is ``scale * psi_co / rho_co0`` written so that it stays finite at
    ``rho_co0 = 0`` (the energy is linear in the density).
    """
    Ep = np.maximum(E_co, 0.0)
    return p.energy_per_mass_scale / p.rho_co_f * p.k1 / (2.0 * p.k2) * np.expm1(p.k2 * Ep**2)


def bar_structure(U_gco, a_ref, kappa):
    """``(M_bar, H_bar)`` for a referential fiber ``a_ref`` and stretch ``U_gco``."""
    b = np.einsum("...ij,...j->...i", U_gco, a_ref)  # U_gco a ; C_gco:M = |b|^2
    M_bar = tc.outer(b, b) / np.einsum("...i,...i->...", b, b)[..., None, None]
    H_bar = kappa * tc.EYE + (1.0 - 3.0 * kappa) * M_bar
    return M_bar, H_bar


def structure_tensors(F, U_gco, a_tilde, kappa, U=None):
    """Referential fiber and the (generalized) structural tensors.

    Returns ``(a_ref, M, M_bar, H_bar)`` where ``a_ref`` is recovered from the
    co-rotated fiber ``a_tilde`` through ``a_ref ~ U^-1 a_tilde``.
    """
    if U is None:
        _, U = tc.polar_decompose(F)
    if np.any(tc.det(U) <= 0):
        raise tc.TensorInputError("singular stretch tensor")
    a_ref = tc.normalize(np.einsum("...ij,...j->...i", tc.inv(U), a_tilde))
    M = tc.outer(a_ref, a_ref)
    M_bar, H_bar = bar_structure(U_gco, a_ref, kappa)
    return a_ref, M, M_bar, H_bar


def evaluate_stress(F, s: GaussPointState, p: MaterialParams, pi_mode: str = "dyadic", U=None):
    """Stress measures for deformation ``F`` and internal state ``s``.

    ``pi_mode`` selects the reading of the structural-tensor coupling term:
    ``"dyadic"`` gives ``Pi = 2 (dpsi/dH : H) H``, ``"sandwich"`` gives
    ``Pi = 2 H (dpsi/dH) H``.
    """
    F = np.asarray(F, dtype=float)
    if U is None:
        _, U = tc.polar_decompose(F)
    J = tc.det(F)
    C = tc.transpose(F) @ F

    if np.any(tc.det(s.U_gm) <= 0) or np.any(tc.det(s.U_gco) <= 0):
        raise StateError("singular growth stretch")
    Ugm_i = tc.inv(s.U_gm)
    Ugco_i = tc.inv(s.U_gco)
    Ce_m = tc.sym(Ugm_i @ C @ Ugm_i)
    Ce_co = tc.sym(Ugco_i @ C @ Ugco_i)

    a_ref, _, M_bar, H_bar = structure_tensors(F, s.U_gco, s.a_tilde, p.kappa, U=U)

    # matrix
    dpm = _dpsi_matrix(Ce_m, p)
    Je = np.sqrt(tc.det(Ce_m))
    lnJ = np.log(Je)
    psi_m = 0.5 * p.mu * (tc.trace(Ce_m) - 3.0) - p.mu * lnJ + 0.25 * p.lam * (Je**2 - 1.0 - 2.0 * lnJ)
    Sigma_m = 2.0 * Ce_m @ dpm

    # collagen
    rho = np.asarray(s.rho_co0, dtype=float)
    E = fiber_strain(Ce_co, H_bar)
    active = E >= 0.0
    Ep = np.where(active, E, 0.0)
    ex = np.exp(p.k2 * Ep**2)
    psi_co = rho / p.rho_co_f * p.k1 / (2.0 * p.k2) * (ex - 1.0)
    g = np.where(active, rho / p.rho_co_f * p.k1 * Ep * ex, 0.0)[..., None, None]
    dpc_dC = g * H_bar
    dpc_dH = g * Ce_co
    Sigma_co = 2.0 * Ce_co @ dpc_dC
    Y_co = 2.0 * dpc_dH @ H_bar
    if pi_mode == "dyadic":
        Pi_co = 2.0 * tc.ddot(dpc_dH, H_bar)[..., None, None] * H_bar
    elif pi_mode == "sandwich":
        Pi_co = 2.0 * H_bar @ dpc_dH @ H_bar
    else:
        raise ValueError(f"unknown pi_mode {pi_mode!r}")
    Gamma_co = Sigma_co - Y_co + Pi_co

    S_m = 2.0 * Ugm_i @ dpm @ Ugm_i
    S_co = 2.0 * Ugco_i @ dpc_dC @ Ugco_i
    S = tc.sym(S_m + S_co)

    Y_gm = s.U_gm @ Sigma_m @ Ugm_i
    Y_g = Y_gm + s.U_gco @ Sigma_co @ Ugco_i
    tau_tilde = tc.sym(tc.inv(U) @ Y_g @ U)

    return StressBundle(
        S=S, tau_tilde=tau_tilde, Y_g=Y_g, Y_gm=Y_gm, Sigma_m=Sigma_m,
        Sigma_co=Sigma_co, Y_co=Y_co, Pi_co=Pi_co, Gamma_co=Gamma_co, J=J,
        psi_m=psi_m, psi_co=psi_co, psi_co_mass=psi_collagen_mass(E, p), E_co=E,
        H_bar=H_bar, M_bar=M_bar, a_ref=a_ref, Ce_m=Ce_m, Ce_co=Ce_co,
        dpsi_dH=dpc_dH, U=U,
    )


def total_energy(C, s: GaussPointState, a_ref, p: MaterialParams):
    """``psi_m + psi_co`` as a function of ``C`` with the referential fiber fixed."""
    C = np.asarray(C, dtype=float)
    Ugm_i = tc.inv(s.U_gm)
    Ugco_i = tc.inv(s.U_gco)
    _, H_bar = bar_structure(s.U_gco, a_ref, p.kappa)
    return psi_matrix(Ugm_i @ C @ Ugm_i, p) + psi_collagen(Ugco_i @ C @ Ugco_i, H_bar, s.rho_co0, p)
