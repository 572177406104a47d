import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tissue_maturation import tensor_core as tc
from tissue_maturation.constitutive import (
    ENERGY_SCALE,
    GaussPointState,
    MaterialParams,
    evaluate_stress,
    psi_collagen,
    psi_collagen_mass,
    psi_matrix,
    structure_tensors,
    table1_params,
    total_energy,
)

from conftest import random_F, random_spd, random_state


def fd_stress(C, s, a_ref, p, h=1e-6):
    """Central-difference ``2 dpsi/dC`` over the six symmetric components."""
    S = np.zeros((3, 3))
    for i in range(3):
        for j in range(i, 3):
            d = np.zeros((3, 3))
            d[i, j] = d[j, i] = h if i == j else 0.5 * h
            dpsi = (total_energy(C + d, s, a_ref, p) - total_energy(C - d, s, a_ref, p)) / (2 * h)
            # symmetric perturbation of (i, j) and (j, i) by h/2 each measures dpsi/dC_ij
            S[i, j] = S[j, i] = 2.0 * (dpsi[0] if np.ndim(dpsi) else dpsi)
    return S


class TestParams:
    def test_table1(self):
        p = table1_params()
        assert (p.lam, p.mu, p.k1, p.k2, p.kappa) == (0.5, 0.25, 0.825, 4.0, 0.15)
        assert (p.a1, p.tau, p.h, p.a2, p.psi_crit, p.rho_th) == (1e-3, 7.0, 1.65, 2.5e-6, 2e-5, 6.5)

    def test_kappa_range(self):
        with pytest.raises(ValueError, match="kappa"):
            table1_params().with_(kappa=0.5)

    @pytest.mark.parametrize("field,val", [("mu", 0.0), ("k2", 0.0), ("eta_s", -1.0),
                                           ("tau", 0.0), ("rho_co_f", 0.0), ("v_g", 0.0)])
    def test_rejects(self, field, val):
        with pytest.raises(ValueError):
            table1_params().with_(**{field: val})

    def test_unit_scale_ratio(self):
        # 1 uN/mm^2 is 1e-6 MPa, so the energy scales differ by exactly that factor
        assert ENERGY_SCALE["uN/mm2"] / ENERGY_SCALE["MPa"] == pytest.approx(1e-6)


class TestMatrixEnergy:
    def test_reference_zero(self, p1):
        assert psi_matrix(np.eye(3), p1) == pytest.approx(0.0, abs=1e-15)

    def test_hand_value(self, p1):
        # J_e = 2: (mu/2)(6 - 3) - mu ln 2 + (lam/4)(4 - 1 - 2 ln 2)
        exact = 0.125 * 3 - 0.25 * np.log(2) + 0.125 * (3 - 2 * np.log(2))
        assert psi_matrix(np.diag([4.0, 1, 1]), p1) == pytest.approx(exact, rel=1e-14)

    def test_positive_elsewhere(self, p1, rng):
        C = random_spd(rng, 200, 0.3)
        assert np.all(psi_matrix(C, p1) > 0)

    def test_rejects_non_spd(self, p1):
        with pytest.raises(tc.TensorInputError):
            psi_matrix(np.diag([-1.0, 1, 1]), p1)

    def test_gradient_fd(self, p1, rng):
        from tissue_maturation.constitutive import _dpsi_matrix

        for C in random_spd(rng, 20, 0.3):
            G = _dpsi_matrix(C, p1)
            h = 1e-6
            for i in range(3):
                for j in range(3):
                    d = np.zeros((3, 3))
                    d[i, j] = h
                    fd = (psi_matrix(C + d, p1) - psi_matrix(C - d, p1)) / (2 * h)
                    assert fd == pytest.approx(G[i, j], rel=1e-6, abs=1e-9)


class TestCollagenEnergy:
    def test_zero_density(self, p1, rng):
        C = random_spd(rng, 10, 0.3)
        H = np.eye(3) / 3
        assert np.all(psi_collagen(C, H, 0.0, p1) == 0)

    def test_identity(self, p1):
        _, _, _, H = structure_tensors(np.eye(3), np.eye(3), np.array([0.6, 0.8, 0]), p1.kappa)
        assert psi_collagen(np.eye(3), H, 10.0, p1) == pytest.approx(0.0, abs=1e-15)

    def test_hand_value(self, p1):
        # pick C_e so that C:H - 1 = 0.1 with H = e1 e1 (kappa = 0)
        H = np.diag([1.0, 0, 0])
        val = psi_collagen(np.diag([1.1, 1, 1]), H, p1.rho_co_f, p1)
        assert val == pytest.approx(0.825 / 8 * (np.exp(0.04) - 1), rel=1e-12)
        assert val == pytest.approx(4.2091e-3, rel=2e-4)

    def test_tension_only(self, p1):
        H = np.diag([1.0, 0, 0])
        assert psi_collagen(np.diag([0.8, 1, 1]), H, 20.0, p1) == 0.0

    @given(st.floats(0.0, 50.0))
    def test_linear_in_density(self, rho):
        p = table1_params()
        H = np.diag([1.0, 0, 0])
        C = np.diag([1.2, 1, 1])
        assert psi_collagen(C, H, 2 * rho, p) == 2 * psi_collagen(C, H, rho, p)

    def test_mass_limit_continuous(self, p1):
        H = np.diag([1.0, 0, 0])
        C = np.diag([1.15, 1, 1])
        E = np.trace(C @ H) - 1
        for rho in (1e-3, 1e-6, 1e-9):
            ratio = p1.energy_per_mass_scale * psi_collagen(C, H, rho, p1) / rho
            assert ratio == pytest.approx(psi_collagen_mass(E, p1), rel=1e-10)


class TestStructure:
    def test_identity_case(self, p1):
        a_ref, M, Mb, H = structure_tensors(np.eye(3), np.eye(3), np.array([1.0, 0, 0]), p1.kappa)
        e1 = np.diag([1.0, 0, 0])
        assert np.allclose(Mb, e1) and np.allclose(H, p1.kappa * np.eye(3) + (1 - 3 * p1.kappa) * e1)

    def test_isotropic_limit(self, rng):
        a = tc.normalize(rng.normal(size=3))
        *_, H = structure_tensors(np.eye(3), random_spd(rng, 1)[0], a, 1.0 / 3.0)
        assert np.allclose(H, np.eye(3) / 3, atol=1e-15)

    def test_stretched_fiber(self, p1):
        _, _, Mb, _ = structure_tensors(np.eye(3), np.diag([2.0, 1, 1]), np.array([1.0, 0, 0]),
                                        p1.kappa)
        assert np.allclose(Mb, np.diag([1.0, 0, 0]))

    def test_unit_trace(self, rng, p1):
        F = random_F(rng, 100)
        Ug = random_spd(rng, 100, 0.3)
        a = tc.normalize(rng.normal(size=(100, 3)))
        for kappa in (0.0, 0.1, 1 / 3):
            *_, Mb, H = structure_tensors(F, Ug, a, kappa)
            assert np.allclose(tc.trace(Mb), 1.0, atol=1e-10)
            assert np.allclose(tc.trace(H), 1.0, atol=1e-10)


class TestStress:
    def test_stress_free_reference(self, p1):
        s = GaussPointState.initial(np.array([[1.0, 0, 0]]))
        b = evaluate_stress(np.eye(3)[None], s, p1)
        assert np.allclose(b.S, 0, atol=1e-15) and np.allclose(b.tau_tilde, 0, atol=1e-15)

    def test_kirchhoff_eigenvalues(self, p1, p2, rng):
        for p, spread in ((p1, 0.15), (p2, 0.005)):
            F = random_F(rng, 200, spread)
            s = random_state(rng, 200, spread=spread)
            b = evaluate_stress(F, s, p)
            kir = F @ b.S @ tc.transpose(F)
            w1 = np.linalg.eigvalsh(b.tau_tilde)
            w2 = np.linalg.eigvalsh(kir)
            scale = np.max(np.abs(w2), axis=-1, keepdims=True)
            assert np.all(np.abs(w1 - w2) <= 1e-8 * scale)

    def test_fd_energy_gradient(self, p1, rng):
        F = random_F(rng, 30, 0.15)
        s = random_state(rng, 30)
        b = evaluate_stress(F, s, p1)
        for k in range(30):
            C = F[k].T @ F[k]
            sk = s.take(np.array([k]))
            S_fd = fd_stress(C, sk, b.a_ref[k:k + 1], p1)
            assert np.linalg.norm(S_fd - b.S[k]) <= 1e-6 * np.linalg.norm(b.S[k])

    def test_symmetric_and_nonnegative(self, p1, rng):
        b = evaluate_stress(random_F(rng, 100), random_state(rng, 100), p1)
        assert np.array_equal(b.S, tc.transpose(b.S))
        assert np.all(b.psi_co >= 0) and np.all(b.J > 0)

    def test_rejects_singular_growth(self, p1):
        s = GaussPointState.initial(np.array([[1.0, 0, 0]]))
        s.U_gm[:] = np.diag([1.0, 1.0, 0.0])
        with pytest.raises(ValueError):
            evaluate_stress(np.eye(3)[None], s, p1)
