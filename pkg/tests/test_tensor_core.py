import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tissue_maturation import tensor_core as tc

sym_mats = arrays(np.float64, (3, 3), elements=st.floats(-3, 3)).map(lambda a: 0.5 * (a + a.T))


def rot_z(deg):
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def series_exp(A, terms=60):
    """Scaling-and-squaring Taylor oracle."""
    k = max(0, int(np.ceil(np.log2(max(np.linalg.norm(A), 1e-300)))) + 1)
    B = A / 2**k
    out, term = np.eye(3), np.eye(3)
    for n in range(1, terms):
        term = term @ B / n
        out = out + term
    for _ in range(k):
        out = out @ out
    return out


class TestPolar:
    def test_identity(self):
        R, U = tc.polar_decompose(np.eye(3))
        assert np.allclose(R, np.eye(3)) and np.allclose(U, np.eye(3))

    def test_pure_stretch(self):
        R, U = tc.polar_decompose(np.diag([2.0, 1, 1]))
        assert np.allclose(R, np.eye(3), atol=1e-14)
        assert np.allclose(U, np.diag([2.0, 1, 1]), atol=1e-14)

    def test_rotation(self):
        Q = rot_z(90)
        R, U = tc.polar_decompose(Q)
        assert np.allclose(R, Q, atol=1e-14) and np.allclose(U, np.eye(3), atol=1e-14)

    def test_rejects_nonpositive_det(self):
        with pytest.raises(tc.TensorInputError):
            tc.polar_decompose(np.diag([-1.0, 1, 1]))

    def test_compose_roundtrip(self, rng):
        for _ in range(50):
            Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
            if np.linalg.det(Q) < 0:
                Q[:, 0] *= -1
            U0 = tc.exp_sym(tc.sym(rng.normal(scale=0.4, size=(3, 3))))
            R, U = tc.polar_decompose(Q @ U0)
            assert np.allclose(R, Q, atol=1e-10) and np.allclose(U, U0, atol=1e-10)
            assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)


class TestSymEig:
    def test_diag(self):
        w, V = tc.sym_eig(np.diag([1.0, 3.0, 2.0]))
        assert np.allclose(w, [3, 2, 1])
        assert np.allclose(np.abs(V), np.eye(3)[:, [1, 2, 0]])

    def test_identity_tie_rule(self):
        w, V = tc.sym_eig(np.eye(3))
        assert np.allclose(w, 1.0)
        assert np.allclose(V.T @ V, np.eye(3), atol=1e-12)
        for k in range(3):
            v = V[:, k]
            assert v[np.flatnonzero(np.abs(v) > 1e-12)[0]] > 0

    def test_offdiagonal_block(self):
        w, _ = tc.sym_eig(np.array([[0, 1.0, 0], [1, 0, 0], [0, 0, 0]]))
        assert np.allclose(w, [1, 0, -1], atol=1e-14)

    @given(sym_mats)
    def test_reconstruction(self, A):
        w, V = tc.sym_eig(A)
        assert np.all(np.diff(w) <= 0)
        assert np.allclose(V.T @ V, np.eye(3), atol=1e-12)
        scale = max(np.linalg.norm(A), 1e-300)
        assert np.linalg.norm(V @ np.diag(w) @ V.T - A) <= 1e-10 * scale + 1e-300


class TestExp:
    def test_zero(self):
        assert np.allclose(tc.exp_sym(np.zeros((3, 3))), np.eye(3))

    def test_diag(self):
        assert np.allclose(tc.exp_sym(np.diag([0.1, -2.0, 1.5])), np.diag(np.exp([0.1, -2, 1.5])))

    @given(sym_mats)
    def test_series_oracle(self, A):
        E = tc.exp_sym(A)
        ref = series_exp(A)
        assert np.linalg.norm(E - ref) <= 1e-10 * np.linalg.norm(ref)
        assert np.all(np.linalg.eigvalsh(E) > 0)

    @given(sym_mats)
    def test_inverse_pair(self, A):
        assert np.allclose(tc.exp_sym(A) @ tc.exp_sym(-A), np.eye(3), atol=1e-10)


class TestVoigt:
    def test_minor_roundtrip_exact(self, rng):
        D6 = rng.normal(size=(6, 6))
        assert np.array_equal(tc.pack_minor(tc.unpack_minor(D6)), D6)

    def test_unpack_has_minor_symmetry(self, rng):
        D = tc.unpack_minor(rng.normal(size=(6, 6)))
        assert np.array_equal(D, D.transpose(1, 0, 2, 3))
        assert np.array_equal(D, D.transpose(0, 1, 3, 2))

    def test_strain_stress_pairing(self, rng):
        # dS_v = D6 @ dC_v must agree with the full contraction D : dC
        D6 = rng.normal(size=(6, 6))
        dC = tc.sym(rng.normal(size=(3, 3)))
        full = np.einsum("abcd,cd->ab", tc.unpack_minor(D6), dC)
        assert np.allclose(tc.stress_to_voigt(full), D6 @ tc.strain_to_voigt(dC))

    def test_vector_roundtrips(self, rng):
        A = tc.sym(rng.normal(size=(4, 3, 3)))
        assert np.array_equal(tc.vec_to_sym(tc.sym_to_vec(A)), A)
        assert np.allclose(tc.voigt_to_strain(tc.strain_to_voigt(A)), A)
        assert np.allclose(tc.voigt_to_stress(tc.stress_to_voigt(A)), A)


def test_inverse_and_det(rng):
    A = np.eye(3) + 0.3 * rng.normal(size=(10, 3, 3))
    assert np.allclose(tc.det(A), np.linalg.det(A))
    assert np.allclose(tc.inv(A), np.linalg.inv(A))


def test_sqrt_spd(rng):
    U = tc.exp_sym(tc.sym(rng.normal(scale=0.5, size=(5, 3, 3))))
    assert np.allclose(tc.sqrt_spd(U @ U), U, atol=1e-12)
