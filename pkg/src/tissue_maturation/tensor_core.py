"""Small-tensor algebra on batches of 3x3 matrices.

Every function accepts arrays with arbitrary leading batch dimensions, i.e.
tensors of shape ``(..., 3, 3)`` and vectors of shape ``(..., 3)``. A single
tensor is simply a batch with no leading dimensions.

Voigt convention (shared by every module):

* component order ``(xx, yy, zz, xy, yz, xz)``
* strain-like tensors (``C``, ``E``) carry a factor 2 on the shear entries
* stress-like tensors (``S``, ``tau``) carry a factor 1 on the shear entries
* a minor-symmetric 4th-order tensor ``D`` with ``dS = D : dC`` is stored as a
  6x6 matrix ``D6[I, J] = D[a, b, c, d]`` with ``I = (a, b)``, ``J = (c, d)``;
  with the strain convention above this gives ``dS_v = D6 @ dC_v``.

Internal-variable vectors (``LocalUnknowns``) store symmetric tensors with
unit weights on every component, see :func:`sym_to_vec` / :func:`vec_to_sym`.
"""

from __future__ import annotations

import numpy as np

VOIGT_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (0, 2))
_VI = np.array([p[0] for p in VOIGT_PAIRS])
_VJ = np.array([p[1] for p in VOIGT_PAIRS])

# index map (a, b) -> Voigt slot
VOIGT_INDEX = np.empty((3, 3), dtype=int)
for _k, (_a, _b) in enumerate(VOIGT_PAIRS):
    VOIGT_INDEX[_a, _b] = _k
    VOIGT_INDEX[_b, _a] = _k

STRAIN_WEIGHTS = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])

EYE = np.eye(3)


class TensorInputError(ValueError):
    """Raised for inadmissible tensor inputs (e.g. det F <= 0)."""


def det(A):
    return (
        A[..., 0, 0] * (A[..., 1, 1] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 1])
        - A[..., 0, 1] * (A[..., 1, 0] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 0])
        + A[..., 0, 2] * (A[..., 1, 0] * A[..., 2, 1] - A[..., 1, 1] * A[..., 2, 0])
    )


def inv(A):
    """Closed-form inverse of (a batch of) 3x3 matrices."""
    A = np.asarray(A, dtype=float)
    out = np.empty_like(A)
    out[..., 0, 0] = A[..., 1, 1] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 1]
    out[..., 0, 1] = A[..., 0, 2] * A[..., 2, 1] - A[..., 0, 1] * A[..., 2, 2]
    out[..., 0, 2] = A[..., 0, 1] * A[..., 1, 2] - A[..., 0, 2] * A[..., 1, 1]
    out[..., 1, 0] = A[..., 1, 2] * A[..., 2, 0] - A[..., 1, 0] * A[..., 2, 2]
    out[..., 1, 1] = A[..., 0, 0] * A[..., 2, 2] - A[..., 0, 2] * A[..., 2, 0]
    out[..., 1, 2] = A[..., 0, 2] * A[..., 1, 0] - A[..., 0, 0] * A[..., 1, 2]
    out[..., 2, 0] = A[..., 1, 0] * A[..., 2, 1] - A[..., 1, 1] * A[..., 2, 0]
    out[..., 2, 1] = A[..., 0, 1] * A[..., 2, 0] - A[..., 0, 0] * A[..., 2, 1]
    out[..., 2, 2] = A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
    return out / det(A)[..., None, None]


def trace(A):
    return np.einsum("...ii->...", A)


def transpose(A):
    return np.swapaxes(A, -1, -2)


def sym(A):
    return 0.5 * (A + transpose(A))


def matmul(*mats):
    out = mats[0]
    for m in mats[1:]:
        out = out @ m
    return out


def ddot(A, B):
    """Double contraction ``A : B = A_ij B_ij``."""
    return np.einsum("...ij,...ij->...", A, B)


def frob(A):
    return np.sqrt(ddot(A, A))


def outer(a, b):
    return a[..., :, None] * b[..., None, :]


def normalize(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def sym_to_vec(A):
    """Symmetric tensor -> 6 components (unit weights)."""
    return A[..., _VI, _VJ]


def vec_to_sym(v):
    v = np.asarray(v, dtype=float)
    out = np.empty(v.shape[:-1] + (3, 3))
    out[..., _VI, _VJ] = v
    out[..., _VJ, _VI] = v
    return out


def strain_to_voigt(E):
    return sym_to_vec(E) * STRAIN_WEIGHTS


def voigt_to_strain(v):
    return vec_to_sym(np.asarray(v) / STRAIN_WEIGHTS)


def stress_to_voigt(S):
    return sym_to_vec(S)


def voigt_to_stress(v):
    return vec_to_sym(v)


def pack_minor(D):
    """Minor-symmetric 4th-order tensor ``(..., 3, 3, 3, 3)`` -> ``(..., 6, 6)``."""
    return D[..., _VI[:, None], _VJ[:, None], _VI[None, :], _VJ[None, :]]


def unpack_minor(D6):
    """Inverse of :func:`pack_minor`; the result has both minor symmetries."""
    D6 = np.asarray(D6, dtype=float)
    idx = VOIGT_INDEX
    return D6[..., idx[:, :, None, None], idx[None, None, :, :]]


def _orient(vecs):
    """Flip each column so its first non-negligible component is positive."""
    # vecs: (..., 3, 3) with eigenvectors in columns
    tol = 1e-12
    mag = np.abs(vecs) > tol
    first = np.argmax(mag, axis=-2)  # (..., 3)
    lead = np.take_along_axis(vecs, first[..., None, :], axis=-2)[..., 0, :]
    sign = np.where(lead < 0.0, -1.0, 1.0)
    return vecs * sign[..., None, :]


def sym_eig(A):
    """Eigen-decomposition of symmetric tensors.

    Returns ``(w, V)`` with eigenvalues ``w`` sorted descending and the
    matching orthonormal eigenvectors stored in the *columns* of ``V``. Each
    eigenvector is oriented so that its first nonzero component is positive.
    """
    w, V = np.linalg.eigh(sym(np.asarray(A, dtype=float)))
    w = w[..., ::-1]
    V = V[..., :, ::-1]
    return w, _orient(V)


def exp_sym(A):
    """Matrix exponential of symmetric tensors via the spectral form."""
    w, V = np.linalg.eigh(sym(np.asarray(A, dtype=float)))
    return np.einsum("...ik,...k,...jk->...ij", V, np.exp(w), V)


def sqrt_spd(A):
    w, V = np.linalg.eigh(sym(np.asarray(A, dtype=float)))
    if np.any(w <= 0.0):
        raise TensorInputError("matrix square root needs a positive definite argument")
    return np.einsum("...ik,...k,...jk->...ij", V, np.sqrt(w), V)


def polar_decompose(F):
    """Right polar split ``F = R U`` with ``U = sqrt(F^T F)``.

    Raises:
        TensorInputError: if any ``det F <= 0``.
    """
    F = np.asarray(F, dtype=float)
    if np.any(det(F) <= 0.0):
        raise TensorInputError("polar decomposition requires det F > 0")
    C = transpose(F) @ F
    w, V = np.linalg.eigh(C)
    s = np.sqrt(w)
    U = np.einsum("...ik,...k,...jk->...ij", V, s, V)
    U_inv = np.einsum("...ik,...k,...jk->...ij", V, 1.0 / s, V)
    R = F @ U_inv
    return R, U


def is_spd(A, rtol=0.0):
    w = np.linalg.eigvalsh(sym(A))
    return np.all(w > rtol, axis=-1)
