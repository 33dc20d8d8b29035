"""Dense operator algebra for the quantum factor.

Operators are plain ``numpy`` complex arrays. Functions accept single
matrices of shape ``(n, n)`` and, where noted, stacks ``(..., n, n)``.

Vectorization uses column stacking, ``|i><j| -> |j> (x) |i>``, so that
``vec(A X B) = (B^T (x) A) vec(X)``.

Lindblad basis convention: Pauli-like bases are normalized so that
``Tr(L_a^dag L_b) = n * delta_ab`` (e.g. the Pauli matrices themselves).
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import gammaln

HERMITIAN_TOL = 1e-10


class NotHermitianError(ValueError):
    """Raised when a matrix that must be Hermitian is not, within tolerance."""

    def __init__(self, asymmetry: float, tol: float):
        super().__init__(f"matrix is not Hermitian: ||A - A^dag|| = {asymmetry:.3e} > {tol:.1e}")
        self.asymmetry = asymmetry
        self.tol = tol


def dag(A: np.ndarray) -> np.ndarray:
    """Conjugate transpose over the last two axes."""
    return np.conj(np.swapaxes(A, -1, -2))


def commutator(A, B):
    return A @ B - B @ A


def anticommutator(A, B):
    return A @ B + B @ A


def _check_same_dim(*ops):
    n = ops[0].shape[-1]
    for op in ops:
        if op.shape[-1] != n or op.shape[-2] != n:
            raise ValueError(f"dimension mismatch: expected {n}x{n}, got {op.shape[-2:]}")


def dissipator(L: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Lindblad dissipator ``L rho L^dag - 1/2 {L^dag L, rho}``.

    ``rho`` may be a stack of matrices.
    """
    return dissipator_pair(L, L, rho)


def dissipator_pair(La: np.ndarray, Lb: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Cross dissipator ``La rho Lb^dag - 1/2 {Lb^dag La, rho}`` for one (alpha, beta) pair."""
    La = np.asarray(La)
    Lb = np.asarray(Lb)
    rho = np.asarray(rho)
    _check_same_dim(La, Lb, rho)
    K = dag(Lb) @ La
    return La @ rho @ dag(Lb) - 0.5 * (K @ rho + rho @ K)


def vectorize(A: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization of a square matrix."""
    A = np.asarray(A)
    return np.swapaxes(A, -1, -2).reshape(A.shape[:-2] + (-1,))


def devectorize(v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`vectorize`."""
    v = np.asarray(v)
    m = v.shape[-1]
    n = int(round(np.sqrt(m)))
    if n * n != m:
        raise ValueError(f"vector length {m} is not a perfect square")
    return np.swapaxes(v.reshape(v.shape[:-1] + (n, n)), -1, -2)


def superop_from_pair(L: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Matrix of ``X -> L X R^dag`` acting on column-stacked vectors."""
    L = np.asarray(L)
    R = np.asarray(R)
    _check_same_dim(L, R)
    return np.kron(np.conj(R), L)


def superop_left(A: np.ndarray) -> np.ndarray:
    """Matrix of ``X -> A X``."""
    n = A.shape[-1]
    return np.kron(np.eye(n), A)


def superop_right(B: np.ndarray) -> np.ndarray:
    """Matrix of ``X -> X B``."""
    n = B.shape[-1]
    return np.kron(B.T, np.eye(n))


def lindblad_superop(L: np.ndarray) -> np.ndarray:
    """Vectorized dissipator of a single Lindblad operator."""
    K = dag(L) @ L
    return superop_from_pair(L, L) - 0.5 * (superop_left(K) + superop_right(K))


def hermiticity_error(A: np.ndarray) -> float:
    """Largest absolute entry of ``A - A^dag`` (over a stack as well)."""
    A = np.asarray(A)
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(A - dag(A))))


def symmetrize(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + dag(A))


def _hermitian_checked(A: np.ndarray, tol: float) -> np.ndarray:
    A = np.asarray(A)
    if A.shape[-1] != A.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {A.shape}")
    asym = hermiticity_error(A)
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if asym > tol * scale:
        raise NotHermitianError(asym, tol * scale)
    return symmetrize(A)


def min_eigenvalue_hermitian(A: np.ndarray, tol: float = HERMITIAN_TOL) -> float:
    """Smallest eigenvalue of a Hermitian matrix.

    The matrix is symmetrized before the eigen-solve. Asymmetry beyond
    ``tol`` (scaled by ``max(1, max|A|)``) raises :class:`NotHermitianError`.
    For a stack the minimum over all matrices is returned.
    """
    H = _hermitian_checked(A, tol)
    if H.shape[-1] == 0:
        return np.inf
    return float(np.min(np.linalg.eigvalsh(H)))


def min_eigenvalues(A: np.ndarray, tol: float = HERMITIAN_TOL) -> np.ndarray:
    """Per-matrix smallest eigenvalue for a stack ``(..., n, n)``."""
    H = _hermitian_checked(A, tol)
    return np.linalg.eigvalsh(H)[..., 0]


def is_psd(A: np.ndarray, tol: float = 1e-10) -> bool:
    return min_eigenvalue_hermitian(A) >= -tol


def check_lindblad_set(ops: Sequence[np.ndarray] | np.ndarray, traceless: bool = False,
                       trace_tol: float = 1e-12) -> np.ndarray:
    """Validate a Lindblad set and return it as a ``(p, n, n)`` complex array."""
    ops = np.asarray(ops, dtype=complex)
    if ops.ndim == 2:
        ops = ops[None]
    if ops.ndim != 3 or ops.shape[1] != ops.shape[2]:
        raise ValueError(f"Lindblad set must have shape (p, n, n), got {ops.shape}")
    if traceless:
        tr = np.abs(np.trace(ops, axis1=1, axis2=2))
        bad = np.flatnonzero(tr > trace_tol)
        if bad.size:
            raise ValueError(f"Lindblad operator {int(bad[0])} has trace {tr[bad[0]]:.3e}, expected traceless")
    return ops


def choi_from_superop(S: np.ndarray) -> np.ndarray:
    """Choi matrix ``sum_ab E_ab (x) Lambda(E_ab)`` of a column-stacking superoperator.

    The reference factor comes first in the tensor product.
    """
    S = np.asarray(S)
    m = S.shape[-1]
    n = int(round(np.sqrt(m)))
    S4 = S.reshape(S.shape[:-2] + (n, n, n, n))
    # S4[..., j, i, b, a] = <i| Lambda(|a><b|) |j>
    J4 = np.moveaxis(S4, (-4, -3, -2, -1), (-1, -3, -2, -4))
    return J4.reshape(S.shape[:-2] + (m, m))


def superop_from_choi(J: np.ndarray) -> np.ndarray:
    J = np.asarray(J)
    m = J.shape[-1]
    n = int(round(np.sqrt(m)))
    J4 = J.reshape(J.shape[:-2] + (n, n, n, n))
    S4 = np.moveaxis(J4, (-1, -3, -2, -4), (-4, -3, -2, -1))
    return S4.reshape(J.shape[:-2] + (m, m))


def transpose_superop(n: int) -> np.ndarray:
    """Superoperator of the transpose map (positive but not completely positive)."""
    S = np.zeros((n * n, n * n))
    for i in range(n):
        for j in range(n):
            # vec index of |i><j| is i + n j; transpose sends it to |j><i|
            S[j + n * i, i + n * j] = 1.0
    return S


# --- standard operators -----------------------------------------------------

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)  # |0><1|, lowers |1> -> |0>
SIGMA_PLUS = SIGMA_MINUS.T.copy()


def destroy(n: int) -> np.ndarray:
    """Truncated annihilation operator in the number basis."""
    return np.diag(np.sqrt(np.arange(1, n)), 1).astype(complex)


def position(n: int) -> np.ndarray:
    """``Q = (a + a^dag)/sqrt(2)`` with hbar = 1."""
    a = destroy(n)
    return (a + a.conj().T) / np.sqrt(2)


def momentum(n: int) -> np.ndarray:
    """``P = i (a^dag - a)/sqrt(2)``."""
    a = destroy(n)
    return 1j * (a.conj().T - a) / np.sqrt(2)


def number(n: int) -> np.ndarray:
    return np.diag(np.arange(n)).astype(complex)


def oscillator_hamiltonian(n: int, omega: float) -> np.ndarray:
    """``P^2/2 + omega^2 Q^2/2`` built from the truncated Q and P."""
    Q = position(n)
    P = momentum(n)
    return 0.5 * (P @ P) + 0.5 * omega**2 * (Q @ Q)


def coherent_state(n: int, alpha: complex) -> np.ndarray:
    """Normalized truncated coherent state vector."""
    k = np.arange(n)
    logc = -0.5 * gammaln(k + 1)
    psi = np.exp(logc) * np.power(complex(alpha), k)
    psi = psi.astype(complex)
    return psi / np.linalg.norm(psi)


def ket(n: int, k: int) -> np.ndarray:
    v = np.zeros(n, dtype=complex)
    v[k] = 1.0
    return v


def projector(psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    return np.outer(psi, psi.conj())


def pauli_basis() -> np.ndarray:
    """Traceless qubit basis (X, Y, Z) with ``Tr(L_a^dag L_b) = 2 delta_ab``."""
    return np.stack([SIGMA_X, SIGMA_Y, SIGMA_Z])


def random_density(n: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    rank = n if rank is None else rank
    G = rng.standard_normal((n, rank)) + 1j * rng.standard_normal((n, rank))
    rho = G @ G.conj().T
    return rho / np.trace(rho).real


def random_hermitian(n: int, rng: np.random.Generator) -> np.ndarray:
    A = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return 0.5 * (A + A.conj().T)


def random_operator(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
