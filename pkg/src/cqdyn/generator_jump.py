"""Jump-class CQ master equation on a finite classical site set.

With the operator basis ``L_0 = I, L_1, ..., L_p`` and rate blocks
``W^{mu nu}(z|z')`` the state evolves as

.. math::

    \\dot\\varrho(z) = \\sum_{z'} W^{\\mu\\nu}(z|z') L_\\mu \\varrho(z') L_\\nu^\\dagger
        - \\tfrac12 \\{K(z), \\varrho(z)\\}, \\qquad
    K(z) = \\sum_{z'} W^{\\mu\\nu}(z'|z) L_\\nu^\\dagger L_\\mu .

The compensator ``K`` is built from the kernel, so total probability is
conserved by construction. An optional site Hamiltonian adds ``-i[H(z), rho(z)]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from . import quantum_algebra as qa
from .hybrid_state import DiscreteHybridState
from .integrator import SAFETY

BLOCK_TOL = 1e-10


class KernelError(ValueError):
    """Kernel data are structurally inconsistent."""


@dataclass
class JumpKernel:
    """Transition-rate blocks of the jump class.

    Attributes
    ----------
    sites : (m, d) classical points (1-d input is promoted to ``(m, 1)``)
    lindblads : (p, n, n) operators; the identity is prepended internally
    blocks : (m, m, p+1, p+1) complex, ``blocks[z, z']`` is ``W(z|z')``
    hamiltonian : optional (n, n) or (m, n, n) Hermitian site Hamiltonian
    """

    sites: np.ndarray
    lindblads: np.ndarray
    blocks: np.ndarray
    hamiltonian: np.ndarray | None = None

    def __post_init__(self):
        self.sites = np.asarray(self.sites, dtype=float)
        if self.sites.ndim == 1:
            self.sites = self.sites[:, None]
        m = self.sites.shape[0]
        W = np.asarray(self.blocks, dtype=complex)
        L = np.asarray(self.lindblads, dtype=complex)
        if L.ndim == 2:
            L = L[None]
        if L.ndim != 3 and not (L.size == 0):
            raise KernelError(f"lindblads must have shape (p, n, n), got {L.shape}")
        if W.ndim != 4 or W.shape[:2] != (m, m) or W.shape[2] != W.shape[3]:
            raise KernelError(f"blocks must have shape ({m}, {m}, p+1, p+1), got {W.shape}")
        P = W.shape[2]
        if L.size == 0:
            if self.hamiltonian is None:
                n = 1
            else:
                n = np.shape(self.hamiltonian)[-1]
            L = np.zeros((0, n, n), dtype=complex)
        if L.shape[0] != P - 1:
            raise KernelError(f"{L.shape[0]} Lindblad operators need ({L.shape[0] + 1}, {L.shape[0] + 1}) blocks, got {P}")
        self.lindblads = qa.check_lindblad_set(L) if L.shape[0] else L
        asym = float(np.max(np.abs(W - np.conj(np.swapaxes(W, -1, -2)))))
        if asym > BLOCK_TOL * max(1.0, float(np.max(np.abs(W)))):
            raise KernelError(f"rate blocks must be Hermitian in (mu, nu); asymmetry {asym:.3e}")
        self.blocks = W
        if self.hamiltonian is not None:
            H = np.asarray(self.hamiltonian, dtype=complex)
            if H.shape[-2:] != (self.n_q, self.n_q) or H.ndim not in (2, 3) or (H.ndim == 3 and H.shape[0] != m):
                raise KernelError(f"hamiltonian must be ({self.n_q}, {self.n_q}) or ({m}, {self.n_q}, {self.n_q})")
            if qa.hermiticity_error(H) > BLOCK_TOL * max(1.0, float(np.max(np.abs(H)))):
                raise KernelError("hamiltonian is not Hermitian")
            self.hamiltonian = H

    @property
    def n_sites(self) -> int:
        return self.sites.shape[0]

    @property
    def n_q(self) -> int:
        return self.lindblads.shape[-1]

    def basis(self) -> np.ndarray:
        """``(p+1, n, n)`` operator basis ``I, L_1, ..., L_p``."""
        return np.concatenate([np.eye(self.n_q, dtype=complex)[None], self.lindblads])

    def compensator(self) -> np.ndarray:
        """``K(z) = sum_{z'} W^{mu nu}(z'|z) L_nu^dag L_mu``, shape ``(m, n, n)``."""
        B = self.basis()
        LdL = np.einsum("nba,mbc->mnac", B.conj(), B)  # [mu, nu] -> L_nu^dag L_mu
        return np.einsum("wzmn,mnac->zac", self.blocks, LdL)

    def site_hamiltonians(self) -> np.ndarray | None:
        if self.hamiltonian is None:
            return None
        return np.broadcast_to(self.hamiltonian, (self.n_sites, self.n_q, self.n_q))


def _check_state(s: DiscreteHybridState, k: JumpKernel) -> None:
    if s.rho.shape != (k.n_sites, k.n_q, k.n_q):
        raise KernelError(f"state of shape {s.rho.shape} does not match kernel with "
                          f"{k.n_sites} sites and n_q = {k.n_q}")
    if s.sites.shape != k.sites.shape or not np.allclose(s.sites, k.sites):
        raise KernelError("state sites do not match kernel sites")


def _jump_rhs(rho: np.ndarray, B: np.ndarray, W: np.ndarray, K: np.ndarray, H: np.ndarray | None) -> np.ndarray:
    A = np.einsum("mab,wbc->wmac", B, rho)                     # L_mu rho(z')
    gain = np.einsum("zwmn,wmac,ndc->zad", W, A, B.conj())     # ... L_nu^dag
    out = gain - 0.5 * (K @ rho + rho @ K)
    if H is not None:
        out += -1j * (H @ rho - rho @ H)
    return out


def apply_jump_generator(s: DiscreteHybridState, k: JumpKernel) -> np.ndarray:
    """Time derivative of ``s.rho`` under ``k``, shape ``(m, n, n)``."""
    _check_state(s, k)
    return _jump_rhs(s.rho, k.basis(), k.blocks, k.compensator(), k.site_hamiltonians())


def generator_matrix(k: JumpKernel) -> np.ndarray:
    """Column-stacking superoperator of the jump generator, shape ``(m n^2, m n^2)``.

    Block ``(z, z')`` maps ``vec rho(z')`` to its contribution to ``d vec rho(z)/dt``.
    """
    m, n = k.n_sites, k.n_q
    B = k.basis()
    P = B.shape[0]
    N = n * n
    # kron(conj(L_nu), L_mu) for every (mu, nu)
    S = np.einsum("nab,mcd->mnacbd", B.conj(), B).reshape(P, P, N, N)
    G = np.einsum("zwmn,mnij->ziwj", k.blocks, S).reshape(m * N, m * N)
    K = k.compensator()
    Hs = k.site_hamiltonians()
    eye = np.eye(n)
    for z in range(m):
        loc = -0.5 * (np.kron(eye, K[z]) + np.kron(K[z].T, eye))
        if Hs is not None:
            loc += -1j * (np.kron(eye, Hs[z]) - np.kron(Hs[z].T, eye))
        G[z * N:(z + 1) * N, z * N:(z + 1) * N] += loc
    return G


def propagator(k: JumpKernel, dt: float) -> np.ndarray:
    """Exact snapshot ``Lambda(z|z')`` as superoperators, shape ``(m, m, n^2, n^2)``."""
    m, N = k.n_sites, k.n_q**2
    E = expm(dt * generator_matrix(k))
    return E.reshape(m, N, m, N).transpose(0, 2, 1, 3).copy()


@dataclass(frozen=True)
class KernelCertificate:
    """Positivity and normalization summary of a jump kernel.

    ``margin`` is the smallest eigenvalue over the off-site blocks
    ``W(z|z')`` and the Lindblad sub-blocks ``W^{alpha beta}(z|z)``;
    ``residual`` is the largest deviation from trace preservation.
    """

    margin: float
    offsite_margin: float
    onsite_margin: float
    residual: float
    worst_pair: tuple[int, int] | None
    scale: float = 1.0
    tol: float = BLOCK_TOL

    @property
    def valid(self) -> bool:
        return self.margin >= -self.tol and self.residual <= 1e-12 * self.scale


def cp_check_kernel(k: JumpKernel, tol: float = BLOCK_TOL) -> KernelCertificate:
    """Block positivity of the kernel and trace preservation of its generator."""
    m = k.n_sites
    W = k.blocks
    ev = np.linalg.eigvalsh(qa.symmetrize(W))[..., 0]           # (m, m)
    off = ~np.eye(m, dtype=bool)
    offsite = float(ev[off].min()) if m > 1 else np.inf
    if off.any():
        z, w = np.unravel_index(np.argmin(np.where(off, ev, np.inf)), ev.shape)
        worst = (int(z), int(w))
    else:
        worst = None
    P = W.shape[2]
    if P > 1:
        local = np.array([np.linalg.eigvalsh(qa.symmetrize(W[z, z, 1:, 1:]))[0] for z in range(m)])
        onsite = float(local.min())
    else:
        onsite = np.inf
    # trace preservation: sum over targets of vec(I)^dag G(z|z') vanishes
    N = k.n_q**2
    G = generator_matrix(k).reshape(m, N, m, N)
    vI = qa.vectorize(np.eye(k.n_q))
    rows = np.einsum("i,ziwj->wj", vI.conj(), G)
    residual = float(np.max(np.abs(rows))) if rows.size else 0.0
    scale = float(np.max(np.abs(W))) if W.size else 1.0
    margin = min(offsite, onsite)
    return KernelCertificate(0.0 if margin == np.inf else margin, offsite, onsite, residual, worst,
                             max(scale, 1.0), tol)


class JumpGenerator:
    """Precomputed jump generator usable by :func:`cqdyn.integrator.evolve`."""

    def __init__(self, kernel: JumpKernel):
        self.kernel = kernel
        self._B = kernel.basis()
        self._K = kernel.compensator()
        self._H = kernel.site_hamiltonians()

    def __call__(self, rho) -> np.ndarray:
        rho = rho.rho if hasattr(rho, "rho") else np.asarray(rho)
        return _jump_rhs(rho, self._B, self.kernel.blocks, self._K, self._H)

    def spectral_radius(self) -> float:
        k = self.kernel
        G = generator_matrix(k)
        if G.shape[0] <= 1024:
            return float(np.max(np.abs(np.linalg.eigvals(G))))
        return float(np.linalg.norm(G, 1))

    def stability_bound(self, safety: float = SAFETY) -> float:
        """``safety * 2 / rho(G)``; RK4 is stable up to about ``2.78 / rho(G)``."""
        r = self.spectral_radius()
        return safety * 2.0 / r if r > 0 else float("inf")
