"""Continuous CQ master equation: drift, diffusion, back-reaction, Lindblad.

The generator acting on ``rho(z)`` is

.. math::

    \\dot\\varrho = -\\partial_i(v_i \\varrho) + \\partial_i\\partial_j(D_{2,ij} \\varrho)
        - \\partial_i\\big(D_{1,i\\alpha}\\, \\varrho L_\\alpha^\\dagger
                            + D_{1,i\\alpha}^*\\, L_\\alpha \\varrho\\big)
        - i[H(z), \\varrho]
        + D_0^{\\alpha\\beta}\\big(L_\\alpha \\varrho L_\\beta^\\dagger
              - \\tfrac12\\{L_\\beta^\\dagger L_\\alpha, \\varrho\\}\\big)
        + \\gamma\\, \\partial_k (z_k \\varrho)

Every derivative order carries the Kramers-Moyal sign ``(-1)^n``, so the
coefficients are the short-time moments of the dynamics: ``v`` is the
classical drift, ``D1`` the back-reaction moment and ``D2`` the diffusion.
The last term is friction on the designated momentum axes.

Two evaluation routes are provided. :func:`apply_continuous_generator`
applies the equation term by term and accepts any input.
:class:`ContinuousGenerator` compiles the couplings for a grid and assumes
Hermitian input; the integrator uses it.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import schur

from . import quantum_algebra as qa
from ._kernels import cq_rhs
from .phase_space import PhaseGrid

PSD_TOL = 1e-10


class CouplingError(ValueError):
    """Couplings violate a structural invariant (shape, Hermiticity, PSD)."""


def _field(x, base_shape: tuple[int, ...], grid_shape: tuple[int, ...] | None, name: str,
           dtype=complex) -> np.ndarray:
    """Broadcast a constant or field coefficient to ``grid_shape + base_shape``."""
    x = np.asarray(x, dtype=dtype)
    nb = len(base_shape)
    if x.shape[x.ndim - nb:] != base_shape:
        raise CouplingError(f"{name}: trailing shape {x.shape[x.ndim - nb:]} should be {base_shape}")
    if grid_shape is None:
        return x
    lead = x.shape[:x.ndim - nb]
    if lead and lead != grid_shape:
        raise CouplingError(f"{name}: field shape {lead} does not match grid {grid_shape}")
    return np.broadcast_to(x, grid_shape + base_shape)


def _is_field(x, base_ndim: int) -> bool:
    return np.ndim(x) > base_ndim


@dataclass
class CouplingSet:
    """Couplings of the continuous class.

    Constant coefficients have their base shape; fields carry the grid
    shape in front. ``hamiltonian_terms`` holds ``(f, O)`` pairs adding
    ``f(z) O`` to the Hamiltonian, for real scalar fields ``f``.

    Attributes
    ----------
    lindblads : (p, n, n) complex
    hamiltonian : (n, n) or grid.shape + (n, n)
    D0 : (p, p) Hermitian PSD, constant or field
    D1 : (d, p) complex back-reaction, row ``i`` is the classical axis
    drift00 : (d,) real classical drift, constant or field
    D2 : (d, d) real symmetric PSD diffusion, constant or field
    friction : gamma >= 0, acting on ``friction_axes``
    """

    lindblads: np.ndarray
    hamiltonian: np.ndarray
    D0: np.ndarray
    D1: np.ndarray
    drift00: np.ndarray
    D2: np.ndarray
    friction: float = 0.0
    friction_axes: tuple[int, ...] = ()
    hamiltonian_terms: tuple = ()
    traceless: bool = False

    def __post_init__(self):
        L = np.asarray(self.lindblads, dtype=complex)
        H = np.asarray(self.hamiltonian, dtype=complex)
        n = H.shape[-1]
        if L.size == 0:
            L = np.zeros((0, n, n), dtype=complex)
        self.lindblads = qa.check_lindblad_set(L, traceless=self.traceless) if L.shape[0] else L
        if self.lindblads.shape[1:] != (n, n):
            raise CouplingError(f"lindblads have dimension {self.lindblads.shape[1:]}, hamiltonian {H.shape[-2:]}")
        if H.shape[-1] != H.shape[-2]:
            raise CouplingError("hamiltonian must be square")
        if qa.hermiticity_error(H) > PSD_TOL * max(1.0, float(np.max(np.abs(H)))):
            raise CouplingError("hamiltonian is not Hermitian")
        self.hamiltonian = H
        p = self.lindblads.shape[0]
        D2 = np.asarray(self.D2, dtype=float)
        d = D2.shape[-1]
        self.D2 = _field(D2, (d, d), None, "D2", float)
        D0 = np.asarray(self.D0, dtype=complex)
        D1 = np.asarray(self.D1, dtype=complex)
        self.D0 = _field(D0 if D0.size else np.zeros((p, p), complex), (p, p), None, "D0")
        self.D1 = _field(D1 if D1.size else np.zeros((d, p), complex), (d, p), None, "D1")
        self.drift00 = _field(self.drift00, (d,), None, "drift00", float)
        if self.friction < 0:
            raise CouplingError(f"friction must be >= 0, got {self.friction}")
        self.friction_axes = tuple(int(a) for a in self.friction_axes)
        if any(not 0 <= a < d for a in self.friction_axes):
            raise CouplingError(f"friction axes {self.friction_axes} out of range for d = {d}")
        terms = []
        for f, op in self.hamiltonian_terms:
            op = np.asarray(op, dtype=complex)
            if op.shape != (n, n) or qa.hermiticity_error(op) > PSD_TOL * max(1.0, float(np.max(np.abs(op)))):
                raise CouplingError("hamiltonian term operators must be Hermitian n x n matrices")
            terms.append((np.asarray(f, dtype=float), op))
        self.hamiltonian_terms = tuple(terms)
        self._check_psd()

    def _check_psd(self):
        p = self.n_lindblads
        if p:
            D0 = self.D0
            asym = qa.hermiticity_error(D0)
            if asym > PSD_TOL * max(1.0, float(np.max(np.abs(D0)))):
                raise CouplingError(f"D0 is not Hermitian (asymmetry {asym:.3e})")
            m = float(np.min(np.linalg.eigvalsh(qa.symmetrize(D0))))
            if m < -PSD_TOL:
                raise CouplingError(f"D0 is not positive semi-definite (min eigenvalue {m:.3e})")
        D2 = self.D2
        if np.max(np.abs(D2 - np.swapaxes(D2, -1, -2)), initial=0.0) > PSD_TOL * max(1.0, float(np.max(np.abs(D2)))):
            raise CouplingError("D2 is not symmetric")
        m = float(np.min(np.linalg.eigvalsh(0.5 * (D2 + np.swapaxes(D2, -1, -2)))))
        if m < -PSD_TOL:
            raise CouplingError(f"D2 is not positive semi-definite (min eigenvalue {m:.3e})")

    @property
    def n_q(self) -> int:
        return self.hamiltonian.shape[-1]

    @property
    def n_lindblads(self) -> int:
        return self.lindblads.shape[0]

    @property
    def dim(self) -> int:
        return self.D2.shape[-1]

    def field_shape(self) -> tuple[int, ...] | None:
        """Grid shape implied by any field-valued coefficient, or None."""
        shapes = []
        for x, nb in ((self.hamiltonian, 2), (self.D0, 2), (self.D1, 2), (self.drift00, 1), (self.D2, 2)):
            if np.ndim(x) > nb:
                shapes.append(np.shape(x)[:np.ndim(x) - nb])
        shapes += [np.shape(f) for f, _ in self.hamiltonian_terms if np.ndim(f) > 0]
        if not shapes:
            return None
        if any(s != shapes[0] for s in shapes):
            raise CouplingError(f"field coefficients disagree on grid shape: {sorted(set(shapes))}")
        return shapes[0]

    def check_grid(self, grid: PhaseGrid) -> None:
        if grid.ndim != self.dim:
            raise CouplingError(f"couplings are {self.dim}-dimensional, grid is {grid.ndim}-dimensional")
        fs = self.field_shape()
        if fs is not None and fs != grid.shape:
            raise CouplingError(f"field coefficients have shape {fs}, grid is {grid.shape}")
        for f, _ in self.hamiltonian_terms:
            if np.ndim(f) not in (0, grid.ndim):
                raise CouplingError("hamiltonian term fields must be scalars or grid-shaped")

    def total_hamiltonian(self, grid_shape: tuple[int, ...] | None = None) -> np.ndarray:
        H = self.hamiltonian
        if not self.hamiltonian_terms:
            return H
        shape = grid_shape or self.field_shape() or ()
        H = np.broadcast_to(H, tuple(shape) + H.shape[-2:]).copy()
        for f, op in self.hamiltonian_terms:
            H = H + np.asarray(f)[..., None, None] * op
        return H


# --- reference route ------------------------------------------------------

def _rho_of(s):
    return (s.grid, s.rho) if hasattr(s, "grid") else s


def apply_continuous_generator(s, c: CouplingSet) -> np.ndarray:
    """Right-hand side of the continuous master equation, term by term.

    ``s`` is a :class:`~cqdyn.hybrid_state.HybridState` (or a ``(grid, rho)``
    pair). Works for arbitrary (also non-Hermitian) input matrices.
    """
    grid, rho = _rho_of(s)
    rho = np.asarray(rho, dtype=complex)
    c.check_grid(grid)
    if rho.shape != grid.shape + (c.n_q, c.n_q):
        raise CouplingError(f"state shape {rho.shape} does not match grid {grid.shape} and n_q = {c.n_q}")
    gs = grid.shape
    d = grid.ndim
    L = c.lindblads
    p = c.n_lindblads
    out = np.zeros_like(rho)

    # classical drift and diffusion
    v = _field(c.drift00, (d,), gs, "drift00", float)
    for i in range(d):
        if np.any(v[..., i]):
            out -= grid.partial(v[..., i][..., None, None] * rho, i)
    D2 = _field(c.D2, (d, d), gs, "D2", float)
    for i in range(d):
        for j in range(d):
            if np.any(D2[..., i, j]):
                out += grid.second_partial(D2[..., i, j][..., None, None] * rho, i, j)

    # back-reaction
    D1 = _field(c.D1, (d, p), gs, "D1")
    for i in range(d):
        if not np.any(D1[..., i, :]):
            continue
        B = np.zeros_like(rho)
        for a in range(p):
            w = D1[..., i, a][..., None, None]
            B += w * (rho @ qa.dag(L[a])) + np.conj(w) * (L[a] @ rho)
        out -= grid.partial(B, i)

    # Hamiltonian
    H = c.hamiltonian
    out += -1j * (H @ rho - rho @ H)
    for f, op in c.hamiltonian_terms:
        fz = np.broadcast_to(np.asarray(f), gs)[..., None, None]
        out += -1j * fz * (op @ rho - rho @ op)

    # Lindblad part
    D0 = _field(c.D0, (p, p), gs, "D0")
    for a in range(p):
        for b in range(p):
            w = D0[..., a, b]
            if np.any(w):
                out += w[..., None, None] * qa.dissipator_pair(L[a], L[b], rho)

    # friction gamma d_k (z_k rho)
    for k in c.friction_axes:
        out += c.friction * grid.partial(grid.coord_field(k)[..., None, None] * rho, k)
    return out


# --- canonicalization -------------------------------------------------------

def canonicalize(c: CouplingSet) -> CouplingSet:
    """Remove the trace of each Lindblad operator without changing the dynamics.

    With ``b_a = Tr L_a / n`` and traceless ``Lbar_a = L_a - b_a I`` the
    generator is unchanged when

    * the drift gains ``D1_ia b_a^* + D1_ia^* b_a``, and
    * the Hamiltonian gains ``(i/2) D0^{ab} (b_b^* Lbar_a - b_a Lbar_b^dag)``.

    ``D0`` and ``D2`` are left untouched.
    """
    L = c.lindblads
    n = c.n_q
    if c.n_lindblads == 0:
        return replace(c)
    b = np.trace(L, axis1=1, axis2=2) / n
    if not np.any(b):
        return replace(c)
    Lbar = L - b[:, None, None] * np.eye(n)
    drift = c.drift00 + 2 * np.real(np.einsum("...ia,a->...i", c.D1, np.conj(b)))
    # A = sum_ab D0^{ab} (b_b^* Lbar_a - b_a Lbar_b^dag), anti-Hermitian
    A = (np.einsum("...ab,b,ajk->...jk", c.D0, np.conj(b), Lbar)
         - np.einsum("...ab,a,bjk->...jk", c.D0, b, qa.dag(Lbar)))
    H = c.hamiltonian + 0.5j * A
    H = qa.symmetrize(H)
    return replace(c, lindblads=Lbar, hamiltonian=H, drift00=drift, traceless=True)


# --- helpers ----------------------------------------------------------------

def symplectic_drift(dH_dq: np.ndarray, dH_dp: np.ndarray) -> np.ndarray:
    """Liouville drift ``(dH/dp, -dH/dq)`` for one (q, p) pair, stacked last."""
    return np.stack([np.asarray(dH_dp, float), -np.asarray(dH_dq, float)], axis=-1)


def hamiltonian_drift(grid: PhaseGrid, H_c: Callable[..., np.ndarray],
                      pairs: Sequence[tuple[int, int]] = ((0, 1),)) -> np.ndarray:
    """Drift field of the Poisson flow ``{H_c, rho}`` on ``grid``.

    ``H_c(*coords)`` must be built from analytic numpy operations; its
    gradient is taken by complex-step differentiation, exact to rounding.
    """
    coords = grid.mesh()
    eps = 1e-30
    grad = []
    for i in range(grid.ndim):
        z = [x.astype(complex) for x in coords]
        z[i] = z[i] + 1j * eps
        grad.append(np.imag(np.asarray(H_c(*z), dtype=complex)) / eps)
    v = np.zeros(grid.shape + (grid.ndim,))
    for q, p in pairs:
        v[..., q] = grad[p]
        v[..., p] = -grad[q]
    return v


# --- compiled route ---------------------------------------------------------

def _offdiag_norm(A: np.ndarray) -> float:
    return float(np.linalg.norm(A - np.diag(np.diag(A))))


def _joint_basis(ops: Sequence[np.ndarray], tol: float = 1e-10) -> np.ndarray:
    """Unitary diagonalizing every op in ``ops`` if they are commuting normal matrices, else identity."""
    n = ops[0].shape[0] if ops else 0
    I = np.eye(n, dtype=complex)
    ops = [A for A in ops if np.linalg.norm(A) > 0]
    if not ops:
        return I
    scale = [max(1.0, np.linalg.norm(A)) for A in ops]
    if all(_offdiag_norm(A) <= tol * s for A, s in zip(ops, scale)):
        return I
    for A in ops:
        if np.linalg.norm(A @ qa.dag(A) - qa.dag(A) @ A) > tol * np.linalg.norm(A) ** 2:
            return I
    for i, A in enumerate(ops):
        for B in ops[i + 1:]:
            if np.linalg.norm(A @ B - B @ A) > tol * np.linalg.norm(A) * np.linalg.norm(B):
                return I
    rng = np.random.default_rng(12345)
    if all(qa.hermiticity_error(A) <= tol * s for A, s in zip(ops, scale)):
        M = sum(rng.standard_normal() * qa.symmetrize(A) / np.linalg.norm(A) for A in ops)
        if not np.any(M.imag):
            M = M.real  # real symmetric: keep the basis real
        _, U = np.linalg.eigh(M)
        U = U.astype(complex)
    else:
        M = sum((rng.standard_normal() + 1j * rng.standard_normal()) * A / np.linalg.norm(A) for A in ops)
        _, U = schur(M, output="complex")
    if any(_offdiag_norm(qa.dag(U) @ A @ U) > 1e3 * tol * s for A, s in zip(ops, scale)):
        return I
    return U


def _planes(A: np.ndarray) -> np.ndarray:
    """Complex ``(..., n, n)`` -> real ``(..., 2, n, n)`` with (re, im) planes."""
    A = np.asarray(A)
    return np.ascontiguousarray(np.stack([A.real, A.imag], axis=-3))


def _plane_kinds(P: np.ndarray) -> np.ndarray:
    """0/1/2 for real, imaginary or general factors stored as ``(..., 2, n, n)`` planes."""
    re = np.any(P[..., 0, :, :] != 0, axis=(-1, -2))
    im = np.any(P[..., 1, :, :] != 0, axis=(-1, -2))
    return np.where(im & re, 2, np.where(im, 1, 0)).astype(np.int64)


class _PlaneProduct:
    """Right multiplication ``X -> X @ B`` of plane-stored stacks by a complex stack of matrices."""

    def __init__(self, mats: Sequence[np.ndarray], rows: int):
        self.k = len(mats)
        S = np.hstack(mats) if mats else np.zeros((0, 0))
        self.Sr = np.ascontiguousarray(S.real)
        self.Si = np.ascontiguousarray(S.imag)
        self.Sneg = -self.Si
        self.has_r = bool(np.any(self.Sr))
        self.has_i = bool(np.any(self.Si))
        cols = S.shape[1]
        self.pr = np.zeros((rows, cols))
        self.pi = np.zeros((rows, cols))

    def __call__(self, xr: np.ndarray, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Products for ``xr, xi`` of shape ``(M, n)``; returns planes ``(M, k n)`` (reused buffers)."""
        pr, pi = self.pr, self.pi
        if self.has_r:
            np.matmul(xr, self.Sr, out=pr)
            np.matmul(xi, self.Sr, out=pi)
            if self.has_i:
                pr += xi @ self.Sneg
                pi += xr @ self.Si
        elif self.has_i:
            np.matmul(xi, self.Sneg, out=pr)
            np.matmul(xr, self.Si, out=pi)
        return pr, pi


def _cmatmul(ar, ai, br, bi):
    """Complex product from planes (broadcasting like ``@``)."""
    return ar @ br - ai @ bi, ar @ bi + ai @ br


class ContinuousGenerator:
    """Continuous generator compiled for one grid.

    The couplings are rewritten in a working basis that diagonalizes the
    Lindblad and field-modulated Hamiltonian operators when they commute.
    Diagonal operators then act elementwise and run in one compiled pass.
    Off-diagonal parts go through BLAS products. Input matrices must be
    Hermitian; the output is Hermitian by construction.

    The working representation is a real array ``(2, G, n, n)`` holding the
    real and imaginary parts of the rotated state. ``__call__`` accepts and
    returns ordinary complex fields in the original basis; the
    ``*_working`` methods are what the integrator uses.
    """

    def __init__(self, grid: PhaseGrid, couplings: CouplingSet, diag_tol: float = 1e-13):
        c = couplings
        c.check_grid(grid)
        self.grid = grid
        self.couplings = c
        gs = grid.shape
        G = grid.size
        d = grid.ndim
        n = c.n_q
        p = c.n_lindblads
        self.n_q = n
        self.shape = gs
        self.working_shape = (2, G, n, n)

        D0 = _field(c.D0, (p, p), None, "D0")
        D1 = _field(c.D1, (d, p), None, "D1")
        H = c.hamiltonian
        H_field = np.ndim(H) > 2
        D0_field = np.ndim(D0) > 2

        # working basis
        basis_ops = [L for L in c.lindblads] + [op for _, op in c.hamiltonian_terms]
        U = _joint_basis(basis_ops) if n > 1 else np.eye(n, dtype=complex)
        self.U = U
        self._identity_basis = bool(np.array_equal(U, np.eye(n)))
        Ud = qa.dag(U)
        rot = lambda A: Ud @ A @ U
        is_diag = lambda A: _offdiag_norm(A) <= diag_tol * max(1.0, np.linalg.norm(A))
        clean = lambda A: np.diag(np.diag(A)) if is_diag(A) else A
        Lw = np.array([clean(rot(L)) for L in c.lindblads]).reshape(p, n, n)

        e_rows, e_coef = [], []        # local elementwise factors
        right_const = np.zeros((n, n), dtype=complex)   # Y += rho @ right_const
        right_field = []               # (real coefficient field (G,), matrix)
        sandwiches = []                # (weight, J): dense J rho J^dag
        self._H_field = None

        # Hamiltonian
        if H_field:
            Hw = Ud @ np.asarray(H).reshape((G, n, n)) @ U
            Hi = 1j * Hw
            self._H_field = (np.ascontiguousarray(Hi.real), np.ascontiguousarray(Hi.imag))
        else:
            Hw = rot(H)
            h = np.diag(Hw)
            e_rows.append(-1j * (h[:, None] - np.conj(h)[None, :]))
            e_coef.append(np.ones(G))
            right_const += 1j * (Hw - np.diag(h))
        for f, op in c.hamiltonian_terms:
            fz = np.broadcast_to(np.asarray(f, float), gs).ravel()
            Ow = rot(op)
            o = np.diag(Ow)
            e_rows.append(-1j * (o[:, None] - np.conj(o)[None, :]))
            e_coef.append(fz.copy())
            if not is_diag(Ow):
                right_field.append((fz.copy(), 1j * (Ow - np.diag(o))))

        # Lindblad part
        if p and np.any(D0):
            if D0_field:
                D0f = np.asarray(D0).reshape(G, p, p)
                for a in range(p):
                    for b in range(p):
                        w = D0f[:, a, b]
                        if not np.any(w):
                            continue
                        La, Lb = Lw[a], Lw[b]
                        if not (is_diag(La) and is_diag(Lb)):
                            raise CouplingError("field-valued D0 with non-commuting Lindblad operators is not "
                                                "supported by the compiled generator; use apply_continuous_generator")
                        la, lb = np.diag(La), np.diag(Lb)
                        kk = np.conj(lb) * la
                        phi = la[:, None] * np.conj(lb)[None, :] - 0.5 * (kk[:, None] + kk[None, :])
                        # complex weights split into real coefficient fields
                        e_rows += [phi, 1j * phi]
                        e_coef += [w.real.copy(), w.imag.copy()]
            else:
                vals, vecs = np.linalg.eigh(qa.symmetrize(D0))
                K = np.zeros((n, n), dtype=complex)
                phi = np.zeros((n, n), dtype=complex)
                for lam, u in zip(vals, vecs.T):
                    if abs(lam) <= 1e-15 * max(1.0, abs(vals).max()):
                        continue
                    J = np.tensordot(u, Lw, axes=(0, 0))
                    if is_diag(J):
                        J = np.diag(np.diag(J))
                    K += lam * (qa.dag(J) @ J)
                    if is_diag(J):
                        j = np.diag(J)
                        phi += lam * j[:, None] * np.conj(j)[None, :]
                    else:
                        sandwiches.append((lam, J))
                kk = np.diag(K).real
                phi -= 0.5 * (kk[:, None] + kk[None, :])
                e_rows.append(phi)
                e_coef.append(np.ones(G))
                right_const += -0.5 * (K - np.diag(np.diag(K)))

        # fluxes: drift, friction and back-reaction
        v = _field(c.drift00, (d,), gs, "drift00", float).reshape(G, d).copy()
        for k in c.friction_axes:
            v[:, k] -= c.friction * np.broadcast_to(grid.coord_field(k), gs).ravel()
        self._vel = np.ascontiguousarray(v.T)
        self._hasv = np.array([bool(np.any(v[:, i])) for i in range(d)])
        f_rows = [[] for _ in range(d)]
        f_coef = [[] for _ in range(d)]
        D1f = np.broadcast_to(D1, gs + (d, p)).reshape(G, d, p)
        dense_flux = [[] for _ in range(d)]   # (complex coefficient field, matrix): rho @ matrix
        for i in range(d):
            for a in range(p):
                w = D1f[:, i, a]
                if not np.any(w):
                    continue
                La = Lw[a]
                l = np.diag(La)
                # D1 rho L^dag + conj(D1) L rho; the diagonal part of L acts elementwise
                if np.any(w.real):
                    f_rows[i].append(np.conj(l)[None, :] + l[:, None])
                    f_coef[i].append(w.real.copy())
                if np.any(w.imag):
                    f_rows[i].append(1j * (np.conj(l)[None, :] - l[:, None]))
                    f_coef[i].append(w.imag.copy())
                if not is_diag(La):
                    dense_flux[i].append((w.copy(), qa.dag(La - np.diag(l))))

        # diffusion
        D2 = _field(c.D2, (d, d), gs, "D2", float).reshape(G, d, d)
        self._hasdiff = np.array([bool(np.any(D2[:, i, i])) for i in range(d)])
        self._dcoef = np.ascontiguousarray(D2[:, np.arange(d), np.arange(d)].T)
        pairs = [(i, j) for i in range(d) for j in range(i + 1, d) if np.any(D2[:, i, j])]
        self._mpairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        self._mcoef = np.ascontiguousarray(np.array([D2[:, i, j] for i, j in pairs]).reshape(len(pairs), G))

        # pack; constant local rows collapse into one
        const = [r for r, cf in zip(e_rows, e_coef) if np.all(cf == 1.0)]
        varying = [(r, cf) for r, cf in zip(e_rows, e_coef) if not np.all(cf == 1.0) and np.any(cf)]
        e_rows = ([sum(const)] if const else []) + [r for r, _ in varying]
        e_coef = ([np.ones(G)] if const else []) + [cf for _, cf in varying]
        self._ecoef = np.ascontiguousarray(np.array(e_coef, dtype=float).reshape(len(e_coef), G))
        self._epsi = _planes(np.array(e_rows, dtype=complex).reshape(len(e_rows), n, n))
        rmax = max([len(r) for r in f_rows] + [1])
        self._nf = np.array([len(r) for r in f_rows], dtype=np.int64)
        fcoef = np.zeros((d, rmax, G))
        fphi = np.zeros((d, rmax, n, n), dtype=complex)
        for i in range(d):
            for r, (cf, ph) in enumerate(zip(f_coef[i], f_rows[i])):
                fcoef[i, r] = cf
                fphi[i, r] = ph
        self._fcoef, self._fphi = fcoef, _planes(fphi)
        self._ekind = _plane_kinds(self._epsi)
        self._fkind = _plane_kinds(self._fphi)
        nmax = max(gs)
        self._fidx = np.zeros((d, nmax, 3), dtype=np.int64)
        self._fw = np.zeros((d, nmax, 3))
        self._sidx = np.zeros((d, nmax, 4), dtype=np.int64)
        self._sw = np.zeros((d, nmax, 4))
        for i in range(d):
            idx, w = grid.first_stencil(i)
            self._fidx[i, :gs[i]], self._fw[i, :gs[i]] = idx, w
            idx, w = grid.second_stencil(i)
            self._sidx[i, :gs[i]], self._sw[i, :gs[i]] = idx, w
        self._shape = np.array(gs, dtype=np.int64)
        self._strides = np.array([int(np.prod(gs[i + 1:])) for i in range(d)], dtype=np.int64)

        # dense products ride on one stacked right multiplication
        mats = []
        self._right_const = None
        if np.any(right_const):
            self._right_const = len(mats)
            mats.append(right_const)
        self._right_field = []
        for cf, M in right_field:
            self._right_field.append((cf[:, None, None], len(mats)))
            mats.append(M)
        self._sandwiches = []
        for lam, J in sandwiches:
            Jd = qa.dag(J)
            self._sandwiches.append((lam, len(mats), np.ascontiguousarray(Jd.real), np.ascontiguousarray(Jd.imag)))
            mats.append(Jd)
        self._dense_flux_idx = [[] for _ in range(d)]
        for i in range(d):
            for cf, M in dense_flux[i]:
                self._dense_flux_idx[i].append((cf.real[:, None, None].copy(), cf.imag[:, None, None].copy(),
                                                len(mats)))
                mats.append(M)
        self._product = _PlaneProduct(mats, G * n)
        # with only the constant product, Y is the product buffer itself
        self._y_is_product = (self._right_const is not None and self._product.k == 1
                              and self._H_field is None)
        self._hasy = bool(mats) or self._H_field is not None
        self._hasb = np.array([bool(self._dense_flux_idx[i]) for i in range(d)])
        self._y = np.zeros((2, G, n, n)) if self._hasy else np.zeros((2, 1, 1, 1))
        self._b = np.zeros((d, 2, G, n, n)) if self._hasb.any() else np.zeros((d, 2, 1, 1, 1))
        self._dummy = np.zeros((2, 1, n, n))

    # --- basis change ---------------------------------------------------
    def to_working(self, rho: np.ndarray) -> np.ndarray:
        """Complex field in the original basis -> working planes ``(2, G, n, n)``."""
        rho = np.asarray(rho, dtype=complex).reshape((self.grid.size, self.n_q, self.n_q))
        if not self._identity_basis:
            rho = qa.dag(self.U) @ rho @ self.U
        return np.ascontiguousarray(np.stack([rho.real, rho.imag]))

    def from_working(self, x: np.ndarray) -> np.ndarray:
        x = x.reshape(self.working_shape)
        rho = x[0] + 1j * x[1]
        if not self._identity_basis:
            rho = self.U @ rho @ qa.dag(self.U)
        return rho.reshape(self.shape + (self.n_q, self.n_q))

    def operator_to_working(self, A: np.ndarray) -> np.ndarray:
        return qa.dag(self.U) @ A @ self.U

    def operator_from_working(self, A: np.ndarray) -> np.ndarray:
        return self.U @ A @ qa.dag(self.U)

    # --- evaluation -----------------------------------------------------
    def _dense(self, x: np.ndarray):
        """Dense products ``Y`` (planes) and dense fluxes for working input ``x``."""
        G, n = self.grid.size, self.n_q
        y = self._y
        yr, yi = y[0], y[1]
        if not self._hasy:
            return yr, yi
        if self._y_is_product:
            pr, pi = self._product(x[0].reshape(G * n, n), x[1].reshape(G * n, n))
            return pr.reshape(G, n, n), pi.reshape(G, n, n)
        y[...] = 0.0
        if self._product.k:
            pr, pi = self._product(x[0].reshape(G * n, n), x[1].reshape(G * n, n))
            k = self._product.k
            pr = pr.reshape(G, n, k, n)
            pi = pi.reshape(G, n, k, n)
            if self._right_const is not None:
                yr[...] = pr[:, :, self._right_const]
                yi[...] = pi[:, :, self._right_const]
            for cf, j in self._right_field:
                yr += cf * pr[:, :, j]
                yi += cf * pi[:, :, j]
            for lam, j, Jr, Ji in self._sandwiches:
                # W = rho J^dag; J rho J^dag = W^dag J^dag
                wr = np.swapaxes(pr[:, :, j], -1, -2)
                wi = -np.swapaxes(pi[:, :, j], -1, -2)
                sr, si = _cmatmul(wr, wi, Jr, Ji)
                yr += 0.5 * lam * sr
                yi += 0.5 * lam * si
            for i in range(self.grid.ndim):
                if not self._hasb[i]:
                    continue
                Sr = np.zeros((G, n, n))
                Si = np.zeros((G, n, n))
                for cr, ci, j in self._dense_flux_idx[i]:
                    Sr += cr * pr[:, :, j] - ci * pi[:, :, j]
                    Si += cr * pi[:, :, j] + ci * pr[:, :, j]
                self._b[i, 0] = Sr + np.swapaxes(Sr, -1, -2)
                self._b[i, 1] = Si - np.swapaxes(Si, -1, -2)
        if self._H_field is not None:
            hr, hi = _cmatmul(x[0], x[1], *self._H_field)
            yr += hr
            yi += hi
        return yr, yi

    def _kernel(self, x, out, yr, yi, stage=False, base=None, acc=None, acc_c=0.0, acc_init=False,
                nxt=None, nxt_c=0.0):
        dummy = self._dummy
        return cq_rhs(x, out, self._ecoef, self._epsi, self._ekind, self._vel, self._hasv, self._nf, self._fcoef,
                      self._fphi, self._fkind,
                      self._fidx, self._fw, self._b, self._hasb, self._hasdiff, self._dcoef, self._sidx, self._sw,
                      self.grid.periodic, self._mpairs, self._mcoef, yr, yi, self._hasy, self._shape,
                      self._strides, stage, dummy if base is None else base, dummy if acc is None else acc,
                      acc_c, acc_init, dummy if nxt is None else nxt, nxt_c, nxt is not None)

    def apply_working(self, x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """Right-hand side in the working representation."""
        if out is None:
            out = np.empty(self.working_shape)
        yr, yi = self._dense(x)
        self._kernel(x, out, yr, yi)
        return out

    def rk_stage(self, x, base, acc, acc_c, acc_init, nxt=None, nxt_c=0.0) -> float:
        """Evaluate at ``x`` and apply an RK stage update in place.

        ``acc = (base if acc_init else acc) + acc_c f(x)`` and, when given,
        ``nxt = base + nxt_c f(x)``. Returns ``sum |acc|``.
        """
        yr, yi = self._dense(x)
        return self._kernel(x, self._dummy, yr, yi, True, base, acc, acc_c, acc_init, nxt, nxt_c)

    def __call__(self, s) -> np.ndarray:
        _, rho = _rho_of(s)
        return self.from_working(self.apply_working(self.to_working(rho)))
