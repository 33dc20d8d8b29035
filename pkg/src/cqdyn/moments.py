"""Kramers-Moyal coefficients estimated from short-time evolution.

A narrow Gaussian at ``zbar`` times a probe state ``sigma`` is evolved for
``dt``, ``2 dt`` and ``4 dt``. Rates of the joint cumulants of the classical
marginal give ``n! D_n^{mu nu} Tr(L_nu^dag L_mu sigma)``, and a least-squares
fit over probes separates the ``(mu, nu)`` blocks. Cumulants are used
because, for coefficients that do not vary across the initial width, their
rates are independent of the width at every order (raw moments are not).
The zeroth CQ moment ``D_0^{alpha beta}`` does not move the classical
marginal, so it is fitted from the rate of the quantum marginal with the
effective Hamiltonian treated as a nuisance parameter.

Rates are Richardson-extrapolated from ``dt`` and ``2 dt``; the ``4 dt``
run gives the error estimate reported as ``stderr``.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import quantum_algebra as qa
from .hybrid_state import HybridState, gaussian_profile
from .phase_space import PhaseGrid
from .validity import MomentTable

COND_LIMIT = 1e6
BIAS_LIMIT = 0.1


class MomentWarning(UserWarning):
    """The step looks too large for a first-order rate estimate."""


class ProbeConditionError(ValueError):
    """The probe set cannot resolve the requested coefficients."""


# --- probes -----------------------------------------------------------------

def probe_states(n: int, k: int | None = None) -> np.ndarray:
    """Informationally complete pure states on the lowest ``k`` levels.

    The family ``|j>`` and ``(|j> + i^s |l>)/sqrt 2`` for ``j < l < k``,
    ``s = 0..3``, has ``2k^2 - k`` members; ``k = n`` gives a complete family
    for the full space.
    """
    k = n if k is None else int(k)
    if not 1 <= k <= n:
        raise ValueError(f"probe subspace size must be in [1, {n}], got {k}")
    out = [qa.projector(qa.ket(n, j)) for j in range(k)]
    for j in range(k):
        for l in range(j + 1, k):
            for s in range(4):
                psi = (qa.ket(n, j) + (1j**s) * qa.ket(n, l)) / math.sqrt(2)
                out.append(qa.projector(psi))
    return np.array(out)


# --- cumulants --------------------------------------------------------------

def _partitions(items: tuple):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _partitions(rest):
        yield [(first,)] + part
        for i in range(len(part)):
            yield part[:i] + [(first,) + part[i]] + part[i + 1:]


def joint_cumulant(moment: Callable[[tuple], float], idx: tuple) -> float:
    """Joint cumulant from raw moments, ``moment(block)`` for index tuples."""
    total = 0.0
    for part in _partitions(tuple(range(len(idx)))):
        k = len(part)
        term = (-1) ** (k - 1) * math.factorial(k - 1)
        for block in part:
            term *= moment(tuple(idx[i] for i in block))
        total += term
    return total


def _displacements(grid: PhaseGrid, zbar: Sequence[float]) -> list[np.ndarray]:
    out = []
    for i in range(grid.ndim):
        x = grid.coord_field(i) - zbar[i]
        if grid.periodic:
            L = grid.axes[i].max - grid.axes[i].min
            x = (x + 0.5 * L) % L - 0.5 * L
        out.append(x)
    return out


def _index_sets(d: int, max_order: int) -> list[tuple]:
    return [idx for n in range(1, max_order + 1)
            for idx in itertools.combinations_with_replacement(range(d), n)]


def _cumulants(s: HybridState, disp: list[np.ndarray], sets: list[tuple]) -> np.ndarray:
    mass = np.real(np.trace(s.rho, axis1=-2, axis2=-1)) * s.cell_weights()
    total = float(mass.sum())
    cache: dict[tuple, float] = {}

    def moment(block: tuple) -> float:
        key = tuple(sorted(block))
        if key not in cache:
            f = mass
            for i in key:
                f = f * disp[i]
            cache[key] = float(f.sum()) / total
        return cache[key]

    return np.array([joint_cumulant(moment, idx) for idx in sets])


# --- design -----------------------------------------------------------------

@dataclass
class _Design:
    """Real parameterization of Hermitian ``D^{mu nu}`` blocks."""

    labels: list          # (mu, nu, part) with part in {"re", "im"}
    ops: np.ndarray       # Hermitian operator paired with each label
    dropped: list = field(default_factory=list)


def _design(basis: np.ndarray, tol: float = 1e-12) -> _Design:
    P = basis.shape[0]
    labels, ops, dropped = [], [], []
    for mu in range(P):
        for nu in range(mu, P):
            LdL = qa.dag(basis[nu]) @ basis[mu]           # L_nu^dag L_mu
            if mu == nu:
                cand = [("re", LdL)]
            else:
                cand = [("re", LdL + qa.dag(LdL)), ("im", 1j * LdL - 1j * qa.dag(LdL))]
            for part, op in cand:
                if np.max(np.abs(op)) <= tol:
                    dropped.append((mu, nu, part))   # invisible to the classical marginal
                else:
                    labels.append((mu, nu, part))
                    ops.append(op)
    return _Design(labels, np.array(ops), dropped)


def _lstsq(A: np.ndarray, Y: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    """Solve ``A X = Y`` column-wise; returns ``(X, stderr_ls)``."""
    if A.shape[1] == 0:
        return np.zeros((0,) + Y.shape[1:]), np.zeros((0,) + Y.shape[1:])
    sv = np.linalg.svd(A, compute_uv=False)
    cond = sv[0] / sv[-1] if sv[-1] > 0 else math.inf
    if cond > COND_LIMIT:
        raise ProbeConditionError(f"probe set is ill-conditioned for {what} (condition number {cond:.3e})")
    X, *_ = np.linalg.lstsq(A, Y, rcond=None)
    K, P = A.shape
    if K > P:
        rss = np.sum((A @ X - Y) ** 2, axis=0)
        cov = np.linalg.inv(A.T @ A)
        se = np.sqrt(np.outer(np.diag(cov), rss / (K - P))).reshape(X.shape)
    else:
        se = np.zeros_like(X)
    return X, se


# --- estimation -------------------------------------------------------------

def _initial(grid, zbar, width, sigma):
    p = gaussian_profile(grid, zbar, width)
    return HybridState(grid, p[..., None, None] * np.asarray(sigma, complex))


def _run(evolver, s0: HybridState, dt: float) -> list[HybridState]:
    s1 = evolver(s0, dt)
    s2 = evolver(s1, dt)
    s4 = evolver(evolver(s2, dt), dt)
    return [s1, s2, s4]


def _extrapolate(r1, r2, r4, richardson: bool):
    """Estimate and error from rates at dt, 2 dt, 4 dt."""
    if richardson:
        a = 2 * r1 - r2
        b = 2 * r2 - r4
        return a, np.abs(a - b) / 3.0, np.abs(r1 - a)
    return r1, np.abs(r1 - r2), np.zeros_like(r1)


def _warn_bias(est, bias, err, names):
    floor = 1e-8 * float(np.max(np.abs(est), initial=0.0))
    big = np.abs(est) > np.maximum(3 * err, floor)
    bad = big & (bias > BIAS_LIMIT * np.abs(est))
    if np.any(bad):
        j = int(np.flatnonzero(bad.ravel())[0])
        warnings.warn(f"first-order correction exceeds {BIAS_LIMIT:.0%} for {names[j]}; reduce dt",
                      MomentWarning, stacklevel=3)


def estimate_classical_moments(evolver: Callable, grid: PhaseGrid, zbar: Sequence[float], dt: float,
                               max_order: int = 4, width=None, sigma: np.ndarray | None = None,
                               richardson: bool = True, n_q: int = 1,
                               width_extrapolation: bool = False) -> MomentTable:
    """``D_n^{00}`` at ``zbar`` for ``n = 1..max_order``.

    Parameters
    ----------
    evolver : ``evolver(state, duration) -> state``
    grid : grid of the states the evolver accepts
    width : initial Gaussian width (default two grid spacings)
    sigma : quantum part of the initial state (default ``|0><0|`` on ``n_q`` levels)
    width_extrapolation : repeat at ``sqrt 2`` times the width and extrapolate
        to zero width; removes the ``O(width^2)`` bias of coefficients that
        vary in space (a linear drift biases ``D_2`` by ``-grad v width^2``).
    """
    zbar = tuple(float(x) for x in zbar)
    width = 2 * np.array(grid.spacing) if width is None else np.asarray(width, dtype=float)
    if width_extrapolation:
        kw = dict(max_order=max_order, sigma=sigma, richardson=richardson, n_q=n_q)
        return _zero_width(estimate_classical_moments(evolver, grid, zbar, dt, width=width, **kw),
                           estimate_classical_moments(evolver, grid, zbar, dt, width=math.sqrt(2) * width, **kw))
    sigma = qa.projector(qa.ket(n_q, 0)) if sigma is None else np.asarray(sigma, complex)
    s0 = _initial(grid, zbar, width, sigma)
    sets = _index_sets(grid.ndim, max_order)
    disp = _displacements(grid, zbar)
    k0 = _cumulants(s0, disp, sets)
    rates = [(_cumulants(s, disp, sets) - k0) / (dt * f) for s, f in zip(_run(evolver, s0, dt), (1, 2, 4))]
    est, err, bias = _extrapolate(*rates, richardson)
    fact = np.array([math.factorial(len(idx)) for idx in sets])
    est, err, bias = est / fact, err / fact, bias / fact
    _warn_bias(est, bias, err, [f"D_{len(i)}{i}" for i in sets])
    t = MomentTable(grid.ndim, 1, max_order, zbar)
    for idx, v, e in zip(sets, est, err):
        t.set(len(idx), idx, 0, 0, v, e)
    return t


@dataclass
class CQMomentResult:
    """Estimated table plus fit diagnostics."""

    table: MomentTable
    residual: float
    condition: float
    unidentified: list


def estimate_cq_moments(evolver: Callable, grid: PhaseGrid, zbar: Sequence[float], dt: float,
                        lindblads: np.ndarray, probes: np.ndarray | None = None, max_order: int = 2,
                        width=None, richardson: bool = True, probe_levels: int | None = None,
                        width_extrapolation: bool = False) -> CQMomentResult:
    """``D_n^{mu nu}`` in the basis ``I, L_1, ..., L_p`` at ``zbar``.

    Orders ``n >= 1`` come from the classical marginal of each probe run.
    ``D_0^{alpha beta}`` comes from the quantum marginal: its rate is
    ``-i[H, sigma] + D_0^{alpha beta}(L_alpha sigma L_beta^dag - 1/2 {L_beta^dag L_alpha, sigma})``
    with ``H`` fitted jointly and discarded.

    Parameters
    ----------
    probes : (K, n, n) probe states; defaults to :func:`probe_states` on the
        lowest ``probe_levels`` levels (default ``min(n, 4)``).
    width_extrapolation : as in :func:`estimate_classical_moments`.

    Raises
    ------
    ProbeConditionError
        If the probe set cannot separate the coefficients (condition number
        above ``1e6``).
    """
    L = np.asarray(lindblads, dtype=complex)
    if L.ndim == 2:
        L = L[None]
    n = L.shape[-1]
    p = L.shape[0]
    basis = np.concatenate([np.eye(n, dtype=complex)[None], L])
    if probes is None:
        probes = probe_states(n, probe_levels or min(n, 4))
    probes = np.asarray(probes, dtype=complex)
    zbar = tuple(float(x) for x in zbar)
    width = 2 * np.array(grid.spacing) if width is None else np.asarray(width, dtype=float)
    if width_extrapolation:
        kw = dict(probes=probes, max_order=max_order, richardson=richardson)
        r1 = estimate_cq_moments(evolver, grid, zbar, dt, L, width=width, **kw)
        r2 = estimate_cq_moments(evolver, grid, zbar, dt, L, width=math.sqrt(2) * width, **kw)
        return CQMomentResult(_zero_width(r1.table, r2.table), r1.residual, r1.condition, r1.unidentified)
    sets = _index_sets(grid.ndim, max_order)
    disp = _displacements(grid, zbar)

    K = probes.shape[0]
    crate = np.empty((3, K, len(sets)))
    qrate = np.empty((3, K, 2 * n * n))
    for k, sig in enumerate(probes):
        s0 = _initial(grid, zbar, width, sig)
        k0 = _cumulants(s0, disp, sets)
        q0 = s0.quantum_marginal()
        for j, (s, f) in enumerate(zip(_run(evolver, s0, dt), (1, 2, 4))):
            crate[j, k] = (_cumulants(s, disp, sets) - k0) / (dt * f)
            qrate[j, k] = _vec_real((s.quantum_marginal() - q0) / (dt * f))
    # classical-marginal design
    des = _design(basis)
    A = np.real(np.einsum("kab,pba->kp", probes, des.ops))
    fact = np.array([math.factorial(len(idx)) for idx in sets])
    Xs, SEs = [], []
    for j in range(3):
        X, se = _lstsq(A, crate[j] / fact, "classical moments")
        Xs.append(X)
        SEs.append(se)
    est, err, bias = _extrapolate(*Xs, richardson)
    err = np.sqrt(err**2 + SEs[0] ** 2)
    names = [f"D_{len(i)}{i}{lab[:2]}" for lab in des.labels for i in sets]
    _warn_bias(est, bias, err, names)
    sv = np.linalg.svd(A, compute_uv=False) if A.size else np.array([1.0])
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else math.inf

    table = MomentTable(grid.ndim, p + 1, max_order, zbar)
    for c, idx in enumerate(sets):
        vals: dict[tuple[int, int], complex] = {}
        errs: dict[tuple[int, int], float] = {}
        for r, (mu, nu, part) in enumerate(des.labels):
            v = est[r, c]
            vals[(mu, nu)] = vals.get((mu, nu), 0j) + (v if part == "re" else 1j * v)
            errs[(mu, nu)] = math.hypot(errs.get((mu, nu), 0.0), err[r, c])
        for (mu, nu, _part) in des.dropped:
            vals.setdefault((mu, nu), 0j)
            errs.setdefault((mu, nu), 0.0)
        for (mu, nu), v in vals.items():
            table.set(len(idx), idx, mu, nu, v, errs[(mu, nu)])

    # zeroth moment from the quantum marginal
    resid = 0.0
    unidentified = [(lab, "classical") for lab in des.dropped]
    if p:
        D0, D0err, resid = _fit_d0(probes, qrate, L, richardson)
        for a in range(p):
            for b in range(p):
                table.set(0, (), a + 1, b + 1, D0[a, b], D0err[a, b], hermitian=False)
    return CQMomentResult(table, resid, cond, unidentified)


def _zero_width(t1: MomentTable, t2: MomentTable) -> MomentTable:
    """Extrapolate tables at widths ``w`` and ``sqrt 2 w`` to zero width."""
    out = MomentTable(t1.dim, t1.n_ops, t1.max_order, t1.base_point)
    for k in sorted(set(t1.entries) | set(t2.entries)):
        out.entries[k] = 2 * t1.entries.get(k, 0j) - t2.entries.get(k, 0j)
        out.stderr[k] = math.hypot(2 * t1.stderr.get(k, 0.0), t2.stderr.get(k, 0.0))
    return out


def _vec_real(M: np.ndarray) -> np.ndarray:
    v = qa.vectorize(M)
    return np.concatenate([v.real, v.imag])


def _hermitian_basis(n: int) -> list[np.ndarray]:
    out = []
    for a in range(n):
        for b in range(a, n):
            E = np.zeros((n, n), complex)
            if a == b:
                E[a, a] = 1
                out.append(E)
            else:
                E[a, b] = E[b, a] = 1
                out.append(E.copy())
                E[a, b], E[b, a] = -1j, 1j
                out.append(E)
    return out


def _fit_d0(probes, qrate, L, richardson):
    """Least-squares ``D_0`` with the Hamiltonian directions projected out."""
    p = L.shape[0]
    terms, labels = [], []
    for a in range(p):
        for b in range(a, p):
            parts = [("re", 1.0)] if a == b else [("re", 1.0), ("im", 1j)]
            for part, c in parts:
                terms.append((c, a, b))
                labels.append((a, b, part))

    def dterm(c, a, b, s):
        out = c * qa.dissipator_pair(L[a], L[b], s)
        if a != b:
            out = out + np.conj(c) * qa.dissipator_pair(L[b], L[a], s)
        return out

    herm = _hermitian_basis(L.shape[-1])
    AH = np.concatenate([np.array([_vec_real(-1j * (H @ s - s @ H)) for H in herm]).T for s in probes])
    AD = np.concatenate([np.array([_vec_real(dterm(c, a, b, s)) for (c, a, b) in terms]).T for s in probes])
    U, sv, _ = np.linalg.svd(AH, full_matrices=False)
    U = U[:, sv > 1e-10 * sv[0]]
    ADp = AD - U @ (U.T @ AD)
    sols, ses, res = [], [], 0.0
    for j in range(3):
        Y = qrate[j].reshape(-1)
        Yp = Y - U @ (U.T @ Y)
        X, se = _lstsq(ADp, Yp[:, None], "the zeroth moment")
        sols.append(X[:, 0])
        ses.append(se[:, 0])
        if j == 0:
            res = float(np.linalg.norm(ADp @ X[:, 0] - Yp))
    est, err, _ = _extrapolate(*sols, richardson)
    err = np.sqrt(err**2 + ses[0] ** 2)
    D0 = np.zeros((p, p), complex)
    E0 = np.zeros((p, p))
    for (a, b, part), v, e in zip(labels, est, err):
        D0[a, b] += v if part == "re" else 1j * v
        E0[a, b] = math.hypot(E0[a, b], e)
    iu = np.triu_indices(p, 1)
    D0[iu[1], iu[0]] = np.conj(D0[iu])
    E0[iu[1], iu[0]] = E0[iu]
    return D0, E0, res
