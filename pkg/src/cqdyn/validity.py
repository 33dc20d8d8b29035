"""Complete-positivity certificates for CQ couplings, moment tables and maps.

The continuous class is completely positive exactly when the block matrix

.. math::

    \\begin{pmatrix} 2 D_2 & D_1 \\\\ D_1^\\dagger & D_0 \\end{pmatrix} \\succeq 0

at every point, equivalently when ``2 D2 - D1 D0^+ D1^dag`` is PSD together
with the range condition ``D1 (I - D0 D0^+) = 0``. Both routes are
implemented independently so that they can be checked against each other.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import quantum_algebra as qa
from .generator_continuous import CouplingSet

TOL = 1e-9
PINV_RCOND = 1e-12
BOUNDARY_BAND = 10.0

VALID, INVALID, BOUNDARY = "valid", "invalid", "boundary"


# --- trade-off and block certificates ---------------------------------------

@dataclass
class ValidityCertificate:
    """Margins and residuals of the positivity conditions, minimized over the grid.

    ``accepted`` is the plain iff condition (all margins ``>= -tol`` and the
    range residual ``<= tol``); ``verdict`` refines it with a ``boundary``
    label when a non-trivial coupling sits within ``10 tol`` of the
    trade-off boundary.
    """

    schur_margin: float
    range_residual: float
    block_margin: float
    d0_margin: float
    d2_margin: float
    verdict: str
    accepted: bool
    d0_rank_deficient: bool
    tol: float = TOL
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = []
        for k, v in self.as_dict().items():
            if k == "details":
                for dk, dv in v.items():
                    lines.append(f"details.{dk}={_fmt(dv)}")
            else:
                lines.append(f"{k}={_fmt(v)}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.as_dict()), indent=2, sort_keys=True) + "\n"

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        txt, js = stem.with_suffix(".txt"), stem.with_suffix(".json")
        txt.write_text(self.to_text(), encoding="utf-8", newline="\n")
        js.write_text(self.to_json(), encoding="utf-8", newline="\n")
        return txt, js


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _point_blocks(c: CouplingSet) -> tuple[np.ndarray, np.ndarray, np.ndarray, tuple[int, ...]]:
    """D0, D1, D2 broadcast to a common ``(M, ...)`` stack plus the grid shape."""
    shape = c.field_shape() or ()
    d, p = c.dim, c.n_lindblads
    M = int(np.prod(shape)) if shape else 1
    D0 = np.broadcast_to(c.D0, shape + (p, p)).reshape(M, p, p)
    D1 = np.broadcast_to(c.D1, shape + (d, p)).reshape(M, d, p)
    D2 = np.broadcast_to(c.D2, shape + (d, d)).reshape(M, d, d).astype(complex)
    return (np.broadcast_to(D0, (M, p, p)), np.broadcast_to(D1, (M, d, p)),
            np.broadcast_to(D2, (M, d, d)), shape)


def _min_eigs(A: np.ndarray) -> np.ndarray:
    if A.shape[-1] == 0:
        return np.full(A.shape[0], np.inf)
    return np.linalg.eigvalsh(qa.symmetrize(A))[:, 0]


def _where(idx: int, shape: tuple[int, ...]):
    return list(np.unravel_index(idx, shape)) if shape else []


def block_matrix(c: CouplingSet) -> np.ndarray:
    """``[[2 D2, D1], [D1^dag, D0]]`` per point, shape ``(M, d+p, d+p)``."""
    D0, D1, D2, _ = _point_blocks(c)
    top = np.concatenate([2 * D2, D1], axis=-1)
    bottom = np.concatenate([qa.dag(D1), D0], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def check_block(c: CouplingSet) -> float:
    """Smallest eigenvalue of the block matrix over the grid."""
    B = block_matrix(c)
    return float(np.min(_min_eigs(B))) if B.shape[-1] else 0.0


def check_tradeoff(c: CouplingSet, tol: float = TOL, rcond: float = PINV_RCOND) -> ValidityCertificate:
    """Schur-complement trade-off and range condition with a Moore-Penrose inverse.

    Singular values of ``D0`` below ``rcond * sigma_max`` count as zero.
    Classical axes with no diffusion and no back-reaction are left out of
    the Schur and ``D2`` margins, where they would only contribute exact
    zeros. The block margin is filled in as well, for reporting.
    """
    D0, D1, D2, shape = _point_blocks(c)
    M, d, p = D1.shape
    # axes with neither diffusion nor back-reaction only add exact zeros
    act = np.flatnonzero(np.any(D1 != 0, axis=(0, 2)) | np.any(D2 != 0, axis=(0, 2)))
    D1, D2 = D1[:, act], D2[:, act][:, :, act]
    d = act.size
    if p:
        D0p = np.linalg.pinv(D0, rcond=rcond, hermitian=True)
        sv = np.linalg.svd(D0, compute_uv=False)
        deficient = bool(np.any(sv < rcond * np.maximum(sv[:, :1], np.finfo(float).tiny)))
        proj = np.eye(p) - D0 @ D0p
        resid = np.linalg.norm(D1 @ proj, axis=(-2, -1))
        S = 2 * D2 - D1 @ D0p @ qa.dag(D1)
    else:
        deficient = False
        resid = np.zeros(M)
        S = 2 * D2
    schur = _min_eigs(S)
    d0m = _min_eigs(D0) if p else np.full(M, np.inf)
    d2m = _min_eigs(D2)
    if not d:
        schur = d2m = np.zeros(M)
    blk = _min_eigs(block_matrix(c))
    values = {"schur_margin": schur, "range_residual": resid, "d0_margin": d0m, "d2_margin": d2m,
              "block_margin": blk}
    details = {}
    for k, v in values.items():
        worst = int(np.argmax(v)) if k == "range_residual" else int(np.argmin(v))
        details[f"{k}_at"] = _where(worst, shape)
    sm = float(np.min(schur))
    rr = float(np.max(resid))
    d0 = float(np.min(d0m)) if p else 0.0
    d2 = float(np.min(d2m)) if d else 0.0
    accepted = sm >= -tol and rr <= tol and d0 >= -tol and d2 >= -tol
    nontrivial = float(np.max(np.abs(D1), initial=0.0)) > tol
    near = abs(sm) <= BOUNDARY_BAND * tol and rr <= tol and d0 >= -tol and d2 >= -tol
    verdict = BOUNDARY if near and nontrivial else (VALID if accepted else INVALID)
    if deficient:
        details["pinv_cutoff"] = rcond
    return ValidityCertificate(sm, rr, float(np.min(blk)) if blk.size else 0.0, d0, d2, verdict,
                               bool(accepted), deficient, tol, details)


# --- moment tables ----------------------------------------------------------

@dataclass
class MomentTable:
    """Kramers-Moyal coefficients ``D_n^{mu nu}`` with symmetric multi-indices.

    Keys are ``(n, indices, mu, nu)`` with ``indices`` a sorted tuple of
    axis numbers of length ``n`` and ``mu, nu`` indices into the operator
    basis ``I, L_1, ..., L_p``. Entries up to ``max_order`` that are absent
    are zero.
    """

    dim: int
    n_ops: int
    max_order: int
    base_point: tuple = ()
    entries: dict = field(default_factory=dict)
    stderr: dict = field(default_factory=dict)

    @staticmethod
    def key(n: int, indices: Iterable[int], mu: int, nu: int) -> tuple:
        idx = tuple(sorted(int(i) for i in indices))
        if len(idx) != n:
            raise ValueError(f"order {n} needs {n} indices, got {idx}")
        return (int(n), idx, int(mu), int(nu))

    def set(self, n, indices, mu, nu, value, stderr: float | None = None, hermitian: bool = True) -> None:
        if n > self.max_order:
            raise ValueError(f"order {n} exceeds max_order {self.max_order}")
        k = self.key(n, indices, mu, nu)
        self.entries[k] = complex(value)
        if stderr is not None:
            self.stderr[k] = float(stderr)
        if hermitian:
            kt = self.key(n, indices, nu, mu)
            self.entries[kt] = complex(value).conjugate()
            if stderr is not None:
                self.stderr[kt] = float(stderr)

    def get(self, n, indices, mu, nu) -> complex:
        if n > self.max_order:
            raise KeyError(f"order {n} is beyond the table (max_order {self.max_order})")
        return self.entries.get(self.key(n, indices, mu, nu), 0j)

    def error(self, n, indices, mu, nu) -> float:
        return self.stderr.get(self.key(n, indices, mu, nu), 0.0)

    def hermiticity_error(self) -> float:
        err = 0.0
        for (n, idx, mu, nu), v in self.entries.items():
            err = max(err, abs(v - self.entries.get((n, idx, nu, mu), 0j).conjugate()))
        return err

    def symmetrize(self) -> "MomentTable":
        out = MomentTable(self.dim, self.n_ops, self.max_order, self.base_point)
        keys = set(self.entries) | {(n, i, b, a) for (n, i, a, b) in self.entries}
        for (n, idx, mu, nu) in sorted(keys):
            v = 0.5 * (self.entries.get((n, idx, mu, nu), 0j) + np.conj(self.entries.get((n, idx, nu, mu), 0j)))
            out.entries[(n, idx, mu, nu)] = complex(v)
            e = max(self.stderr.get((n, idx, mu, nu), 0.0), self.stderr.get((n, idx, nu, mu), 0.0))
            if e:
                out.stderr[(n, idx, mu, nu)] = e
        return out

    @classmethod
    def from_couplings(cls, c: CouplingSet, point: tuple = ()) -> "MomentTable":
        """Exact table of the continuous class at one grid point (constants if ``point`` is empty)."""
        D0, D1, D2, shape = _point_blocks(c)
        j = int(np.ravel_multi_index(point, shape)) if point and shape else 0
        d, p = c.dim, c.n_lindblads
        v = np.broadcast_to(c.drift00, (shape or ()) + (d,)).reshape(-1, d)[j if shape else 0]
        t = cls(d, p + 1, 2, tuple(point))
        for a in range(p):
            for b in range(p):
                t.set(0, (), a + 1, b + 1, D0[j, a, b], hermitian=False)
        for i in range(d):
            t.set(1, (i,), 0, 0, v[i])
            for a in range(p):
                t.set(1, (i,), 0, a + 1, D1[j, i, a])
            for k in range(i, d):
                t.set(2, (i, k), 0, 0, D2[j, i, k].real)
        return t

    def rows(self) -> list[tuple]:
        out = []
        for k in sorted(self.entries):
            n, idx, mu, nu = k
            v = self.entries[k]
            out.append((n, ";".join(map(str, idx)), mu, nu, v.real, v.imag, self.stderr.get(k, 0.0)))
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "indices", "mu", "nu", "re", "im", "stderr"])
            for n, idx, mu, nu, re, im, se in self.rows():
                w.writerow([n, idx, mu, nu, format(re, ".17g"), format(im, ".17g"), format(se, ".17g")])

    @classmethod
    def read_csv(cls, path: str | Path, dim: int, n_ops: int) -> "MomentTable":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        max_order = max((int(r["n"]) for r in rows), default=0)
        t = cls(dim, n_ops, max_order)
        for r in rows:
            idx = tuple(int(i) for i in r["indices"].split(";")) if r["indices"] else ()
            t.set(int(r["n"]), idx, int(r["mu"]), int(r["nu"]), complex(float(r["re"]), float(r["im"])),
                  float(r["stderr"]) or None, hermitian=False)
        return t


# --- Pawula scan ------------------------------------------------------------

@dataclass(frozen=True)
class PawulaViolation:
    n: int
    m: int
    left: tuple
    right: tuple
    mu: int
    nu: int
    lhs: float
    rhs: float

    @property
    def slack(self) -> float:
        return self.lhs - self.rhs


CONTINUOUS = "consistent-with-continuous"
JUMP = "consistent-with-jump"
VIOLATES = "violates-CP"


@dataclass
class PawulaReport:
    violations: list
    classification: str
    checked: int


def _multisets(d: int, size: int, diagonal_only: bool) -> list[tuple]:
    if diagonal_only:
        return [(i,) * size for i in range(d)] if size else [()]
    return list(itertools.combinations_with_replacement(range(d), size))


def pawula_scan(t: MomentTable, rel_tol: float = 1e-9, abs_tol: float = 1e-12, n_sigma: float = 3.0,
                full: bool = False) -> PawulaReport:
    """Scan the moment inequalities of a positive transition kernel.

    For multisets ``A`` (size ``n``) and ``B`` (size ``n+m``) of axes,

    ``(2n)! (2n+2m)! D^{mu mu}_{2n, AA} D^{nu nu}_{2n+2m, BB} >= |(2n+m)! D^{mu nu}_{2n+m, A+B}|^2``

    with ``2n + 2m <= max_order``. For ``n = 0`` only quantum ``mu != 0`` is
    used (the zeroth classical moment is of order one). By default ``A`` and
    ``B`` are single-axis; ``full=True`` enumerates all multisets.

    A violation needs the inequality to fail by more than
    ``abs_tol + rel_tol * max(lhs, rhs)`` plus ``n_sigma`` propagated standard
    errors.
    """
    if t.hermiticity_error() > 1e-9 * max(1.0, max((abs(v) for v in t.entries.values()), default=1.0)):
        raise ValueError("moment table is not Hermitian")
    P, d, N = t.n_ops, t.dim, t.max_order
    viol, checked = [], 0
    for n in range(0, N // 2 + 1):
        for m in range(0, (N - 2 * n) // 2 + 1):
            if n == 0 and m == 0:
                continue
            for A in _multisets(d, n, not full):
                for B in _multisets(d, n + m, not full):
                    if not full and A and B and A[0] != B[0]:
                        continue
                    AA, BB, AB = A + A, B + B, A + B
                    for mu in range(P):
                        if n == 0 and mu == 0:
                            continue
                        for nu in range(P):
                            x = t.get(2 * n, AA, mu, mu).real
                            y = t.get(2 * n + 2 * m, BB, nu, nu).real
                            zc = t.get(2 * n + m, AB, mu, nu)
                            a = math.factorial(2 * n) * math.factorial(2 * n + 2 * m)
                            b = math.factorial(2 * n + m)
                            lhs = a * x * y
                            rhs = (b * abs(zc)) ** 2
                            ex, ey = t.error(2 * n, AA, mu, mu), t.error(2 * n + 2 * m, BB, nu, nu)
                            ez = t.error(2 * n + m, AB, mu, nu)
                            noise = n_sigma * math.sqrt((a * ex * y) ** 2 + (a * x * ey) ** 2
                                                        + (2 * b * b * abs(zc) * ez) ** 2)
                            checked += 1
                            if lhs - rhs < -(abs_tol + rel_tol * max(abs(lhs), rhs) + noise):
                                viol.append(PawulaViolation(n, m, A, B, mu, nu, lhs, rhs))
    if viol:
        cls = VIOLATES
    else:
        cls = CONTINUOUS if _continuous(t, n_sigma, abs_tol) else JUMP
    return PawulaReport(viol, cls, checked)


def _continuous(t: MomentTable, n_sigma: float, abs_tol: float) -> bool:
    for (n, idx, mu, nu), v in t.entries.items():
        limit = 3 if (mu, nu) == (0, 0) else 2
        if n >= limit and abs(v) > abs_tol + n_sigma * t.stderr.get((n, idx, mu, nu), 0.0):
            return False
    return True


# --- Cauchy-Schwarz sweep ---------------------------------------------------

@dataclass
class CauchySchwarzResult:
    min_slack: float
    slacks: np.ndarray
    worst_trial: int


def cs_slack(T: np.ndarray, f: np.ndarray, g: np.ndarray) -> float:
    """``<f,f><g,g> - |<f,g>|^2`` for ``<f,g> = sum_k Tr(f_k^dag g_k T_k)``."""
    ff = np.einsum("kba,kbc,kca->", f.conj(), f, T).real
    if np.array_equal(f, g):
        return float(ff * ff - ff * ff)
    gg = np.einsum("kba,kbc,kca->", g.conj(), g, T).real
    fg = np.einsum("kba,kbc,kca->", f.conj(), g, T)
    return float(ff * gg - abs(fg) ** 2)


def cauchy_schwarz_test(T: np.ndarray, f: np.ndarray | None = None, g: np.ndarray | None = None,
                        trials: int = 200, rng: np.random.Generator | None = None,
                        check_psd: bool = True, psd_tol: float = 1e-10) -> CauchySchwarzResult:
    """Worst slack of the CQ Cauchy-Schwarz inequality over ``trials`` operator pairs.

    Parameters
    ----------
    T : (K, N, N) table of positive operators, one per displacement.
    f, g : optional (K, N, N) pair; when given this pair is evaluated first.
    trials : number of random pairs. Even trials are dense Gaussian pairs,
        odd trials are rank-one pairs ``|x><y_i|`` at a single displacement,
        which probe the individual blocks.
    check_psd : reject non-positive ``T`` (disable to probe counterexamples).
    """
    T = np.asarray(T, dtype=complex)
    if T.ndim != 3 or T.shape[1] != T.shape[2]:
        raise ValueError(f"T must have shape (K, N, N), got {T.shape}")
    if check_psd:
        m = float(np.min(_min_eigs(T)))
        if m < -psd_tol:
            raise ValueError(f"T is not positive (min eigenvalue {m:.3e})")
    rng = rng or np.random.default_rng(0)
    K, N, _ = T.shape
    slacks = []
    if f is not None:
        slacks.append(cs_slack(T, np.asarray(f, complex), np.asarray(f if g is None else g, complex)))
    for trial in range(trials):
        if trial % 2 == 0:
            f_ = rng.normal(size=(K, N, N)) + 1j * rng.normal(size=(K, N, N))
            g_ = rng.normal(size=(K, N, N)) + 1j * rng.normal(size=(K, N, N))
        else:
            k = rng.integers(K)
            x = rng.normal(size=N) + 1j * rng.normal(size=N)
            y1 = rng.normal(size=N) + 1j * rng.normal(size=N)
            y2 = rng.normal(size=N) + 1j * rng.normal(size=N)
            f_ = np.zeros((K, N, N), complex)
            g_ = np.zeros((K, N, N), complex)
            f_[k] = np.outer(x, y1.conj())
            g_[k] = np.outer(x, y2.conj())
        slacks.append(cs_slack(T, f_, g_))
    s = np.array(slacks)
    w = int(np.argmin(s)) if s.size else -1
    return CauchySchwarzResult(float(s[w]) if s.size else 0.0, s, w)


# --- Choi verification ------------------------------------------------------

@dataclass
class ChoiCertificate:
    """Choi spectrum and Kraus normalization of a CQ map snapshot."""

    min_eigenvalue: float
    per_source: np.ndarray
    normalization_residual: float
    dt: float
    kraus: dict = field(default_factory=dict, repr=False)

    @property
    def rate_margin(self) -> float:
        return self.min_eigenvalue / self.dt if self.dt > 0 else self.min_eigenvalue

    def valid(self, tol: float = 1e-9) -> bool:
        return self.min_eigenvalue >= -tol and self.normalization_residual <= tol


def choi_cp_check(snapshot: np.ndarray, dt: float = 0.0, kraus_cutoff: float = 1e-14) -> ChoiCertificate:
    """CP and normalization check of ``Lambda(z|z')`` given as superoperators.

    Parameters
    ----------
    snapshot : (m, m, n^2, n^2) column-stacking superoperators, ``[z, z']``
        maps the state at ``z'`` into ``z``. A single ``(n^2, n^2)`` map is
        accepted as ``m = 1``.
    dt : elapsed time of the snapshot, used only for ``rate_margin``.

    For each source ``z'`` the Choi matrices of all ``Lambda(z|z')`` form a
    block-diagonal matrix whose smallest eigenvalue is recorded. Kraus
    operators ``K = sqrt(lambda) V`` come from the eigendecomposition, and
    ``sum_z sum_k lambda_k V_k^dag V_k = I`` is checked.
    """
    S = np.asarray(snapshot, dtype=complex)
    if S.ndim == 2:
        S = S[None, None]
    if S.ndim != 4 or S.shape[0] != S.shape[1] or S.shape[2] != S.shape[3]:
        raise ValueError(f"snapshot must have shape (m, m, n^2, n^2), got {S.shape}")
    m, N = S.shape[0], S.shape[2]
    n = int(round(math.sqrt(N)))
    if n * n != N:
        raise ValueError(f"superoperator size {N} is not a square")
    per_source = np.empty(m)
    resid = 0.0
    kraus = {}
    for src in range(m):
        worst = np.inf
        acc = np.zeros((n, n), complex)
        for tgt in range(m):
            J = qa.symmetrize(qa.choi_from_superop(S[tgt, src]))
            lam, vec = np.linalg.eigh(J)
            worst = min(worst, float(lam[0]))
            # |omega> = sum_a |a> (x) V|a>  =>  V[i, a] = v[a n + i]
            V = vec.T.reshape(N, n, n).transpose(0, 2, 1)
            acc += np.einsum("k,kba,kbc->ac", lam, V.conj(), V)
            keep = lam > kraus_cutoff * max(1.0, float(np.abs(lam).max()))
            K = np.sqrt(lam[keep])[:, None, None] * V[keep]
            # fix the eigenvector phase so that Tr K >= 0 where it is nonzero
            tr = np.trace(K, axis1=1, axis2=2)
            ph = np.where(np.abs(tr) > 1e-12, np.conj(tr) / np.maximum(np.abs(tr), 1e-300), 1.0)
            kraus[(tgt, src)] = K * ph[:, None, None]
        per_source[src] = worst
        resid = max(resid, float(np.max(np.abs(acc - np.eye(n)))))
    return ChoiCertificate(float(per_source.min()), per_source, resid, float(dt), kraus)


def insert_transpose(snapshot: np.ndarray, target: int, source: int) -> np.ndarray:
    """Compose ``Lambda(target|source)`` with the transpose map (positive, not CP)."""
    S = np.array(snapshot, dtype=complex, copy=True)
    n = int(round(math.sqrt(S.shape[-1])))
    S[target, source] = qa.transpose_superop(n) @ S[target, source]
    return S
