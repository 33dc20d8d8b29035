"""Explicit RK4 time stepping with trace, positivity and moment diagnostics."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import quantum_algebra as qa
from ._kernels import axpy_into, rk4_finish_into
from .generator_continuous import ContinuousGenerator, CouplingSet, _field
from .phase_space import PhaseGrid

SAFETY = 0.5
TRUNCATION_WARN = 1e-6


class StabilityError(ValueError):
    """Requested step exceeds the stability bound."""


class TruncationWarning(UserWarning):
    """Population of the top Fock levels exceeds the truncation threshold."""


# --- stability ----------------------------------------------------------------

def _op_norm(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A)
    if A.size == 0:
        return np.zeros(A.shape[:-2])
    return np.linalg.norm(A, ord=2, axis=(-2, -1)) if A.ndim > 2 else np.linalg.norm(A, 2)


def stability_bound(grid: PhaseGrid, c: CouplingSet, safety: float = SAFETY, detail: bool = False):
    """Largest admissible RK4 step for the continuous generator.

    ``safety * min`` over axes of the diffusion limit ``h^2/(2 d max||D2||)``,
    the advection limit ``h/max|v|`` and the Lindblad limit
    ``1/(max||D0|| max||L||^2)``. The advection speed counts friction and
    the back-reaction flux ``2 sum_a |D1_ia| ||L_a||``; a Hamiltonian limit
    ``2/max spread(H)`` is also applied.
    """
    d = grid.ndim
    gs = grid.shape
    h = np.array(grid.spacing)
    limits = {}
    D2n = float(np.max(_op_norm(np.asarray(c.D2, float)))) if np.size(c.D2) else 0.0
    limits["diffusion"] = float(np.min(h**2)) / (2 * d * D2n) if D2n > 0 else math.inf
    p = c.n_lindblads
    Lnorm = np.array([np.linalg.norm(L, 2) for L in c.lindblads]) if p else np.zeros(0)
    v = np.abs(_field(c.drift00, (d,), gs, "drift00", float))
    D1 = np.abs(_field(c.D1, (d, p), gs, "D1"))
    speed = v + 2 * np.einsum("...ia,a->...i", D1, Lnorm)
    for k in c.friction_axes:
        speed[..., k] += c.friction * np.abs(np.broadcast_to(grid.coord_field(k), gs))
    adv = math.inf
    for i in range(d):
        m = float(np.max(speed[..., i]))
        if m > 0:
            adv = min(adv, h[i] / m)
    limits["advection"] = adv
    D0n = float(np.max(_op_norm(c.D0))) if p else 0.0
    Lmax = float(np.max(Lnorm)) if p else 0.0
    limits["lindblad"] = 1.0 / (D0n * Lmax**2) if D0n * Lmax > 0 else math.inf
    H = c.total_hamiltonian(gs if c.hamiltonian_terms else None)
    ev = np.linalg.eigvalsh(qa.symmetrize(np.asarray(H)))
    spread = float(np.max(ev[..., -1] - ev[..., 0]))
    limits["hamiltonian"] = 2.0 / spread if spread > 0 else math.inf
    bound = safety * min(limits.values())
    if detail:
        return bound, {k: safety * x for k, x in limits.items()}
    return bound


# --- generator adapters -------------------------------------------------------

class _Adapter:
    """Uniform view of a generator for the time loop.

    Compiled generators expose a working representation; plain callables
    ``f(rho) -> drho`` on complex arrays are wrapped directly.
    """

    def __init__(self, generator, state):
        self.generator = generator
        self.site_shape = state.rho.shape[:-2]
        self.n = state.n_q
        self.M = int(np.prod(self.site_shape))
        self.compiled = hasattr(generator, "apply_working")

    def to_working(self, rho):
        if self.compiled:
            return self.generator.to_working(rho)
        return np.ascontiguousarray(rho, dtype=complex).reshape(self.M, self.n, self.n).copy()

    def from_working(self, x):
        if self.compiled:
            return np.asarray(self.generator.from_working(x)).reshape(self.site_shape + (self.n, self.n))
        return x.reshape(self.site_shape + (self.n, self.n)).copy()

    def rhs(self, x, out):
        if self.compiled:
            self.generator.apply_working(x, out)
        else:
            out[...] = np.asarray(self.generator(x.reshape(self.site_shape + (self.n, self.n)))).reshape(out.shape)
        return out

    def matrices(self, x):
        """Complex ``(M, n, n)`` matrices in the working basis (unitary to the original)."""
        if self.compiled:
            return x[0] + 1j * x[1]
        return x

    def traces(self, x):
        if self.compiled:
            return np.einsum("gaa->g", x[0])
        return np.real(np.einsum("gaa->g", x))

    def quantum_marginal(self, x, w):
        if self.compiled:
            R = np.tensordot(w, x[0], axes=(0, 0)) + 1j * np.tensordot(w, x[1], axes=(0, 0))
            return self.generator.operator_from_working(R)
        return np.tensordot(w, x, axes=(0, 0))

    def stability_bound(self):
        g = self.generator
        if hasattr(g, "stability_bound"):
            return g.stability_bound()
        if isinstance(g, ContinuousGenerator):
            return stability_bound(g.grid, g.couplings)
        return None


# --- diagnostics --------------------------------------------------------------

@dataclass
class DiagnosticsLog:
    """Per-step diagnostics; ``min_eig`` is NaN on steps where it was skipped."""

    ndim: int
    rows: list = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return (["t", "trace_err", "min_eig"] + [f"mean_{i + 1}" for i in range(self.ndim)]
                + [f"var_{i + 1}" for i in range(self.ndim)] + ["purity"])

    def append(self, t, trace_err, min_eig, means, variances, purity):
        self.rows.append([float(t), float(trace_err), float(min_eig), *map(float, means),
                          *map(float, variances), float(purity)])

    def column(self, name: str) -> np.ndarray:
        j = self.columns.index(name)
        return np.array([r[j] for r in self.rows])

    def __len__(self):
        return len(self.rows)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([format(v, ".17g") for v in r])


@dataclass
class Trajectory:
    snapshots: list
    log: DiagnosticsLog
    final: object
    steps: int
    dt: float
    aborted: bool = False
    abort_reason: str = ""
    warnings: list = field(default_factory=list)


class _Diagnostics:
    def __init__(self, adapter: _Adapter, state, floor: float = 1e-13):
        self.a = adapter
        self.w = np.asarray(state.cell_weights(), float).reshape(-1)
        self.coords = [np.broadcast_to(x, state.site_shape).reshape(-1) for x in state.coordinates()]
        self.floor = floor
        self.trace0 = None

    def min_eig(self, x) -> float:
        R = self.a.matrices(x)
        norms = np.sqrt(np.sum(np.abs(R) ** 2, axis=(1, 2)))
        big = norms >= self.floor
        if not np.any(big):
            return 0.0
        return float(np.min(np.linalg.eigvalsh(qa.symmetrize(R[big]))[:, 0]))

    def row(self, x, with_eig: bool):
        p = self.a.traces(x)
        mass = p * self.w
        total = float(mass.sum())
        if self.trace0 is None:
            self.trace0 = total
        means, variances = [], []
        for z in self.coords:
            m = float(np.sum(mass * z) / total) if total else math.nan
            means.append(m)
            variances.append(float(np.sum(mass * (z - m) ** 2) / total) if total else math.nan)
        rq = self.a.quantum_marginal(x, self.w)
        tr = np.trace(rq).real
        purity = float(np.real(np.trace(rq @ rq)) / tr**2) if tr else math.nan
        me = self.min_eig(x) if with_eig else math.nan
        return abs(total - self.trace0), me, means, variances, purity, rq


def _clip_psd(R: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(qa.symmetrize(R))
    return (vecs * np.clip(vals, 0, None)[..., None, :]) @ qa.dag(vecs)


def evolve(s0, generator, T: float, dt: float | None = None, *, snapshot_stride: int = 100,
           diag_stride: int = 1, min_eig_stride: int = 1, max_steps: int | None = None,
           check_stability: bool = True, clip_negative: bool = False, keep_snapshots: bool = True,
           truncation_check: bool | None = None, callback: Callable | None = None,
           stop_below: float | None = None) -> Trajectory:
    """Integrate ``d rho/dt = generator(rho)`` from ``s0`` over duration ``T`` with RK4.

    Parameters
    ----------
    s0 : HybridState or DiscreteHybridState
    generator : compiled generator (``ContinuousGenerator``/``JumpGenerator``) or a callable
        mapping a complex ``rho`` array to its time derivative.
    T : duration; the number of steps is ``ceil(T/dt)`` with the step shrunk to land on ``T``.
    dt : step; defaults to the generator's stability bound.
    snapshot_stride : keep every ``k``-th state (the initial and final states are always kept).
    diag_stride, min_eig_stride : diagnostics cadence; the eigenvalue scan is the expensive part
        and ``min_eig_stride = 0`` disables it.
    max_steps : hard cap on the number of steps.
    clip_negative : project each ``rho(z)`` onto the PSD cone after every step.
        Non-physical; for exploration only.
    stop_below : end the run early (not an abort) once a scanned minimum
        eigenvalue falls below this value.

    Returns
    -------
    Trajectory
        On NaN/overflow the run stops, ``aborted`` is set and ``final`` is
        the last finite state.
    """
    if T < 0:
        raise ValueError("duration must be non-negative")
    a = _Adapter(generator, s0)
    bound = a.stability_bound()
    if dt is None:
        if bound is None or not math.isfinite(bound):
            raise ValueError("no step given and the generator provides no stability bound")
        dt = bound
    if dt <= 0:
        raise ValueError("step must be positive")
    if check_stability and bound is not None and dt > bound * (1 + 1e-12):
        raise StabilityError(f"step {dt:.6g} exceeds the stability bound {bound:.6g}")
    nsteps = int(math.ceil(T / dt - 1e-9)) if T > 0 else 0
    dt_eff = T / nsteps if nsteps else dt
    if max_steps is not None:
        nsteps = min(nsteps, int(max_steps))

    x = a.to_working(s0.rho)
    fused_gen = hasattr(generator, "rk_stage")
    k1, k2, tmp = (np.empty_like(x) for _ in range(3))
    k3, k4 = (np.empty((0,)), np.empty((0,))) if fused_gen else (np.empty_like(x), np.empty_like(x))
    k1f, k2f, k3f, k4f = (v.reshape(-1) for v in (k1, k2, k3, k4))
    diag = _Diagnostics(a, s0)
    log = DiagnosticsLog(len(diag.coords))
    if truncation_check is None:
        truncation_check = s0.n_q >= 8
    warn_msgs: list[str] = []
    snaps = []

    def record(step, t):
        with_eig = min_eig_stride > 0 and (step % min_eig_stride == 0 or step == nsteps)
        tre, me, means, var, pur, rq = diag.row(x, with_eig)
        log.append(t, tre, me, means, var, pur)
        if truncation_check and not warn_msgs:
            top = float(np.real(rq[-1, -1] + rq[-2, -2]))
            if top > TRUNCATION_WARN:
                msg = f"top two levels hold population {top:.3e} at t = {t:.4g}; increase n_q"
                warn_msgs.append(msg)
                warnings.warn(msg, TruncationWarning, stacklevel=3)
        return me

    def snapshot(t):
        return s0.with_rho(a.from_working(x), t)

    t0 = s0.time
    record(0, t0)
    if keep_snapshots:
        snaps.append(snapshot(t0))
    aborted, reason = False, ""
    fused = fused_gen
    stopped = False
    step = 0
    h = dt_eff
    for step in range(1, nsteps + 1):
        if fused:
            # tmp accumulates the new state; k1/k2 serve as stage inputs
            g = generator.rk_stage
            g(x, x, tmp, h / 6, True, k1, 0.5 * h)
            g(k1, x, tmp, h / 3, False, k2, 0.5 * h)
            g(k2, x, tmp, h / 3, False, k1, h)
            probe = g(k1, x, tmp, h / 6, False)
        else:
            flat, tmpf = x.reshape(-1), tmp.reshape(-1)
            a.rhs(x, k1)
            axpy_into(tmpf, flat, 0.5 * h, k1f)
            a.rhs(tmp, k2)
            axpy_into(tmpf, flat, 0.5 * h, k2f)
            a.rhs(tmp, k3)
            axpy_into(tmpf, flat, h, k3f)
            a.rhs(tmp, k4)
            probe = rk4_finish_into(tmpf, flat, h, k1f, k2f, k3f, k4f)
        t = t0 + step * dt_eff
        if not math.isfinite(probe):
            # x still holds the last good state
            aborted, reason = True, f"non-finite values at step {step} (t = {t:.6g})"
            step -= 1
            break
        x, tmp = tmp, x
        if clip_negative:
            R = _clip_psd(a.matrices(x))
            if a.compiled:
                x[0], x[1] = R.real, R.imag
            else:
                x[...] = R
        if step % diag_stride == 0 or step == nsteps:
            me = record(step, t)
            if stop_below is not None and me < stop_below:
                stopped = True
        if keep_snapshots and (step % snapshot_stride == 0 or step == nsteps):
            snaps.append(snapshot(t))
        if callback is not None:
            callback(step, t, x)
        if stopped:
            break
    t_final = t0 + step * dt_eff
    final = snapshot(t_final)
    if keep_snapshots and (aborted or stopped) and snaps[-1].time != t_final:
        snaps.append(final)
    if not keep_snapshots:
        snaps = [final]
    return Trajectory(snaps, log, final, step, dt_eff, aborted, reason, warn_msgs)


def make_evolver(generator, dt: float | None = None, **kw) -> Callable:
    """``evolver(state, duration) -> state`` running :func:`evolve` without snapshots."""

    def evolver(state, duration):
        step = dt
        if step is not None and duration > 0:
            step = min(step, duration)
        tr = evolve(state, generator, duration, step, keep_snapshots=False, min_eig_stride=0,
                    diag_stride=10**9, **kw)
        if tr.aborted:
            raise FloatingPointError(tr.abort_reason)
        return tr.final

    return evolver
