"""Classical-quantum states: one sub-normalized density matrix per classical point.

Two containers share one interface:

* :class:`HybridState` lives on a :class:`~cqdyn.phase_space.PhaseGrid`
  (``rho.shape == grid.shape + (n, n)``) and integrates with grid quadrature.
* :class:`DiscreteHybridState` lives on a finite list of sites
  (``rho.shape == (m, n, n)``) and sums with unit weights.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import quantum_algebra as qa
from .phase_space import PhaseGrid

SNAPSHOT_MAGIC = b"CQDYNSNP"
SNAPSHOT_VERSION = 1


class _StateOps:
    """Diagnostics common to grid and site states."""

    rho: np.ndarray
    time: float

    @property
    def n_q(self) -> int:
        return self.rho.shape[-1]

    @property
    def site_shape(self) -> tuple[int, ...]:
        return self.rho.shape[:-2]

    def cell_weights(self) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def coordinates(self) -> list[np.ndarray]:  # pragma: no cover - abstract
        raise NotImplementedError

    def classical_marginal(self) -> np.ndarray:
        """Pointwise trace ``p(z) = Tr rho(z)`` (a density, not a cell mass)."""
        return np.real(np.trace(self.rho, axis1=-2, axis2=-1))

    def quantum_marginal(self) -> np.ndarray:
        """Quadrature-weighted sum of ``rho(z)``."""
        w = self.cell_weights()[..., None, None]
        axes = tuple(range(self.rho.ndim - 2))
        return np.sum(self.rho * w, axis=axes)

    def total_trace(self) -> float:
        return float(np.sum(self.classical_marginal() * self.cell_weights()))

    def hermiticity_error(self) -> float:
        return qa.hermiticity_error(self.rho)

    def min_eigenvalue(self, tol: float = qa.HERMITIAN_TOL) -> float:
        """Smallest eigenvalue over all points."""
        flat = self.rho.reshape((-1,) + self.rho.shape[-2:])
        return float(np.min(qa.min_eigenvalues(flat, tol=tol)))

    def pointwise_min_eigenvalues(self) -> np.ndarray:
        return qa.min_eigenvalues(self.rho)

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and variance of each classical coordinate under ``p(z)``."""
        mass = self.classical_marginal() * self.cell_weights()
        total = mass.sum()
        means, variances = [], []
        for x in self.coordinates():
            x = np.broadcast_to(x, mass.shape)
            m = float(np.sum(mass * x) / total) if total != 0 else np.nan
            v = float(np.sum(mass * (x - m) ** 2) / total) if total != 0 else np.nan
            means.append(m)
            variances.append(v)
        return np.array(means), np.array(variances)

    def expectation(self, op: np.ndarray) -> complex:
        """``sum_z w(z) Tr(op rho(z))``."""
        return complex(np.trace(op @ self.quantum_marginal()))


@dataclass
class HybridState(_StateOps):
    grid: PhaseGrid
    rho: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=complex)
        if self.rho.shape[:-2] != self.grid.shape or self.rho.ndim != self.grid.ndim + 2:
            raise ValueError(f"rho shape {self.rho.shape} does not match grid {self.grid.shape} + (n, n)")
        if self.rho.shape[-1] != self.rho.shape[-2]:
            raise ValueError("rho matrices must be square")

    def cell_weights(self) -> np.ndarray:
        return self.grid.weights()

    def coordinates(self) -> list[np.ndarray]:
        return [self.grid.coord_field(i) for i in range(self.grid.ndim)]

    def with_rho(self, rho: np.ndarray, time: float | None = None) -> "HybridState":
        return HybridState(self.grid, rho, self.time if time is None else time)

    def copy(self) -> "HybridState":
        return self.with_rho(self.rho.copy())

    # --- persistence ------------------------------------------------------
    def save(self, path: str | Path) -> None:
        save_snapshot(path, self)

    def marginal_table(self, p_floor: float = 1e-14) -> dict[str, np.ndarray]:
        p = self.classical_marginal()
        mins = self.pointwise_min_eigenvalues()
        with np.errstate(invalid="ignore", divide="ignore"):
            pur = np.real(np.einsum("...ij,...ji->...", self.rho, self.rho)) / p**2
        pur = np.where(np.abs(p) > p_floor, pur, np.nan)
        cols = {}
        for i, x in enumerate(self.grid.mesh()):
            cols[f"z{i + 1}"] = x.ravel()
        cols["p"] = p.ravel()
        cols["min_eig"] = mins.ravel()
        cols["purity"] = pur.ravel()
        return cols

    def write_marginal_csv(self, path: str | Path) -> None:
        cols = self.marginal_table()
        names = list(cols)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for row in zip(*(cols[k] for k in names)):
                w.writerow([format(float(v), ".17g") for v in row])


@dataclass
class DiscreteHybridState(_StateOps):
    """CQ state on a finite site set; ``sites`` has shape ``(m, d)``."""

    sites: np.ndarray
    rho: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.sites = np.asarray(self.sites, dtype=float)
        if self.sites.ndim == 1:
            self.sites = self.sites[:, None]
        self.rho = np.asarray(self.rho, dtype=complex)
        if self.rho.ndim != 3 or self.rho.shape[0] != self.sites.shape[0]:
            raise ValueError(f"rho shape {self.rho.shape} does not match {self.sites.shape[0]} sites")

    def cell_weights(self) -> np.ndarray:
        return np.ones(self.rho.shape[0])

    def coordinates(self) -> list[np.ndarray]:
        return [self.sites[:, i] for i in range(self.sites.shape[1])]

    def with_rho(self, rho: np.ndarray, time: float | None = None) -> "DiscreteHybridState":
        return DiscreteHybridState(self.sites, rho, self.time if time is None else time)

    def copy(self) -> "DiscreteHybridState":
        return self.with_rho(self.rho.copy())


def classical_marginal(s: _StateOps) -> np.ndarray:
    return s.classical_marginal()


def quantum_marginal(s: _StateOps) -> np.ndarray:
    return s.quantum_marginal()


def gaussian_profile(grid: PhaseGrid, center: Sequence[float], widths: Sequence[float] | float | None = None,
                     min_spacings: float = 2.0) -> np.ndarray:
    """Discretely normalized Gaussian density on ``grid``.

    ``widths`` default to four grid spacings per axis. Periodic axes use the
    minimum-image distance to the center.
    """
    h = np.array(grid.spacing)
    center = np.asarray(center, dtype=float)
    if center.shape != (grid.ndim,):
        raise ValueError(f"center must have {grid.ndim} coordinates")
    widths = 4 * h if widths is None else np.broadcast_to(np.asarray(widths, dtype=float), (grid.ndim,))
    under = np.flatnonzero(widths < min_spacings * h * (1 - 1e-12))
    if under.size:
        i = int(under[0])
        raise ValueError(f"width {widths[i]:.4g} on axis {i} is under-resolved: need >= {min_spacings} spacings "
                         f"({min_spacings * h[i]:.4g})")
    expo = np.zeros(grid.shape)
    for i in range(grid.ndim):
        x = grid.coord_field(i) - center[i]
        if grid.periodic:
            L = grid.axes[i].max - grid.axes[i].min
            x = (x + 0.5 * L) % L - 0.5 * L
        expo = expo + 0.5 * (x / widths[i]) ** 2
    g = np.exp(-expo)
    return g / grid.integrate(g)


def make_gaussian_product(grid: PhaseGrid, center: Sequence[float], widths, sigma: np.ndarray,
                          time: float = 0.0) -> HybridState:
    """``p(z) * sigma`` with ``p`` a normalized Gaussian surrogate for a point mass."""
    sigma = np.asarray(sigma, dtype=complex)
    if abs(np.trace(sigma) - 1) > 1e-10:
        raise ValueError(f"sigma must have unit trace, got {np.trace(sigma):.6g}")
    if qa.min_eigenvalue_hermitian(sigma) < -1e-12:
        raise ValueError("sigma must be positive semi-definite")
    p = gaussian_profile(grid, center, widths)
    return HybridState(grid, p[..., None, None] * sigma, time)


def mixture(states: Sequence[_StateOps], weights: Sequence[float]) -> _StateOps:
    rho = sum(w * s.rho for s, w in zip(states, weights))
    return states[0].with_rho(rho)


# --- snapshot container -----------------------------------------------------

def save_snapshot(path: str | Path, s: HybridState) -> None:
    """Write ``magic | uint64 header length | JSON header | '<c16' data``.

    Data are ``rho`` in grid-major, row-major order with interleaved
    little-endian float64 real and imaginary parts.
    """
    header = {"version": SNAPSHOT_VERSION, "grid": s.grid.spec(), "n_q": int(s.n_q), "time": float(s.time)}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(s.rho, dtype="<c16").tobytes())


def load_snapshot(path: str | Path) -> HybridState:
    with open(path, "rb") as fh:
        magic = fh.read(len(SNAPSHOT_MAGIC))
        if magic != SNAPSHOT_MAGIC:
            raise ValueError(f"{path}: not a snapshot file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype="<c16")
    grid = PhaseGrid.from_spec(header["grid"])
    n = int(header["n_q"])
    expected = grid.size * n * n
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} entries, found {data.size}")
    return HybridState(grid, data.reshape(grid.shape + (n, n)).astype(complex), float(header["time"]))
