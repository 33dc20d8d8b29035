"""Uniform grids on boxes in R^d with quadrature and finite-difference stencils.

Fields are arrays whose leading ``d`` axes index grid points; any trailing
axes (for example the two matrix axes of a CQ state) are carried along.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PERIODIC = "periodic"
ABSORBING = "absorbing"
DEFAULT_MAX_POINTS = 4_000_000


@dataclass(frozen=True)
class Axis:
    min: float
    max: float
    points: int
    name: str = ""

    def __post_init__(self):
        if not self.max > self.min:
            raise ValueError(f"axis {self.name or '?'}: max ({self.max}) must exceed min ({self.min})")
        if int(self.points) != self.points or self.points < 3:
            raise ValueError(f"axis {self.name or '?'}: need an integer >= 3 points, got {self.points}")


@dataclass(frozen=True)
class PhaseGrid:
    """Tensor-product grid on a box.

    Periodic axes hold ``points`` nodes ``min + k h`` with ``h = (max - min)/points``
    (``max`` itself is identified with ``min``). Absorbing axes include both
    end points, ``h = (max - min)/(points - 1)``, and use trapezoid weights.
    """

    axes: tuple[Axis, ...]
    boundary: str = PERIODIC
    max_points: int = DEFAULT_MAX_POINTS
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        axes = tuple(a if isinstance(a, Axis) else Axis(*a) for a in self.axes)
        object.__setattr__(self, "axes", axes)
        if not axes:
            raise ValueError("grid needs at least one axis")
        if self.boundary not in (PERIODIC, ABSORBING):
            raise ValueError(f"unknown boundary {self.boundary!r}; use 'periodic' or 'absorbing'")
        if self.size > self.max_points:
            raise ValueError(f"grid has {self.size} points, above the budget of {self.max_points}")

    @classmethod
    def box(cls, bounds: Sequence[tuple[float, float]], points: Sequence[int] | int,
            boundary: str = PERIODIC, names: Sequence[str] | None = None, **kw) -> "PhaseGrid":
        if np.isscalar(points):
            points = [int(points)] * len(bounds)
        names = names or [""] * len(bounds)
        axes = tuple(Axis(float(lo), float(hi), int(n), nm) for (lo, hi), n, nm in zip(bounds, points, names))
        return cls(axes, boundary, **kw)

    # --- geometry ---------------------------------------------------------
    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.points for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def periodic(self) -> bool:
        return self.boundary == PERIODIC

    @property
    def spacing(self) -> tuple[float, ...]:
        div = (lambda a: a.points) if self.periodic else (lambda a: a.points - 1)
        return tuple((a.max - a.min) / div(a) for a in self.axes)

    def coords(self, axis: int) -> np.ndarray:
        a = self.axes[axis]
        return a.min + self.spacing[axis] * np.arange(a.points)

    def mesh(self) -> list[np.ndarray]:
        """Coordinate arrays of full grid shape, one per axis."""
        return list(np.meshgrid(*[self.coords(i) for i in range(self.ndim)], indexing="ij"))

    def coord_field(self, axis: int) -> np.ndarray:
        """Coordinate of ``axis`` broadcastable against grid-shaped arrays."""
        shape = [1] * self.ndim
        shape[axis] = self.shape[axis]
        return self.coords(axis).reshape(shape)

    def weights(self) -> np.ndarray:
        """Quadrature weight per grid point, shape ``grid.shape``."""
        if "w" not in self._cache:
            w = np.ones(self.shape)
            for i, h in enumerate(self.spacing):
                wi = np.full(self.shape[i], h)
                if not self.periodic:
                    wi[0] = wi[-1] = 0.5 * h
                shape = [1] * self.ndim
                shape[i] = -1
                w = w * wi.reshape(shape)
            self._cache["w"] = w
        return self._cache["w"]

    def spec(self) -> dict:
        return {"boundary": self.boundary,
                "axes": [{"name": a.name, "min": a.min, "max": a.max, "points": a.points} for a in self.axes]}

    @classmethod
    def from_spec(cls, spec: dict) -> "PhaseGrid":
        axes = tuple(Axis(float(a["min"]), float(a["max"]), int(a["points"]), a.get("name", "")) for a in spec["axes"])
        return cls(axes, spec.get("boundary", PERIODIC))

    def refined(self, factor: float) -> "PhaseGrid":
        """Same box with ``points`` scaled by ``factor`` (rounded)."""
        axes = []
        for a in self.axes:
            n = int(round(a.points * factor)) if self.periodic else int(round((a.points - 1) * factor)) + 1
            axes.append(Axis(a.min, a.max, n, a.name))
        return PhaseGrid(tuple(axes), self.boundary, self.max_points)

    # --- calculus ---------------------------------------------------------
    def _check_axis(self, f: np.ndarray, axis: int):
        if not 0 <= axis < self.ndim:
            raise ValueError(f"axis {axis} out of range for a {self.ndim}-d grid")
        if self.shape[axis] < 3:
            raise ValueError("stencils need at least 3 points per axis")
        if f.shape[:self.ndim] != self.shape:
            raise ValueError(f"field shape {f.shape} does not start with grid shape {self.shape}")

    def partial(self, f: np.ndarray, axis: int) -> np.ndarray:
        """Central first derivative along ``axis``.

        Periodic grids wrap around; absorbing grids use one-sided
        second-order closures ``(-3, 4, -1)/(2h)`` at the two ends.
        """
        f = np.asarray(f)
        self._check_axis(f, axis)
        h = self.spacing[axis]
        if self.periodic:
            return (np.roll(f, -1, axis) - np.roll(f, 1, axis)) / (2 * h)
        g = np.moveaxis(f, axis, 0)
        out = np.empty_like(g, dtype=np.result_type(g, float))
        out[1:-1] = (g[2:] - g[:-2]) / (2 * h)
        out[0] = (-3 * g[0] + 4 * g[1] - g[2]) / (2 * h)
        out[-1] = (3 * g[-1] - 4 * g[-2] + g[-3]) / (2 * h)
        return np.moveaxis(out, 0, axis)

    def second_partial(self, f: np.ndarray, axis_i: int, axis_j: int | None = None) -> np.ndarray:
        """Second derivative; mixed derivatives are composed first derivatives.

        The pure second derivative uses the 3-point stencil, with
        second-order one-sided closures ``(2, -5, 4, -1)/h^2`` at absorbing ends.
        """
        f = np.asarray(f)
        axis_j = axis_i if axis_j is None else axis_j
        if axis_i != axis_j:
            return self.partial(self.partial(f, axis_j), axis_i)
        axis = axis_i
        self._check_axis(f, axis)
        h2 = self.spacing[axis] ** 2
        if self.periodic:
            return (np.roll(f, -1, axis) - 2 * f + np.roll(f, 1, axis)) / h2
        if self.shape[axis] < 4:
            raise ValueError("one-sided second-derivative closure needs at least 4 points")
        g = np.moveaxis(f, axis, 0)
        out = np.empty_like(g, dtype=np.result_type(g, float))
        out[1:-1] = (g[2:] - 2 * g[1:-1] + g[:-2]) / h2
        out[0] = (2 * g[0] - 5 * g[1] + 4 * g[2] - g[3]) / h2
        out[-1] = (2 * g[-1] - 5 * g[-2] + 4 * g[-3] - g[-4]) / h2
        return np.moveaxis(out, 0, axis)

    def integrate(self, f: np.ndarray) -> np.ndarray | float:
        """Quadrature over the grid axes; trailing axes are kept."""
        f = np.asarray(f)
        if f.shape[:self.ndim] != self.shape:
            raise ValueError(f"field shape {f.shape} does not start with grid shape {self.shape}")
        w = self.weights().reshape(self.shape + (1,) * (f.ndim - self.ndim))
        out = np.sum(f * w, axis=tuple(range(self.ndim)))
        return out.item() if np.ndim(out) == 0 else out

    # --- stencil tables for compiled kernels ----------------------------
    def first_stencil(self, axis: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-node neighbour indices and weights of :meth:`partial` along ``axis``.

        Returns ``(idx, w)`` of shape ``(points, 3)``.
        """
        n = self.shape[axis]
        h = self.spacing[axis]
        k = np.arange(n)
        idx = np.stack([(k - 1) % n, k, (k + 1) % n], axis=1)
        w = np.tile([-0.5 / h, 0.0, 0.5 / h], (n, 1))
        if not self.periodic:
            idx[0] = [0, 1, 2]
            w[0] = np.array([-3, 4, -1]) / (2 * h)
            idx[-1] = [n - 1, n - 2, n - 3]
            w[-1] = np.array([3, -4, 1]) / (2 * h)
        return idx.astype(np.int64), w

    def second_stencil(self, axis: int) -> tuple[np.ndarray, np.ndarray]:
        """Neighbour table of the pure second derivative, shape ``(points, 4)``."""
        n = self.shape[axis]
        h2 = self.spacing[axis] ** 2
        k = np.arange(n)
        idx = np.stack([(k - 1) % n, k, (k + 1) % n, k], axis=1)
        w = np.tile([1.0 / h2, -2.0 / h2, 1.0 / h2, 0.0], (n, 1))
        if not self.periodic:
            idx[0] = [0, 1, 2, 3]
            w[0] = np.array([2, -5, 4, -1]) / h2
            idx[-1] = [n - 1, n - 2, n - 3, n - 4]
            w[-1] = np.array([2, -5, 4, -1]) / h2
        return idx.astype(np.int64), w
