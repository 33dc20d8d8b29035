"""Bundled configurations: a classical oscillator coupled to a quantum one,
classical and pure-Lindblad limits, and small jump-class kernels.

Each :class:`Scenario` declares the validity verdict it is meant to have;
:meth:`Scenario.gate` re-derives that verdict and refuses to run on a
mismatch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import quantum_algebra as qa
from .generator_continuous import ContinuousGenerator, CouplingSet
from .generator_jump import JumpGenerator, JumpKernel, cp_check_kernel
from .hybrid_state import DiscreteHybridState, HybridState, make_gaussian_product
from .phase_space import PhaseGrid
from .validity import BOUNDARY, INVALID, VALID, check_tradeoff


class ScenarioError(ValueError):
    """A scenario cannot be built or fails its own validity gate."""


def default_oscillator_grid(points: int = 64, half_width: float = 8.0) -> PhaseGrid:
    return PhaseGrid.box([(-half_width, half_width)] * 2, points, names=("q", "p"))


def oscillator_pair(omega_c: float = 1.0, omega_q: float = 1.0, D1: float = 1.0, lam: float = 1.0,
                    D2: float = 1.0, gamma: float = 0.1, grid: PhaseGrid | None = None, n_q: int = 20,
                    alpha: complex = 1.0, center: Sequence[float] = (0.0, 0.0),
                    width: float | Sequence[float] | None = None, points: int = 64,
                    half_width: float = 8.0) -> tuple[CouplingSet, HybridState]:
    """Classical oscillator ``(q, p)`` coupled to a truncated quantum oscillator.

    ``H_c = p^2/2 + omega_c^2 q^2/2``, ``H_q = omega_q (N + 1/2)`` and
    ``H_cq = D1 q Q``. The single Lindblad operator is ``L = Q`` with
    ``D0 = lam``; the back-reaction ``-D1`` acts on the ``p`` axis and
    diffusion ``D2`` on ``p`` only, so ``2 D2 >= D1^2 / lam`` is the
    complete-positivity condition. Friction ``gamma`` damps ``p``.

    The initial state is a Gaussian in ``(q, p)`` (default width four grid
    spacings) times the coherent state ``|alpha>``. Without ``grid`` the
    box ``[-half_width, half_width]^2`` with ``points`` nodes per axis is used.
    """
    grid = default_oscillator_grid(points, half_width) if grid is None else grid
    if grid.ndim != 2:
        raise ScenarioError(f"the oscillator pair needs a 2-dimensional (q, p) grid, got {grid.ndim} axes")
    if n_q < 8:
        raise ScenarioError(f"n_q must be at least 8 to hold the coherent state, got {n_q}")
    if lam < 0 or D2 < 0 or gamma < 0:
        raise ScenarioError("lam, D2 and gamma must be non-negative")
    Q = qa.position(n_q)
    q, p = grid.mesh()
    c = CouplingSet(
        lindblads=Q[None],
        hamiltonian=qa.oscillator_hamiltonian(n_q, omega_q),
        D0=[[lam]],
        D1=[[0.0], [-D1]],
        drift00=np.stack([p, -omega_c**2 * q], axis=-1),
        D2=np.diag([0.0, D2]),
        friction=gamma,
        friction_axes=(1,),
        hamiltonian_terms=((D1 * q, Q),) if D1 else (),
    )
    s = make_gaussian_product(grid, center, width, qa.projector(qa.coherent_state(n_q, alpha)))
    return c, s


def tradeoff_boundary(D1: float = 1.0, lam: float = 1.0) -> float:
    """Diffusion ``D2`` at which the oscillator pair sits on the trade-off boundary."""
    return D1**2 / (2 * lam)


def classical_fokker_planck(drift: Callable | np.ndarray | Sequence[float], D2, grid: PhaseGrid,
                            center: Sequence[float] | None = None,
                            width: float | Sequence[float] | None = None) -> tuple[CouplingSet, HybridState]:
    """Purely classical dynamics with a trivial one-level quantum part.

    ``drift`` is a constant vector, a grid-shaped ``(..., d)`` field, or a
    callable ``drift(*coords) -> (..., d)``.
    """
    d = grid.ndim
    if callable(drift):
        v = np.asarray(drift(*grid.mesh()), dtype=float)
    else:
        v = np.asarray(drift, dtype=float)
    if v.shape not in ((d,), grid.shape + (d,)):
        raise ScenarioError(f"drift must have shape ({d},) or {grid.shape + (d,)}, got {v.shape}")
    D2 = np.asarray(D2, dtype=float)
    D2 = D2 * np.eye(d) if D2.ndim == 0 else D2
    c = CouplingSet(np.zeros((0, 1, 1)), np.zeros((1, 1)), np.zeros((0, 0)), np.zeros((d, 0)), v, D2)
    center = np.zeros(d) if center is None else center
    s = make_gaussian_product(grid, center, width, np.ones((1, 1)))
    return c, s


def ornstein_uhlenbeck(gamma: float = 0.5, D: float = 0.5, grid: PhaseGrid | None = None,
                       center: float = 0.0, width: float = 0.5) -> tuple[CouplingSet, HybridState]:
    """``dz = -gamma z dt`` with diffusion ``D`` (``d var/dt = -2 gamma var + 2 D``)."""
    grid = PhaseGrid.box([(-8.0, 8.0)], 256, names=("z",)) if grid is None else grid
    return classical_fokker_planck(lambda z: (-gamma * z)[..., None], D, grid, [center], width)


def ou_variance(t, gamma: float, D: float, var0: float):
    """``D/gamma (1 - e^{-2 gamma t}) + var0 e^{-2 gamma t}``."""
    e = np.exp(-2 * gamma * np.asarray(t, dtype=float))
    return D / gamma * (1 - e) + var0 * e


def qubit_dephasing(lam: float = 1.0, grid: PhaseGrid | None = None,
                    psi: np.ndarray | None = None) -> tuple[CouplingSet, HybridState]:
    """Pure Lindblad dephasing ``L = sigma_z / sqrt 2`` with rate ``lam``.

    Coherences decay as ``exp(-lam t)``; the classical part is inert.
    """
    grid = PhaseGrid.box([(-1.0, 1.0)], 8, names=("z",)) if grid is None else grid
    d = grid.ndim
    sz = qa.pauli_basis()[2]
    c = CouplingSet((sz / math.sqrt(2))[None], np.zeros((2, 2)), [[lam]], np.zeros((d, 1)),
                    np.zeros(d), np.zeros((d, d)))
    psi = np.array([1.0, 1.0]) / math.sqrt(2) if psi is None else np.asarray(psi, dtype=complex)
    s = make_gaussian_product(grid, np.zeros(d), 2 * np.array(grid.spacing), qa.projector(psi))
    return c, s


def two_site_jump(rates: float | Sequence[float] = 1.0, lindblads: np.ndarray | None = None,
                  amplitudes: Sequence[complex] | None = None, decoherence: float = 0.0,
                  detune: float = 1.0, hamiltonian: np.ndarray | None = None,
                  sites: Sequence[float] = (0.0, 1.0),
                  sigma: np.ndarray | None = None) -> tuple[JumpKernel, DiscreteHybridState]:
    """Two classical sites exchanging probability with quantum kicks.

    A jump ``z' -> z`` happens at rate ``rates[z']`` and applies
    ``K = I + sum_a amplitudes[a] L_a`` to the quantum state, i.e. the
    off-site block is ``rate * v v^dag`` with ``v = (1, amplitudes)``.
    ``detune`` scales the off-diagonal entries of that block; any value
    above 1 breaks its positivity. ``decoherence`` adds an on-site
    Lindblad block ``decoherence * I``.

    The initial state puts all weight on site 0 with quantum state
    ``sigma`` (default ``|0><0|``).
    """
    r = np.broadcast_to(np.asarray(rates, dtype=float), (2,))
    if np.any(r < 0):
        raise ScenarioError("jump rates must be non-negative")
    L = np.zeros((0, 2, 2), complex) if lindblads is None else np.asarray(lindblads, dtype=complex)
    if L.ndim == 2:
        L = L[None]
    n = L.shape[-1] if L.shape[0] else (np.shape(hamiltonian)[-1] if hamiltonian is not None else 1)
    p = L.shape[0]
    amp = np.zeros(p, complex) if amplitudes is None else np.asarray(amplitudes, dtype=complex)
    if amp.shape != (p,):
        raise ScenarioError(f"need {p} amplitudes, got {amp.shape}")
    v = np.concatenate([[1.0], amp])
    M = np.outer(v, v.conj())
    M = M * (detune + (1 - detune) * np.eye(p + 1))
    W = np.zeros((2, 2, p + 1, p + 1), complex)
    W[1, 0] = r[0] * M
    W[0, 1] = r[1] * M
    if decoherence and p:
        W[0, 0, 1:, 1:] = W[1, 1, 1:, 1:] = decoherence * np.eye(p)
    k = JumpKernel(np.asarray(sites, dtype=float), L if p else np.zeros((0, n, n)), W, hamiltonian)
    sigma = qa.projector(qa.ket(n, 0)) if sigma is None else np.asarray(sigma, dtype=complex)
    rho = np.zeros((2, n, n), complex)
    rho[0] = sigma
    return k, DiscreteHybridState(k.sites, rho)


# --- registry ---------------------------------------------------------------

@dataclass
class Scenario:
    """A named configuration with its declared validity verdict."""

    name: str
    description: str
    declared: str
    duration: float
    build: Callable[..., tuple]
    params: dict = field(default_factory=dict)

    def instantiate(self, **overrides):
        """``(couplings_or_kernel, initial_state)`` with parameters overridden."""
        return self.build(**{**self.params, **overrides})

    @property
    def kind(self) -> str:
        return "jump" if self.build is two_site_jump else "continuous"

    def verdict(self, **overrides) -> str:
        model, _ = self.instantiate(**overrides)
        return model_verdict(model)

    def gate(self, **overrides):
        """Build and check; raise :class:`ScenarioError` if the verdict is not the declared one."""
        model, s = self.instantiate(**overrides)
        v = model_verdict(model)
        if not overrides and v != self.declared:
            raise ScenarioError(f"scenario {self.name!r} declares {self.declared} but checks {v}")
        return model, s


def model_verdict(model) -> str:
    if isinstance(model, JumpKernel):
        return VALID if cp_check_kernel(model).valid else INVALID
    return check_tradeoff(model).verdict


def make_generator(model, state):
    """Compiled generator for a coupling set or jump kernel."""
    if isinstance(model, JumpKernel):
        return JumpGenerator(model)
    return ContinuousGenerator(state.grid, model)


def _registry() -> dict[str, Scenario]:
    four_pi = 4 * math.pi
    items = [
        Scenario("oscillator-pair", "classical oscillator coupled to a quantum oscillator, inside the trade-off",
                 VALID, four_pi, oscillator_pair, {"D2": 1.0}),
        Scenario("oscillator-pair-boundary", "oscillator pair with 2 D2 = D1^2 / lam",
                 BOUNDARY, four_pi, oscillator_pair, {"D2": 0.5}),
        Scenario("oscillator-pair-violating", "oscillator pair with too little diffusion (D2 = 0.25)",
                 INVALID, four_pi, oscillator_pair, {"D2": 0.25}),
        Scenario("oscillator-pair-decoupled", "oscillator pair with D1 = 0 and no decoherence",
                 VALID, four_pi, oscillator_pair, {"D1": 0.0, "lam": 0.0, "D2": 1.0}),
        Scenario("ornstein-uhlenbeck", "classical Ornstein-Uhlenbeck process, gamma = D = 0.5",
                 VALID, 6.0, ornstein_uhlenbeck, {"gamma": 0.5, "D": 0.5}),
        Scenario("qubit-dephasing", "pure Lindblad dephasing of a qubit, lam = 1",
                 VALID, 3.0, qubit_dephasing, {"lam": 1.0}),
        Scenario("two-site-jump", "two sites with a qubit kicked by sigma_x on every jump",
                 VALID, 3.0, two_site_jump,
                 {"rates": 1.0, "lindblads": qa.pauli_basis()[0][None], "amplitudes": [0.5], "decoherence": 0.2}),
        Scenario("two-site-jump-detuned", "two-site kernel whose off-site blocks are not positive",
                 INVALID, 3.0, two_site_jump,
                 {"rates": 1.0, "lindblads": qa.pauli_basis()[0][None], "amplitudes": [0.5], "detune": 1.5}),
    ]
    return {s.name: s for s in items}


SCENARIOS = _registry()


def get(name: str) -> Scenario:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise ScenarioError(f"unknown scenario {name!r}; known: {', '.join(sorted(SCENARIOS))}") from None
