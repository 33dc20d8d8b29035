import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cqdyn import quantum_algebra as qa
from cqdyn.generator_continuous import (ContinuousGenerator, CouplingError, CouplingSet,
                                        apply_continuous_generator, canonicalize, hamiltonian_drift)
from cqdyn.hybrid_state import HybridState
from cqdyn.phase_space import PhaseGrid


def random_psd(n, rng, rank=None):
    A = rng.normal(size=(n, rank or n)) + 1j * rng.normal(size=(n, rank or n))
    return A @ A.conj().T


def random_couplings(rng, grid, n=3, p=2, fields=False, friction=0.0):
    d = grid.ndim
    L = np.array([qa.random_operator(n, rng) for _ in range(p)])
    B = rng.normal(size=(d, d))
    kw = dict(lindblads=L, hamiltonian=qa.random_hermitian(n, rng), D0=random_psd(p, rng),
              D1=rng.normal(size=(d, p)) + 1j * rng.normal(size=(d, p)),
              drift00=rng.normal(size=d), D2=B @ B.T, friction=friction,
              friction_axes=(d - 1,) if friction else ())
    if fields:
        z = grid.mesh()
        kw["drift00"] = np.stack([np.sin(z[0]) + 0.3 * z[-1], np.cos(z[-1])], axis=-1)
        kw["hamiltonian_terms"] = ((0.5 * z[0], qa.random_hermitian(n, rng)),)
        kw["D2"] = (1.0 + 0.2 * np.cos(z[0]))[..., None, None] * (B @ B.T)
    return CouplingSet(**kw)


def random_hermitian_field(rng, grid, n):
    A = rng.normal(size=grid.shape + (n, n)) + 1j * rng.normal(size=grid.shape + (n, n))
    return A + np.swapaxes(A, -1, -2).conj()


@pytest.fixture
def grid():
    return PhaseGrid.box([(-3, 3), (-2, 2)], [12, 10])


@pytest.mark.parametrize("fields", [False, True])
@pytest.mark.parametrize("friction", [0.0, 0.4])
def test_compiled_matches_reference(rng, grid, fields, friction):
    c = random_couplings(rng, grid, fields=fields, friction=friction)
    rho = random_hermitian_field(rng, grid, c.n_q)
    ref = apply_continuous_generator((grid, rho), c)
    fast = ContinuousGenerator(grid, c)((grid, rho))
    assert np.max(np.abs(fast - ref)) < 1e-10 * np.max(np.abs(ref))


def test_compiled_matches_reference_commuting_operators(rng, grid):
    # diagonalizable working basis: L and the field Hamiltonian operator commute
    n = 4
    Q = qa.position(n)
    z = grid.mesh()
    c = CouplingSet(lindblads=[Q], hamiltonian=qa.oscillator_hamiltonian(n, 1.3), D0=[[0.7]],
                    D1=[[0.0], [-0.9]], drift00=np.stack([z[1], -z[0]], axis=-1), D2=np.diag([0.0, 0.8]),
                    friction=0.2, friction_axes=(1,), hamiltonian_terms=((0.9 * z[0], Q),))
    rho = random_hermitian_field(rng, grid, n)
    ref = apply_continuous_generator((grid, rho), c)
    fast = ContinuousGenerator(grid, c)((grid, rho))
    assert np.max(np.abs(fast - ref)) < 1e-10 * np.max(np.abs(ref))


def test_trace_conserved_and_hermiticity_preserved(rng, grid):
    c = random_couplings(rng, grid, fields=True, friction=0.3)
    rho = random_hermitian_field(rng, grid, c.n_q)
    R = apply_continuous_generator((grid, rho), c)
    assert abs(grid.integrate(np.trace(R, axis1=-2, axis2=-1))) < 1e-10 * np.max(np.abs(R))
    assert np.max(np.abs(R - np.swapaxes(R, -1, -2).conj())) < 1e-12 * np.max(np.abs(R))


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**31))
def test_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    grid = PhaseGrid.box([(-1, 1), (-1, 1)], [6, 6])
    c = random_couplings(rng, grid)
    x = rng.normal(size=grid.shape + (3, 3)) + 1j * rng.normal(size=grid.shape + (3, 3))
    y = rng.normal(size=grid.shape + (3, 3)) + 1j * rng.normal(size=grid.shape + (3, 3))
    lhs = apply_continuous_generator((grid, a * x + b * y), c)
    rhs = a * apply_continuous_generator((grid, x), c) + b * apply_continuous_generator((grid, y), c)
    assert np.allclose(lhs, rhs, atol=1e-10 * (1 + np.max(np.abs(lhs))))


def test_classical_limit_is_fokker_planck():
    # n_q = 1: drift-diffusion of a Gaussian against its analytic derivatives
    errs = []
    for N in (128, 256):
        grid = PhaseGrid.box([(-10, 10)], [N])
        z = grid.coords(0)
        v0, k, D = 0.4, -0.3, 0.25
        c = CouplingSet(lindblads=np.zeros((0, 1, 1)), hamiltonian=np.zeros((1, 1)), D0=np.zeros((0, 0)),
                        D1=np.zeros((1, 0)), drift00=(v0 + k * z)[:, None], D2=[[D]])
        g = np.exp(-z ** 2 / 2) / np.sqrt(2 * np.pi)
        R = apply_continuous_generator((grid, g[:, None, None]), c)[:, 0, 0]
        # -(v g)' + D g''
        exact = -(k * g + (v0 + k * z) * (-z * g)) + D * (z ** 2 - 1) * g
        errs.append(np.max(np.abs(R - exact)))
    assert errs[0] < 1e-2
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)


def test_backreaction_form_on_gaussian():
    # single coupling L = Q with moment -D1 on the momentum axis:
    # the term reads D1 d_p {Q, rho}
    n, D1 = 3, 0.8
    grid = PhaseGrid.box([(-6, 6), (-6, 6)], [64, 64])
    q, p = grid.mesh()
    Q = qa.position(n)
    sigma = qa.random_density(n, np.random.default_rng(1))
    g = np.exp(-(q ** 2 + p ** 2) / 2) / (2 * np.pi)
    rho = g[..., None, None] * sigma
    c = CouplingSet(lindblads=[Q], hamiltonian=np.zeros((n, n)), D0=[[0.0]], D1=[[0.0], [-D1]],
                    drift00=[0.0, 0.0], D2=np.zeros((2, 2)))
    R = apply_continuous_generator((grid, rho), c)
    exact = D1 * (-p * g)[..., None, None] * (Q @ sigma + sigma @ Q)
    h = grid.spacing[1]
    assert np.max(np.abs(R - exact)) < h ** 2 * np.max(np.abs(exact))


def test_dephasing_rate():
    grid = PhaseGrid.box([(0, 1)], [4])
    lam = 0.7
    L = qa.pauli_basis()[2] / np.sqrt(2)
    c = CouplingSet(lindblads=[L], hamiltonian=np.zeros((2, 2)), D0=[[lam]], D1=np.zeros((1, 1)),
                    drift00=[0.0], D2=[[0.0]])
    sigma = qa.projector(np.array([1, 1]) / np.sqrt(2))
    rho = np.broadcast_to(sigma, (4, 2, 2)) / grid.integrate(np.ones(4))
    R = apply_continuous_generator((grid, rho), c)
    assert np.allclose(R[..., 0, 1], -lam * rho[..., 0, 1])
    assert np.allclose(R[..., 0, 0], 0.0)


def test_hamiltonian_commutator(grid, rng):
    n = 3
    H = qa.random_hermitian(n, rng)
    c = CouplingSet(lindblads=np.zeros((0, n, n)), hamiltonian=H, D0=np.zeros((0, 0)), D1=np.zeros((2, 0)),
                    drift00=[0.0, 0.0], D2=np.zeros((2, 2)))
    rho = random_hermitian_field(rng, grid, n)
    R = apply_continuous_generator((grid, rho), c)
    assert np.allclose(R, -1j * (H @ rho - rho @ H))


@pytest.mark.parametrize("shift", [0.5, 1 + 1j])
def test_canonicalize_preserves_dynamics(rng, grid, shift):
    c = random_couplings(rng, grid)
    L = c.lindblads - np.trace(c.lindblads, axis1=1, axis2=2)[:, None, None] / c.n_q * np.eye(c.n_q)
    c = CouplingSet(lindblads=L + shift * np.eye(c.n_q), hamiltonian=c.hamiltonian, D0=c.D0, D1=c.D1,
                    drift00=c.drift00, D2=c.D2)
    cc = canonicalize(c)
    assert np.allclose(np.trace(cc.lindblads, axis1=1, axis2=2), 0.0)
    assert np.allclose(cc.D0, c.D0) and np.allclose(cc.D2, c.D2)
    rho = random_hermitian_field(rng, grid, c.n_q)
    a = apply_continuous_generator((grid, rho), c)
    b = apply_continuous_generator((grid, rho), cc)
    assert np.max(np.abs(a - b)) < 1e-11 * np.max(np.abs(a))


def test_hamiltonian_drift_harmonic():
    grid = PhaseGrid.box([(-2, 2), (-2, 2)], [8, 8])
    w = 1.7
    v = hamiltonian_drift(grid, lambda q, p: p ** 2 / 2 + w ** 2 * q ** 2 / 2)
    q, p = grid.mesh()
    assert np.allclose(v[..., 0], p)
    assert np.allclose(v[..., 1], -w ** 2 * q)


def test_structural_errors(rng):
    ok = dict(lindblads=[qa.position(2)], hamiltonian=np.zeros((2, 2)), D0=[[1.0]], D1=[[0.0]],
              drift00=[0.0], D2=[[1.0]])
    CouplingSet(**ok)
    with pytest.raises(CouplingError, match="positive semi-definite"):
        CouplingSet(**{**ok, "D0": [[-1.0]]})
    with pytest.raises(CouplingError, match="positive semi-definite"):
        CouplingSet(**{**ok, "D2": [[-0.5]]})
    with pytest.raises(CouplingError, match="Hermitian"):
        CouplingSet(**{**ok, "hamiltonian": [[0, 1], [0, 0]]})
    with pytest.raises(CouplingError, match="friction"):
        CouplingSet(**{**ok, "friction": -1.0})
    c = CouplingSet(**ok)
    with pytest.raises(CouplingError, match="dimensional"):
        apply_continuous_generator((PhaseGrid.box([(0, 1), (0, 1)], 4), np.zeros((4, 4, 2, 2))), c)


def test_accepts_hybrid_state(grid, rng):
    c = random_couplings(rng, grid)
    rho = qa.random_density(3, rng)
    s = HybridState(grid, np.broadcast_to(rho, grid.shape + (3, 3)) / grid.integrate(np.ones(grid.shape)))
    assert np.allclose(apply_continuous_generator(s, c), ContinuousGenerator(grid, c)(s))
