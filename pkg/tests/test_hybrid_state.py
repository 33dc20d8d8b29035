import json
import struct

import numpy as np
import pytest

from cqdyn import quantum_algebra as qa
from cqdyn.hybrid_state import (SNAPSHOT_MAGIC, DiscreteHybridState, HybridState, gaussian_profile,
                                load_snapshot, make_gaussian_product, mixture, save_snapshot)
from cqdyn.phase_space import PhaseGrid


@pytest.fixture
def grid():
    return PhaseGrid.box([(-4, 4), (-3, 3)], [40, 30])


def test_gaussian_product_normalized_and_centered(grid):
    h = np.array(grid.spacing)
    center = grid.coords(0)[23], grid.coords(1)[11]
    s = make_gaussian_product(grid, center, 4 * h, qa.projector(qa.ket(2, 0)))
    p = s.classical_marginal()
    assert s.total_trace() == pytest.approx(1.0, abs=1e-8)
    assert np.unravel_index(np.argmax(p), p.shape) == (23, 11)
    means, _ = s.moments()
    assert np.allclose(means, center, atol=h.max() ** 2)


def test_under_resolved_width_rejected(grid):
    with pytest.raises(ValueError, match="under-resolved"):
        gaussian_profile(grid, [0, 0], 1.5 * np.array(grid.spacing))


def test_sigma_checks(grid):
    with pytest.raises(ValueError, match="unit trace"):
        make_gaussian_product(grid, [0, 0], None, np.eye(2))
    with pytest.raises(ValueError, match="positive"):
        make_gaussian_product(grid, [0, 0], None, np.diag([1.5, -0.5]))


def test_zero_state(grid):
    s = HybridState(grid, np.zeros(grid.shape + (2, 2)))
    assert np.array_equal(s.classical_marginal(), np.zeros(grid.shape))
    assert s.total_trace() == 0.0


def test_random_state_marginal_nonnegative(grid, rng):
    rho = np.array([qa.random_density(3, rng) for _ in range(grid.size)]).reshape(grid.shape + (3, 3))
    s = HybridState(grid, rho / grid.integrate(np.ones(grid.shape)))
    assert s.classical_marginal().min() >= -1e-12
    assert s.min_eigenvalue() >= -1e-12


def test_product_state_quantum_marginal(grid, rng):
    sigma = qa.random_density(3, rng)
    s = make_gaussian_product(grid, [0, 0], None, sigma)
    assert np.allclose(s.quantum_marginal(), sigma, atol=1e-12)
    assert np.trace(s.quantum_marginal()).real == pytest.approx(1.0, abs=1e-8)


def test_two_lobes_quantum_marginal(grid):
    a = make_gaussian_product(grid, [-2, 0], None, qa.projector(qa.ket(2, 0)))
    b = make_gaussian_product(grid, [2, 0], None, qa.projector(qa.ket(2, 1)))
    s = mixture([a, b], [0.3, 0.7])
    assert np.allclose(s.quantum_marginal(), np.diag([0.3, 0.7]), atol=1e-12)


def test_marginals_commute_with_mixtures(grid, rng):
    a = make_gaussian_product(grid, [-1, 0], None, qa.random_density(2, rng))
    b = make_gaussian_product(grid, [1, 1], None, qa.random_density(2, rng))
    s = mixture([a, b], [0.25, 0.75])
    assert np.allclose(s.classical_marginal(), 0.25 * a.classical_marginal() + 0.75 * b.classical_marginal())
    assert np.allclose(s.quantum_marginal(), 0.25 * a.quantum_marginal() + 0.75 * b.quantum_marginal())


def test_shape_validation(grid):
    with pytest.raises(ValueError):
        HybridState(grid, np.zeros((3, 3, 2, 2)))
    with pytest.raises(ValueError):
        DiscreteHybridState(np.zeros(3), np.zeros((2, 2, 2)))


def test_snapshot_layout_and_round_trip(tmp_path, grid, rng):
    rho = np.array([qa.random_density(2, rng) for _ in range(grid.size)]).reshape(grid.shape + (2, 2))
    s = HybridState(grid, rho, time=1.25)
    path = tmp_path / "s.cqs"
    save_snapshot(path, s)
    raw = path.read_bytes()
    assert raw.startswith(SNAPSHOT_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    assert header["n_q"] == 2 and header["time"] == 1.25
    data = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    # interleaved real/imag, grid-major then row-major matrix entries
    assert data[0] == rho[0, 0, 0, 0].real and data[1] == rho[0, 0, 0, 0].imag
    assert data[2] == rho[0, 0, 0, 1].real
    back = load_snapshot(path)
    assert back.grid == grid and back.time == 1.25
    assert np.array_equal(back.rho, rho)


def test_snapshot_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"notasnapshot")
    with pytest.raises(ValueError, match="not a snapshot"):
        load_snapshot(p)


def test_marginal_csv(tmp_path, grid):
    s = make_gaussian_product(grid, [0, 0], None, qa.projector(qa.ket(2, 0)))
    path = tmp_path / "m.csv"
    s.write_marginal_csv(path)
    text = path.read_bytes()
    assert b"\r" not in text
    lines = text.decode().splitlines()
    assert lines[0] == "z1,z2,p,min_eig,purity"
    assert len(lines) == grid.size + 1


def test_discrete_state_diagnostics():
    rho = np.zeros((2, 2, 2), complex)
    rho[0] = 0.4 * qa.projector(qa.ket(2, 0))
    rho[1] = 0.6 * qa.projector(qa.ket(2, 1))
    s = DiscreteHybridState([0.0, 1.0], rho)
    assert s.total_trace() == pytest.approx(1.0)
    means, var = s.moments()
    assert means[0] == pytest.approx(0.6)
    assert var[0] == pytest.approx(0.24)
    assert np.allclose(s.quantum_marginal(), np.diag([0.4, 0.6]))
