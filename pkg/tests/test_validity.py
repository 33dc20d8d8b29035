import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cqdyn import quantum_algebra as qa
from cqdyn.generator_continuous import CouplingSet
from cqdyn.generator_jump import JumpKernel, propagator
from cqdyn.phase_space import PhaseGrid
from cqdyn.validity import (BOUNDARY, CONTINUOUS, INVALID, JUMP, VALID, VIOLATES, MomentTable,
                            ValidityCertificate, block_matrix, cauchy_schwarz_test, check_block,
                            check_tradeoff, choi_cp_check, insert_transpose, pawula_scan)


def couplings(D0, D1, D2, n=2):
    D0 = np.atleast_2d(np.asarray(D0, complex))
    p = D0.shape[0]
    D2 = np.atleast_2d(np.asarray(D2, float))
    rng = np.random.default_rng(p)
    L = [qa.random_hermitian(n, rng) for _ in range(p)]
    return CouplingSet(lindblads=L, hamiltonian=np.zeros((n, n)), D0=D0,
                       D1=np.asarray(D1, complex).reshape(D2.shape[0], p),
                       drift00=np.zeros(D2.shape[0]), D2=D2)


def flagship(D2, D1=1.0, lam=1.0):
    return couplings([[lam]], [[0.0], [-D1]], np.diag([0.0, D2]))


@pytest.mark.parametrize("D2, verdict, margin", [(1.0, VALID, 1.0), (2.0, VALID, 3.0),
                                                 (0.5, BOUNDARY, 0.0), (0.25, INVALID, -0.5)])
def test_flagship_tradeoff(D2, verdict, margin):
    cert = check_tradeoff(flagship(D2))
    assert cert.verdict == verdict
    assert cert.schur_margin == pytest.approx(margin, abs=1e-12)
    assert cert.range_residual == 0.0


def test_decoupled_is_valid_not_boundary():
    cert = check_tradeoff(flagship(1.0, D1=0.0, lam=0.0))
    assert cert.verdict == VALID and cert.accepted


def test_range_condition():
    # no decoherence but non-zero back-reaction: invalid for any diffusion
    cert = check_tradeoff(couplings([[0.0]], [[1.0]], [[100.0]]))
    assert cert.range_residual == pytest.approx(1.0)
    assert cert.verdict == INVALID and cert.d0_rank_deficient


def test_rank_deficient_in_range():
    D0 = np.diag([1.0, 0.0])
    cert = check_tradeoff(couplings(D0, [[1.0, 0.0]], [[0.5]]))
    assert cert.d0_rank_deficient
    assert cert.range_residual == 0.0
    assert cert.schur_margin == pytest.approx(0.0, abs=1e-12)
    assert cert.verdict == BOUNDARY


def random_triple(rng, d, p, deficient):
    A = rng.normal(size=(p, p)) + 1j * rng.normal(size=(p, p))
    if deficient:
        A[:, 0] = 0
    D0 = A @ A.conj().T
    D1 = rng.normal(size=(d, p)) + 1j * rng.normal(size=(d, p))
    if deficient and rng.random() < 0.5:
        D1 = D1 @ D0 @ np.linalg.pinv(D0)
    B = rng.normal(size=(d, d))
    return D0, D1, rng.uniform(0.05, 2) * B @ B.T


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), d=st.integers(1, 3), p=st.integers(1, 3), deficient=st.booleans())
def test_schur_route_agrees_with_block_route(seed, d, p, deficient):
    rng = np.random.default_rng(seed)
    D0, D1, D2 = random_triple(rng, d, p, deficient)
    c = couplings(D0, D1, D2)
    cert = check_tradeoff(c)
    blk = check_block(c)
    if abs(cert.schur_margin) > 1e-6 and abs(blk) > 1e-6 and cert.range_residual < 1e-9 or cert.range_residual > 1e-6:
        assert cert.accepted == (blk >= -1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), s=st.floats(0.1, 10))
def test_margin_invariant_under_operator_rescaling(seed, s):
    # L -> L / s maps D1 -> s D1 and D0 -> s^2 D0
    rng = np.random.default_rng(seed)
    D0, D1, D2 = random_triple(rng, 2, 2, False)
    a = check_tradeoff(couplings(D0, D1, D2))
    b = check_tradeoff(couplings(s * s * D0, s * D1, D2))
    assert b.schur_margin == pytest.approx(a.schur_margin, rel=1e-7, abs=1e-9)
    assert a.verdict == b.verdict


def test_field_margin_located():
    grid = PhaseGrid.box([(-1, 1), (-1, 1)], [4, 4])
    q, _ = grid.mesh()
    D2 = np.zeros(grid.shape + (2, 2))
    D2[..., 1, 1] = 0.6 + 0.1 * q
    c = couplings([[1.0]], [[0.0], [-1.0]], np.diag([0.0, 1.0]))
    c = CouplingSet(lindblads=c.lindblads, hamiltonian=c.hamiltonian, D0=c.D0, D1=c.D1,
                    drift00=np.zeros(2), D2=D2)
    cert = check_tradeoff(c)
    assert cert.schur_margin == pytest.approx(2 * (0.6 - 0.1) - 1.0)
    assert cert.details["schur_margin_at"][0] == 0
    assert block_matrix(c).shape == (16, 3, 3)


def test_certificate_files(tmp_path):
    cert = check_tradeoff(flagship(1.0))
    txt, js = cert.write(tmp_path / "cert")
    data = json.loads(js.read_text())
    assert data["verdict"] == VALID and data["schur_margin"] == pytest.approx(1.0)
    assert "schur_margin" in txt.read_text()
    assert isinstance(cert, ValidityCertificate)


def test_moment_table_from_couplings_and_csv(tmp_path):
    c = flagship(1.3, D1=0.7, lam=0.9)
    t = MomentTable.from_couplings(c)
    assert t.get(0, (), 1, 1) == pytest.approx(0.9)
    assert t.get(1, (1,), 0, 1) == pytest.approx(-0.7)
    assert t.get(1, (1,), 1, 0) == pytest.approx(-0.7)
    assert t.get(2, (1, 1), 0, 0) == pytest.approx(1.3)
    assert t.get(2, (0, 1), 0, 0) == 0
    t.set(1, (0,), 0, 1, 0.2 + 0.3j, stderr=0.01)
    t.write_csv(tmp_path / "m.csv")
    r = MomentTable.read_csv(tmp_path / "m.csv", 2, 2)
    assert r.entries == t.entries
    assert r.error(1, (0,), 1, 0) == pytest.approx(0.01)
    assert r.hermiticity_error() == 0.0
    with pytest.raises(KeyError):
        t.get(3, (0, 0, 0), 0, 0)


def classical_table(values, max_order=4):
    t = MomentTable(1, 1, max_order)
    for n, v in values.items():
        t.set(n, (0,) * n, 0, 0, v)
    return t


def test_pawula_continuous_table():
    rep = pawula_scan(MomentTable.from_couplings(flagship(1.0)))
    assert rep.classification == CONTINUOUS and not rep.violations and rep.checked > 0


def test_pawula_flags_truncated_third_moment():
    rep = pawula_scan(classical_table({1: 0.1, 2: 0.5, 3: 0.2, 4: 0.0}))
    assert rep.classification == VIOLATES
    assert any(v.n == 1 and v.m == 1 for v in rep.violations)


def test_pawula_poisson_kernel_saturates():
    r, a = 2.0, 0.3
    from math import factorial
    rep = pawula_scan(classical_table({n: r * a ** n / factorial(n) for n in range(1, 5)}))
    assert rep.classification == JUMP and not rep.violations


def test_pawula_quantum_entry():
    # D1^{01} too large for D0 D2: fails the n = 0 inequality
    t = MomentTable.from_couplings(flagship(0.25))
    rep = pawula_scan(t)
    assert rep.classification == VIOLATES
    assert any(v.n == 0 and v.mu == 1 for v in rep.violations)


def test_pawula_rejects_non_hermitian():
    t = MomentTable(1, 2, 2)
    t.set(1, (0,), 0, 1, 1.0, hermitian=False)
    with pytest.raises(ValueError, match="Hermitian"):
        pawula_scan(t)


def test_cauchy_schwarz(rng):
    K, N = 3, 2
    A = rng.normal(size=(K, N, N)) + 1j * rng.normal(size=(K, N, N))
    T = A @ np.swapaxes(A, -1, -2).conj()
    assert cauchy_schwarz_test(T, trials=100, rng=rng).min_slack >= -1e-9
    bad = T.copy()
    bad[1] = np.diag([1.0, -1.0])
    with pytest.raises(ValueError, match="not positive"):
        cauchy_schwarz_test(bad)
    assert cauchy_schwarz_test(bad, trials=100, rng=rng, check_psd=False).min_slack < 0


def test_choi_valid_and_transpose_detected():
    W = np.zeros((2, 2, 2, 2))
    W[1, 0, 0, 0] = 0.8                                 # hop that keeps the quantum state
    W[0, 1, 1, 1] = 0.3
    k = JumpKernel([0.0, 1.0], [np.array([[0, 1], [0, 0]])], W)
    S = propagator(k, 0.5)
    cert = choi_cp_check(S, dt=0.5)
    assert cert.valid() and cert.normalization_residual < 1e-12
    bad = choi_cp_check(insert_transpose(S, 1, 0), dt=0.5)
    assert bad.min_eigenvalue < -1e-3
    assert bad.per_source[0] < 0 <= bad.per_source[1] + 1e-12


def test_choi_kraus_of_amplitude_damping():
    g = 0.36
    K0 = np.array([[1, 0], [0, np.sqrt(1 - g)]])
    K1 = np.array([[0, np.sqrt(g)], [0, 0]])
    S = sum(np.kron(K.conj(), K) for K in (K0, K1))
    cert = choi_cp_check(S)
    assert cert.valid()
    Ks = cert.kraus[(0, 0)]
    assert len(Ks) == 2
    rebuilt = sum(np.kron(K.conj(), K) for K in Ks)
    assert np.allclose(rebuilt, S)
