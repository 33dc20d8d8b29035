import math

import numpy as np
import pytest
from scipy.linalg import expm

from cqdyn import quantum_algebra as qa
from cqdyn.generator_continuous import ContinuousGenerator
from cqdyn.hybrid_state import DiscreteHybridState
from cqdyn.integrator import (StabilityError, TruncationWarning, evolve, make_evolver,
                              stability_bound)
from cqdyn.phase_space import PhaseGrid
from cqdyn.scenarios import classical_fokker_planck, ornstein_uhlenbeck, oscillator_pair, qubit_dephasing


def discrete(rho):
    rho = np.asarray(rho, complex)
    return DiscreteHybridState(np.arange(rho.shape[0], dtype=float), rho)


def test_zero_generator_leaves_state(rng):
    s = discrete([qa.random_density(3, rng) / 2 for _ in range(2)])
    tr = evolve(s, lambda r: np.zeros_like(r), 1.0, 0.1)
    assert tr.steps == 10 and np.array_equal(tr.final.rho, s.rho)
    assert np.all(tr.log.column("trace_err") == 0)


def test_zero_duration_returns_initial(rng):
    s = discrete([qa.random_density(2, rng)])
    tr = evolve(s, lambda r: -r, 0.0, 0.1)
    assert tr.steps == 0 and len(tr.log) == 1 and np.array_equal(tr.final.rho, s.rho)


def test_dephasing_coherence_decay():
    lam, T = 0.8, 3.0
    c, s = qubit_dephasing(lam)
    tr = evolve(s, ContinuousGenerator(s.grid, c), T, 0.01)
    r0, r1 = s.quantum_marginal(), tr.final.quantum_marginal()
    assert abs(r1[0, 1]) == pytest.approx(abs(r0[0, 1]) * math.exp(-lam * T), rel=1e-8)
    assert r1[0, 0].real == pytest.approx(r0[0, 0].real, abs=1e-13)


def test_ou_variance():
    gamma, D = 0.5, 0.5
    c, s = ornstein_uhlenbeck(gamma, D)
    T = 3 / gamma
    tr = evolve(s, ContinuousGenerator(s.grid, c), T, snapshot_stride=10**6)
    var0 = tr.log.column("var_1")[0]
    exact = D / gamma * (1 - math.exp(-2 * gamma * T)) + var0 * math.exp(-2 * gamma * T)
    assert tr.log.column("var_1")[-1] == pytest.approx(exact, rel=0.01)
    assert tr.log.column("trace_err").max() < 1e-10


def test_rk4_fourth_order(rng):
    A = rng.normal(size=(4, 4))
    M = A - A.T - 0.5 * np.eye(4)               # stable linear flow on the 2x2 entries
    def f(r):
        return (M @ r.reshape(-1, 4).T).T.reshape(r.shape)
    s = discrete([np.eye(2) / 2])
    exact = (expm(M) @ s.rho.reshape(4)).reshape(1, 2, 2)
    errs = [np.max(np.abs(evolve(s, f, 1.0, dt, min_eig_stride=0).final.rho - exact)) for dt in (0.1, 0.05)]
    assert errs[0] / errs[1] == pytest.approx(16, rel=0.1)


def test_step_above_bound_refused():
    c, s = ornstein_uhlenbeck()
    g = ContinuousGenerator(s.grid, c)
    b = stability_bound(s.grid, c)
    with pytest.raises(StabilityError, match="stability bound"):
        evolve(s, g, 1.0, 1.01 * b)
    assert evolve(s, g, 5 * b, b).steps == 5


def test_diffusion_bound_scales_with_h_squared():
    c1, s1 = classical_fokker_planck([0.0], [[1.0]], PhaseGrid.box([(-4, 4)], [64]))
    c2, s2 = classical_fokker_planck([0.0], [[1.0]], PhaseGrid.box([(-4, 4)], [128]))
    b1 = stability_bound(s1.grid, c1, detail=True)[1]["diffusion"]
    b2 = stability_bound(s2.grid, c2, detail=True)[1]["diffusion"]
    assert b1 / b2 == pytest.approx(4.0)


def test_non_finite_aborts(rng):
    s = discrete([np.eye(2) / 2])
    with np.errstate(over="ignore", invalid="ignore"):
        tr = evolve(s, lambda r: 1e200 * r * np.abs(r) ** 2 + 1e300 * r, 1.0, 0.1, check_stability=False)
    assert tr.aborted and "non-finite" in tr.abort_reason
    assert np.all(np.isfinite(tr.final.rho))


def test_stop_below():
    s = discrete([np.eye(2) / 2])
    drive = np.diag([-1.0, 1.0]).astype(complex)
    tr = evolve(s, lambda r: np.broadcast_to(drive, r.shape).copy(), 2.0, 0.01, stop_below=-0.105)
    assert not tr.aborted
    assert tr.final.time == pytest.approx(0.61, abs=1e-9)
    assert tr.log.column("min_eig")[-1] < -0.105


def test_snapshot_cadence():
    c, s = qubit_dephasing()
    tr = evolve(s, ContinuousGenerator(s.grid, c), 1.0, 0.05, snapshot_stride=5)
    assert [round(x.time, 10) for x in tr.snapshots] == [0.0, 0.25, 0.5, 0.75, 1.0]
    tr = evolve(s, ContinuousGenerator(s.grid, c), 1.0, 0.05, keep_snapshots=False)
    assert len(tr.snapshots) == 1 and tr.snapshots[0] is tr.final


def test_clip_negative_keeps_psd():
    s = discrete([np.eye(2) / 2])
    drive = np.diag([-1.0, 1.0]).astype(complex)
    tr = evolve(s, lambda r: np.broadcast_to(drive, r.shape).copy(), 1.0, 0.01, clip_negative=True)
    assert tr.log.column("min_eig").min() >= -0.011


def test_flagship_short_run_at_nine_tenths_bound():
    c, s = oscillator_pair()
    g = ContinuousGenerator(s.grid, c)
    dt = 0.9 * stability_bound(s.grid, c)
    tr = evolve(s, g, 15 * dt, dt, min_eig_stride=5)
    assert tr.steps == 15 and not tr.aborted
    assert tr.log.column("trace_err").max() < 1e-12
    assert np.nanmin(tr.log.column("min_eig")) > -1e-8


def test_truncation_warning():
    c, s = oscillator_pair(n_q=8, alpha=1.8, points=32)
    with pytest.warns(TruncationWarning, match="increase n_q"):
        tr = evolve(s, ContinuousGenerator(s.grid, c), 0.05, min_eig_stride=0)
    assert tr.warnings


def test_make_evolver_matches_evolve():
    c, s = qubit_dephasing()
    g = ContinuousGenerator(s.grid, c)
    a = make_evolver(g, 0.01)(s, 0.5)
    b = evolve(s, g, 0.5, 0.01).final
    assert np.array_equal(a.rho, b.rho)


def test_bad_arguments():
    c, s = qubit_dephasing()
    g = ContinuousGenerator(s.grid, c)
    with pytest.raises(ValueError, match="non-negative"):
        evolve(s, g, -1.0, 0.1)
    with pytest.raises(ValueError, match="positive"):
        evolve(s, g, 1.0, 0.0)
    with pytest.raises(ValueError, match="stability bound"):
        evolve(discrete([np.eye(2) / 2]), lambda r: r, 1.0)


@pytest.mark.slow
def test_flagship_ten_thousand_steps_nan_free():
    # reduced grid and truncation, same couplings; the full-size run takes half an hour
    c, s = oscillator_pair(n_q=8, points=32, alpha=0.5)
    dt = 0.9 * stability_bound(s.grid, c)
    with pytest.warns(TruncationWarning):
        tr = evolve(s, ContinuousGenerator(s.grid, c), 10_000 * dt, dt, min_eig_stride=0, diag_stride=100,
                    keep_snapshots=False)
    assert tr.steps == 10_000 and not tr.aborted
    assert np.all(np.isfinite(tr.final.rho))
    assert tr.log.column("trace_err").max() < 1e-9
