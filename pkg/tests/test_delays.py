import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import piecewise_solution, random_stable_plant
from ncsfsp.delays import (
    DelayLineSystems, ShiftRegister, WarmupError, assemble_delayed_measurement, decompose_all,
    decompose_delay, fractional_gains, sample_step_draws, selection_matrix,
)
from ncsfsp.discretize import ContinuousPlant
from ncsfsp.timing import TimingTrace, generate_trace, max_integer_delay, case_study_timing


def grid_trace(D, K=8, period=0.1, offsets=(0.0,)):
    a = np.arange(K) * period + 1.0
    aj = a[:, None] + np.asarray(offsets)[None, :]
    t = (a[:, None] - np.atleast_1d(D)[None, :])
    return TimingTrace(t, aj)


@pytest.mark.parametrize("D, N, d", [(0.04, 1, 0.06), (0.25, 3, 0.05), (0.1, 1, 0.0)])
def test_decomposition_examples(D, N, d):
    dec = decompose_delay(grid_trace([D]), 6, 0)
    assert int(dec.N[0]) == N
    assert dec.d[0] == pytest.approx(d, abs=1e-12)


def test_decomposition_needs_history():
    with pytest.raises(WarmupError, match="warm-up"):
        decompose_delay(grid_trace([0.25]), 1, 0)


def test_decomposition_identity_over_long_traces():
    cfg = case_study_timing()
    worst = 0.0
    steps = 0
    for seed in range(3):
        tr = generate_trace(cfg, 34_000, seed)
        L = max_integer_delay(cfg)
        N, d = decompose_all(tr, start=L + 1)
        a, D = tr.a, tr.delays
        k = np.arange(L + 1, tr.K)
        for i in range(tr.sensing.shape[1]):
            Ni = N[k, i]
            recon = a[k] - a[k - Ni] - d[k, i]
            worst = max(worst, float(np.max(np.abs(recon - D[k, i]))))
            # 0 <= d < Delta a_{k-N+1}
            assert (d[k, i] >= 0).all() and (d[k, i] < a[k - Ni + 1] - a[k - Ni]).all()
            assert (Ni >= 1).all()
        steps += k.size
    assert steps >= 100_000
    assert worst < 1e-12


def test_scenario_indicator_definition():
    tr = generate_trace(case_study_timing(), 400, 4)
    s = tr.actuator_offsets
    for k in range(10, 400, 37):
        dec = decompose_delay(tr, k)
        for i in range(3):
            m = k - int(dec.N[i])
            for j in range(2):
                expect = tr.a[m] + dec.d[i] < tr.actuation[m, j]
                assert dec.p[i, j] == int(expect)
                assert (dec.d[i] < s[m, j]) == expect


def test_selection_matrix_basics():
    reg = ShiftRegister(3, 1)
    for v in (1, 2, 3, 4, 5):
        reg.step([v])
    assert reg.select(1)[0] == 5
    assert reg.select(2)[0] == 4
    with pytest.raises(ValueError):
        selection_matrix(reg, 0)
    with pytest.raises(ValueError):
        selection_matrix(reg, 4)


def test_register_nilpotent_and_state_equation():
    reg = ShiftRegister(4, 2)
    A, B = reg.A, reg.B
    assert np.any(np.linalg.matrix_power(A, 3))
    assert not np.any(np.linalg.matrix_power(A, 4))
    rng = np.random.default_rng(0)
    x = np.zeros(8)
    for _ in range(6):
        v = rng.normal(size=2)
        x = A @ x + B @ v
        reg.step(v)
        np.testing.assert_array_equal(x, reg.state)


@given(st.lists(st.integers(1, 6), min_size=20, max_size=200), st.integers(0, 10 ** 6))
def test_register_matches_ring_buffer(pattern, seed):
    rng = np.random.default_rng(seed)
    reg = ShiftRegister(6, 2)
    history = []
    for N in pattern:
        v = rng.normal(size=2)
        reg.step(v)
        history.append(v)
        if len(history) >= N:
            np.testing.assert_array_equal(reg.select(N), history[-N])


def _integrator_trace(offset2, d):
    # two actuators, second one offset; sensor delay gives advancement d
    return grid_trace([0.1 - d], K=6, offsets=(0.0, offset2))


def test_fractional_gains_pre_switch_scenario():
    p = ContinuousPlant([[0.0]], [[1.0, 1.0]], [[0.0]])
    g = fractional_gains(p, _integrator_trace(0.04, 0.03), 4, 0)
    assert g.minus[0, 1] == pytest.approx(0.03, abs=1e-12)
    assert g.plus[0, 1] == pytest.approx(0.0, abs=1e-12)
    assert g.minus[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert g.plus[0, 0] == pytest.approx(0.03, abs=1e-12)
    assert g.propagator[0, 0] == 1.0


def test_fractional_gains_split_scenario():
    p = ContinuousPlant([[0.0]], [[1.0, 1.0]], [[0.0]])
    g = fractional_gains(p, _integrator_trace(0.02, 0.05), 4, 0)
    assert g.minus[0, 1] == pytest.approx(0.02, abs=1e-12)
    assert g.plus[0, 1] == pytest.approx(0.03, abs=1e-12)


def test_fractional_gains_zero_advancement():
    p = random_stable_plant(np.random.default_rng(1), 2, 1)
    tr = grid_trace([0.2, 0.2], K=6)
    g = fractional_gains(p, tr, 4, 0)
    assert not g.minus.any() and not g.plus.any()
    np.testing.assert_array_equal(g.propagator, np.eye(2))


def _scenario(rng, plant, cfg, K):
    tr = generate_trace(cfg, K, int(rng.integers(2 ** 31)))
    x0 = rng.normal(size=plant.n)
    U = rng.normal(size=(K, plant.n_inputs))
    switches = [(tr.actuation[k, j], j, U[k, j]) for k in range(K) for j in range(plant.n_inputs)]
    return tr, x0, U, sorted(switches, key=lambda e: e[0])


def delayed_measurement_error(n_cases=100, seed=7):
    cfg = case_study_timing()
    L = max_integer_delay(cfg)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        plant = random_stable_plant(rng, 3, 2)
        K = L + 4
        tr, x0, U, sw = _scenario(rng, plant, cfg, K)
        xs = [piecewise_solution(plant.A, plant.B, x0, 0.0, tr.a[k], sw) for k in range(K)]
        lines = DelayLineSystems(3, 2, L)
        k = K - 1
        for m in range(k):
            lines.step(xs[m], U[m])
        dec = decompose_delay(tr, k)
        gains = [fractional_gains(plant, tr, k, i) for i in range(3)]
        xL = assemble_delayed_measurement(lines, dec, gains)
        truth = np.array([piecewise_solution(plant.A, plant.B, x0, 0.0, tr.sensing[k, i], sw)[i]
                          for i in range(3)])
        worst = max(worst, float(np.max(np.abs(xL - truth)) / max(1.0, np.max(np.abs(truth)))))
    return worst


def test_delayed_measurement_matches_continuous_oracle():
    assert delayed_measurement_error() < 1e-7


def test_equilibrium_invariance():
    # integrator chain at rest with constant zero input: x^L equals the equilibrium
    plant = ContinuousPlant([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], [[0.0], [0.0]])
    tr = grid_trace([0.13, 0.27], K=8)
    lines = DelayLineSystems(2, 1, 4)
    xe = np.array([2.5, 0.0])
    for _ in range(7):
        lines.step(xe, [0.0])
    dec = decompose_delay(tr, 7)
    gains = [fractional_gains(plant, tr, 7, i) for i in range(2)]
    np.testing.assert_allclose(assemble_delayed_measurement(lines, dec, gains), xe, atol=1e-14)


def test_fractional_limits():
    """d -> 0 recovers x_{k-N}; d -> Delta a recovers x_{k-N+1}."""
    rng = np.random.default_rng(3)
    plant = random_stable_plant(rng, 1, 1)
    U = rng.normal(size=10)
    x = [rng.normal(size=1)]
    for k in range(9):
        x.append(plant.A @ x[-1] * 0 + piecewise_solution(plant.A, plant.B, x[-1], 0, 0.1, [(0.0, 0, U[k])]))
    for D, target in ((0.2 - 1e-9, 7), (0.1 + 1e-9, 8)):
        tr = grid_trace([D], K=10)
        lines = DelayLineSystems(1, 1, 4)
        for m in range(9):
            lines.step(x[m], [U[m]])
        dec = decompose_delay(tr, 9)
        xL = assemble_delayed_measurement(lines, dec, [fractional_gains(plant, tr, 9, 0)])
        np.testing.assert_allclose(xL, x[target], atol=1e-6)


def test_assembly_rejects_too_deep_delay():
    lines = DelayLineSystems(1, 1, 2)
    tr = grid_trace([0.35], K=8)
    plant = ContinuousPlant([[0.0]], [[1.0]], [[0.0]])
    dec = decompose_delay(tr, 7)
    with pytest.raises(WarmupError):
        assemble_delayed_measurement(lines, dec, [fractional_gains(plant, tr, 7, 0)])


def test_step_draws_respect_bound():
    cfg = case_study_timing()
    plant = random_stable_plant(np.random.default_rng(0), 3, 2)
    L = max_integer_delay(cfg)
    dr = sample_step_draws(plant, cfg, 2000, np.random.default_rng(1), L)
    assert dr.N.min() >= 1 and dr.N.max() <= L
    assert len(dr) == 2000 and len(dr.subset(slice(0, 5))) == 5
    with pytest.raises(WarmupError):
        sample_step_draws(plant, cfg, 2000, np.random.default_rng(1), 1)
