import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import solve_ivp

from conftest import piecewise_solution, random_stable_plant
from ncsfsp.discretize import (
    ContinuousPlant, cacc_plant, expm, forced_response_integral, jitter_plant_series, step_exact_update,
    step_matrices, zoh,
)


def test_expm_trivial():
    np.testing.assert_array_equal(expm(np.zeros((3, 3))), np.eye(3))
    assert expm([[-math.log(2)]])[0, 0] == pytest.approx(0.5, rel=1e-15)


def test_expm_rejects_nonsquare():
    with pytest.raises(ValueError):
        expm(np.zeros((2, 3)))


def test_expm_matches_ode_oracle():
    rng = np.random.default_rng(0)
    for _ in range(5):
        M = random_stable_plant(rng, 5, 1).A
        E = expm(M)
        for j in range(5):
            sol = solve_ivp(lambda t, y: M @ y, (0, 1), np.eye(5)[j], method="DOP853", rtol=1e-13, atol=1e-15)
            np.testing.assert_allclose(E[:, j], sol.y[:, -1], atol=1e-10)


def test_expm_large_norm_scaling():
    M = np.array([[0.0, 30.0], [-30.0, 0.0]])
    E = expm(M)
    np.testing.assert_allclose(E, [[math.cos(30), math.sin(30)], [-math.sin(30), math.cos(30)]], atol=1e-12)


def test_forced_integral_closed_forms():
    h = 0.37
    assert forced_response_integral([[0.0]], [1.0], 0, h, h)[0] == pytest.approx(h, rel=1e-14)
    assert forced_response_integral([[-1.0]], [1.0], 0, h, h)[0] == pytest.approx(1 - math.exp(-h), rel=1e-13)


def test_forced_integral_matches_gauss_quadrature():
    rng = np.random.default_rng(1)
    for _ in range(10):
        A = rng.normal(size=(4, 4))
        b = rng.normal(size=4)
        lo, hi = sorted(rng.uniform(0, 0.5, 2))
        at = hi + rng.uniform(0, 0.3)
        x, w = np.polynomial.legendre.leggauss(40)
        s = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
        ref = sum(wi * (expm(A * (at - si)) @ b) for wi, si in zip(w, s)) * 0.5 * (hi - lo)
        np.testing.assert_allclose(forced_response_integral(A, b, lo, hi, at), ref, rtol=1e-9, atol=1e-12)


def test_forced_integral_bounds_checked():
    with pytest.raises(ValueError):
        forced_response_integral([[0.0]], [1.0], 1.0, 0.5, 1.0)


def test_integrator_areas():
    p = ContinuousPlant([[0.0]], [[1.0]], [[0.0]])
    sm = step_matrices(p, 0.1, [0.04])
    assert sm.A[0, 0] == 1.0
    assert sm.B[0, 0] == pytest.approx(0.1, rel=1e-14)
    assert sm.BJ[0, 0] == pytest.approx(-0.04, rel=1e-13)


def test_offset_outside_interval_names_actuator():
    with pytest.raises(ValueError, match="actuator 1"):
        step_matrices(cacc_plant(0.5, 0.7), 0.1, [0.0, 0.1])


def test_conditioning_guard():
    with pytest.raises(ValueError, match="exceeds"):
        step_matrices(ContinuousPlant([[-1e5]], [[1.0]], [[0.0]]), 1.0, [0.0])


def test_zoh_degeneration_cacc_vs_ode():
    plant = cacc_plant(0.5, 0.7)
    sm = step_matrices(plant, 0.1, [0.0, 0.0])
    assert np.all(sm.BJ == 0)
    for j in range(2):
        x = piecewise_solution(plant.A, plant.B, np.zeros(3), 0.0, 0.1, [(0.0, j, 1.0)])
        np.testing.assert_allclose(sm.B[:, j], x, atol=1e-12)
    for i in range(3):
        x = piecewise_solution(plant.A, plant.B, np.eye(3)[i], 0.0, 0.1, [])
        np.testing.assert_allclose(sm.A[:, i], x, atol=1e-12)


def test_zoh_degeneration_closed_form():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = random_stable_plant(rng, 4, 2)
        T = rng.uniform(0.05, 0.5)
        sm = step_matrices(p, T, [0.0, 0.0])
        # block exponential [[A, B], [0, 0]] gives the classical pair
        M = np.zeros((6, 6))
        M[:4, :4], M[:4, 4:] = p.A * T, p.B * T
        E = expm(M)
        np.testing.assert_allclose(sm.A, E[:4, :4], atol=1e-10)
        np.testing.assert_allclose(sm.B, E[:4, 4:], atol=1e-10)
        np.testing.assert_array_equal(sm.BJ, 0)


@given(d1=st.floats(0.01, 0.5), d2=st.floats(0.01, 0.5))
def test_semigroup(d1, d2):
    p = cacc_plant(0.5, 0.7)
    z = [0.0, 0.0]
    A12 = step_matrices(p, d1 + d2, z).A
    np.testing.assert_allclose(A12, step_matrices(p, d2, z).A @ step_matrices(p, d1, z).A, atol=1e-10)


def test_step_update_independent_of_bj_when_input_constant():
    p = cacc_plant(0.5, 0.7)
    sm = step_matrices(p, 0.1, [0.03, 0.0])
    x, u = np.array([1.0, -2.0, 0.5]), np.array([0.3, -0.7])
    a = step_exact_update(p, sm, x, u, u)
    sm.BJ = sm.BJ * 17.0
    np.testing.assert_array_equal(a, step_exact_update(p, sm, x, u, u))
    assert np.all(step_exact_update(p, sm, np.zeros(3), np.zeros(2), np.zeros(2), np.zeros(2)) == 0)


def test_step_update_dimension_checks():
    p = cacc_plant(0.5, 0.7)
    sm = step_matrices(p, 0.1, [0.0, 0.0])
    with pytest.raises(ValueError):
        step_exact_update(p, sm, np.zeros(2), np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        step_exact_update(p, sm, np.zeros(3), np.zeros(2), np.zeros(2), np.zeros(3))


def oracle_suite(n_cases=100, seed=3):
    """Worst relative error of one-step updates against the event-split integrator."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        n, na = int(rng.integers(1, 5)), int(rng.integers(1, 3))
        p = random_stable_plant(rng, n, na, 2)
        T = rng.uniform(0.05, 0.3)
        s = rng.uniform(0, T, na)
        s[rng.integers(na)] = 0.0  # the earliest actuator defines a_k
        sm = step_matrices(p, T, s)
        x, u, u_prev, w = rng.normal(size=n), rng.normal(size=na), rng.normal(size=na), rng.normal(size=2)
        got = step_exact_update(p, sm, x, u, u_prev, w)
        sw = [(0.0, j, u_prev[j]) for j in range(na)] + [(s[j], j, u[j]) for j in range(na)]
        ref = piecewise_solution(p.A, p.B, x, 0.0, T, sorted(sw, key=lambda e: e[0]),
                                 p.Bw, w, 0.0)
        worst = max(worst, float(np.linalg.norm(got - ref) / max(np.linalg.norm(ref), 1e-12)))
    return worst


def test_one_step_updates_match_event_split_integrator():
    assert oracle_suite() < 1e-8


def test_jitter_plant_series_reduces_without_jitter():
    p = cacc_plant(0.5, 0.7)
    sm = step_matrices(p, 0.1, [0.0, 0.0])
    F, G = jitter_plant_series(sm)
    rng = np.random.default_rng(4)
    x, up, u = rng.normal(size=3), rng.normal(size=2), rng.normal(size=2)
    nxt = F @ np.concatenate([x, up]) + G @ u
    np.testing.assert_allclose(nxt[:3], sm.A @ x + sm.B @ u, atol=1e-14)
    np.testing.assert_array_equal(nxt[3:], u)


def test_jitter_plant_series_matches_compact_form():
    p = cacc_plant(0.5, 0.7)
    sm = step_matrices(p, 0.11, [0.0, 0.04])
    F, G = jitter_plant_series(sm)
    rng = np.random.default_rng(5)
    x, up, u = rng.normal(size=3), rng.normal(size=2), rng.normal(size=2)
    np.testing.assert_allclose((F @ np.concatenate([x, up]) + G @ u)[:3],
                               step_exact_update(p, sm, x, u, up), atol=1e-14)


def test_zoh_helper():
    A, B = zoh(cacc_plant(0.5, 0.7), 0.1)
    np.testing.assert_allclose(np.sort(np.linalg.eigvals(A).real), [math.exp(-0.2), 1, 1], atol=1e-7)
