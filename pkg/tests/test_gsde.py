import math

import numpy as np
import pytest

from gharnack.exceptions import AssumptionViolation
from gharnack.gcore import ConstantPolicy, TimeGrid, make_dictionary, make_policy, wiener_increments
from gharnack.gsde import (
    HamiltonianSystem,
    euler_simulate,
    mc_expectation,
    semigroup_sup,
    semigroup_values,
    simulate,
)
from gharnack.gcore import driving_from_noise, open_loop_thetas


def square_y(x, y):
    return y * y


def test_requires_noise_reaching_position():
    with pytest.raises(AssumptionViolation):
        HamiltonianSystem(A=0.0, M=0.0, Q=1.0)
    with pytest.raises(AssumptionViolation):
        HamiltonianSystem(A=0.0, M=1.0, Q=0.0)


def test_step_guard(flat_system):
    system = HamiltonianSystem(A=0.0, M=1.0, Q=1.0, K=8.0)
    with pytest.raises(AssumptionViolation, match="n_steps"):
        simulate(system, ConstantPolicy(1.0), (0, 0), TimeGrid(1.0, 16), 2, 0)


def test_zero_noise_flow(flat_system, unit_grid):
    dw = np.zeros((1, unit_grid.n_steps))
    driving = driving_from_noise(dw, np.ones_like(dw), unit_grid)
    path = euler_simulate(flat_system, driving, (1.0, 2.0))
    assert path.x[0, -1] == pytest.approx(3.0, abs=1e-12)
    assert path.y[0, -1] == 2.0


def test_y_martingale(flat_system, unit_grid):
    state, _ = simulate(flat_system, make_policy("bang-bang", _p(), unit_grid), (0.0, 0.5),
                        unit_grid, 100_000, 3)
    y = state.final[1]
    assert abs(y.mean() - 0.5) <= 3 * y.std(ddof=1) / math.sqrt(y.size)


def _p():
    from gharnack.gcore import GParams
    return GParams(1.0, 2.0)


def test_constant_f_exact(flat_system, unit_grid):
    r = mc_expectation(flat_system, ConstantPolicy(2.0), lambda x, y: 0.0 * x + 3.0, (0, 0),
                       unit_grid, 100, 0)
    assert r.mean == 3.0 and r.se == 0.0


@pytest.mark.parametrize("gamma,expected", [(2.0, 4.0), (1.0, 1.0)])
def test_gbm_variance(flat_system, unit_grid, gamma, expected):
    r = mc_expectation(flat_system, ConstantPolicy(gamma), square_y, (0, 0), unit_grid,
                       100_000, 1)
    assert abs(r.mean - expected) <= 3 * r.se


def test_semigroup_oracles(flat_system, unit_grid, params):
    dic = make_dictionary(["lower", "upper", "bang-bang"], params, unit_grid)
    up = semigroup_sup(flat_system, dic, square_y, (0, 0), unit_grid, 100_000, 2)
    assert abs(up.value - 4.0) <= 3 * up.se
    assert up.per_control[up.argmax].label == "upper"
    down = semigroup_sup(flat_system, dic, lambda x, y: -y * y, (0, 0), unit_grid, 100_000, 2)
    assert abs(down.value + 1.0) <= 3 * down.se
    assert down.per_control[down.argmax].label == "lower"


def test_constant_semigroup(flat_system, unit_grid, params):
    dic = make_dictionary(["lower", "upper"], params, unit_grid)
    r = semigroup_sup(flat_system, dic, lambda x, y: 0 * x + 1.5, (1, 1), unit_grid, 50, 0)
    assert r.value == 1.5


def test_dictionary_monotone_exactly(oscillator, params, unit_grid):
    f = lambda x, y: np.sin(x) * np.cos(y)
    small = make_dictionary(["upper", "mid"], params, unit_grid)
    large = make_dictionary(["upper", "mid", "lower", "bang-bang", "switch-up"], params,
                            unit_grid)
    a = semigroup_sup(oscillator, small, f, (0.3, -0.2), unit_grid, 5000, 9)
    b = semigroup_sup(oscillator, large, f, (0.3, -0.2), unit_grid, 5000, 9)
    assert b.value >= a.value


def test_sublinear(oscillator, params, unit_grid):
    dic = make_dictionary(["lower", "upper", "bang-bang"], params, unit_grid)
    f = lambda x, y: np.cos(y)
    g = lambda x, y: x * x / (1 + x * x) - np.cos(y)
    vals = [semigroup_sup(oscillator, dic, fn, (0, 0), unit_grid, 20_000, 4)
            for fn in (lambda x, y: f(x, y) + g(x, y), f, g)]
    se = math.sqrt(sum(v.se ** 2 for v in vals))
    assert vals[0].value <= vals[1].value + vals[2].value + 3 * se


def test_batching_does_not_change_values(oscillator, params, unit_grid):
    dic = make_dictionary(["lower", "bang-bang"], params, unit_grid)
    f = [lambda x, y: x + y]
    a = semigroup_values(oscillator, dic, f, (0, 0), unit_grid, 300, 5, batch_size=300)
    b = semigroup_values(oscillator, dic, f, (0, 0), unit_grid, 300, 5, batch_size=7)
    np.testing.assert_array_equal(a, b)


def test_weak_error_order(flat_system):
    """Euler bias of E[X_T^2] for the zero-drift system, measured against a
    fine-grid path built from the same Brownian increments.

    Under theta = 2, X_T = 2 int_0^1 W ds, so E X_T^2 = 4/3; the left-point
    Riemann sum has bias -4 (3n - 1) / (6 n^2).
    """
    T, n_fine, n_paths, theta = 1.0, 2 ** 14, 4000, 2.0
    fine = TimeGrid(T, n_fine)
    dw = wiener_increments(fine, 21, n_paths)
    policy = ConstantPolicy(theta)
    ref_state, _ = simulate(flat_system, policy, (0, 0), fine, n_paths, 0, dw=dw)
    ref = ref_state.final[0] ** 2
    assert abs(ref.mean() - 4 / 3) <= 3 * ref.std(ddof=1) / math.sqrt(n_paths)
    errors = []
    for e in range(6, 11):
        n = 2 ** e
        grid = TimeGrid(T, n)
        coarse = dw.reshape(n_paths, n, n_fine // n).sum(axis=2)
        state, _ = simulate(flat_system, policy, (0, 0), grid, n_paths, 0, dw=coarse)
        diff = state.final[0] ** 2 - ref
        errors.append(abs(diff.mean()))
        exact_bias = -theta ** 2 * ((3 * n - 1) / (6 * n * n) - (3 * n_fine - 1) / (6 * n_fine ** 2))
        assert diff.mean() == pytest.approx(exact_bias, rel=0.1)
    orders = [math.log2(a / b) for a, b in zip(errors, errors[1:])]
    assert min(orders) >= 0.9


def test_no_explosion_within_guard(oscillator, params):
    grid = TimeGrid(2.0, math.ceil(2.0 / oscillator.max_dt()))
    for policy in make_dictionary(["lower", "upper"], params, grid):
        state, _ = simulate(oscillator, policy, (4.0, -4.0), grid, 100_000, 8)
        assert np.all(np.isfinite(state.x)) and np.all(np.isfinite(state.y))


def test_lipschitz_check(oscillator):
    r = oscillator.check_lipschitz()
    assert r["ok"] and r["grid_estimate"] == pytest.approx(math.sqrt(2))


def test_feedback_simulation_matches_open_loop(oscillator, params, unit_grid):
    from gharnack.gcore import FeedbackPolicy
    fb = FeedbackPolicy(np.array([0.0, 1.0]), np.linspace(-9, 9, 5), np.linspace(-9, 9, 5),
                        np.full((2, 5, 5), 2.0))
    a, _ = simulate(oscillator, fb, (0.1, 0.1), unit_grid, 10, 4)
    b, _ = simulate(oscillator, ConstantPolicy(2.0), (0.1, 0.1), unit_grid, 10, 4)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)
