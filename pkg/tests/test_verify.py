import math

import numpy as np
import pytest
from scipy import linalg

from gharnack.exceptions import InvalidF
from gharnack.gsde import HamiltonianSystem
from gharnack.verify import (
    gaussian_exponential_moment,
    gradient_check,
    harnack_check,
    harnack_grid,
    harnack_test_function,
    invariant_check,
    lyapunov_covariance,
    oracle_mu0,
    phi_integrability_check,
    weak_solution_check,
)


def test_lyapunov_against_scipy():
    A = np.array([[0.0, 1.0], [-1.0, -1.0]])
    D = np.diag([0.0, 2.25])
    np.testing.assert_allclose(lyapunov_covariance(A, D),
                               linalg.solve_continuous_lyapunov(A, -D), atol=1e-14)


def test_oracle_mu0(params):
    np.testing.assert_allclose(oracle_mu0(params), 0.5 * np.eye(2), atol=1e-15)


def test_harnack_zero_shift_is_jensen(oscillator, params):
    r = harnack_check(oscillator, params, harnack_test_function, (0.0, 0.0), (0.0, 0.0), 2.0,
                      1.0, n_paths=4000)
    assert r.density_moment == 1.0
    assert r.lhs <= r.rhs_exact
    assert r.passed and r.min_constant == 0.0


def test_harnack_constant_f(oscillator, params):
    one = lambda x, y: 0 * x + 1.0
    r = harnack_check(oscillator, params, one, (0.0, 0.0), (0.3, 0.0), 2.0, 1.0, n_paths=1000)
    assert r.lhs == 1.0 and r.rhs_exact >= 1.0


def test_harnack_rejects_negative_f(oscillator, params):
    with pytest.raises(InvalidF):
        harnack_check(oscillator, params, lambda x, y: np.sin(x), (0, 0), (0.1, 0), 2.0, 1.0)
    with pytest.raises(ValueError):
        harnack_check(oscillator, params, harnack_test_function, (0, 0), (0.1, 0), 1.0, 1.0)


def test_harnack_example(oscillator, params):
    r = harnack_check(oscillator, params, harnack_test_function, (0.0, 0.0), (0.3, 0.0), 2.0,
                      1.0, n_paths=10_000)
    assert r.passed and math.isfinite(r.min_constant)
    assert r.rhs_sigma(r.min_constant) >= r.lhs * (1 - 1e-12)


def test_harnack_grid_small(oscillator, params):
    g = harnack_grid(oscillator, params, zs=[(1.0, -1.0)], h_norms=(0.3,), ps=(2.0, 4.0),
                     Ts=(1.0,), estimators=("mc_dictionary",), h_direction=(-1.0, 1.0),
                     n_paths=4000)
    assert g.all_exact_pass and g.sigma_form_pass and g.p_monotone
    assert g.fitted_constant > 0


def test_gradient_constant_f(oscillator, params):
    r = gradient_check(oscillator, params, lambda x, y: 0 * x + 2.0, (0, 0), 1.0,
                       n_paths=200, diagnostics=False)
    assert r.max_slope == 0.0 and r.fitted_C == 0.0


def test_log_density_shape(oscillator, params):
    r = gradient_check(oscillator, params, lambda x, y: np.tanh(y), (0, 0), 1.0, n_paths=2000,
                       f_sup=1.0)
    e = [row["e_log"] for row in r.log_density]
    assert e[0] > e[1] > e[2]
    assert abs(r.log_density_fit["intercept"]) < 0.1 * e[0]
    assert r.fitted_C > 0 and r.fitted_c_p > 0


def test_invariant_short_run(params):
    r = invariant_check(params, t_long=20.0, n_paths=2000, dt=0.01)
    assert r["means_within_3se"]
    assert r["mu0_discrepancy_factor"] == 2.0 and r["mu0_discrepancy_flag"]


def test_phi_inner_matches_closed_form(params):
    r = phi_integrability_check(2.0, (0.5, -0.2), 1.0, params, n_mc=8192)
    cmp = r["inner_mc_vs_closed_form"]
    np.testing.assert_allclose(cmp["mc"], cmp["closed_form"], rtol=0.02)
    assert r["inner_at_t_max"] > r["inner_at_s_min"]


def test_phi_large_s_tends_to_one(params):
    r = phi_integrability_check(2.0, (0.0, 0.0), 1.0, params, s_min=1e-2, t_max=1e3)
    assert r["inner_at_t_max"] == pytest.approx(1.0, abs=1e-3)


def test_phi_exponents(params):
    r = phi_integrability_check(2.0, (0.0, 0.0), 1.0, params)
    assert r["finite_on_interval"]
    assert r["ball_measure_exponent"] == pytest.approx(3.0, abs=0.05)
    assert r["inner_small_s_exponent"] == pytest.approx(3.0, abs=0.05)


@pytest.mark.parametrize("eps,finite", [(0.5, True), (0.9, True), (1.0, False), (1.5, False)])
def test_gaussian_threshold(eps, finite):
    r = gaussian_exponential_moment(lambda x, y: x, None, eps, 0.5)
    assert r["finite"] is finite
    if finite:
        assert r["value"] == pytest.approx((1 - eps) ** -0.5, rel=1e-6)


def test_weak_solution_bounded(params):
    system = HamiltonianSystem.damped_oscillator(b1_bar="sin(x)")
    r = weak_solution_check(system, 2.0, 2.0, params, n_paths=2000)
    assert r["finite"] and r["delta"] > 0
    k = params.sigma_lower ** -2 + params.sigma_upper ** 2
    assert r["t0"] == pytest.approx(2.0 / (2.0 * k) * 0.9)
