import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gharnack.exceptions import MissingStateSource, OutOfBand
from gharnack.gcore import (
    ConstantPolicy,
    FeedbackPolicy,
    GParams,
    PiecewiseConstantPolicy,
    TimeGrid,
    count_step_violations,
    g_normal_oracle,
    g_scalar,
    g_tilde_scalar,
    make_dictionary,
    make_policy,
    path_seeds,
    sample_driving,
    splitmix64,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_g_values(params):
    assert g_scalar(0.0, params) == 0.0
    assert g_scalar(1.0, params) == 2.0
    assert g_scalar(-1.0, params) == -0.5


def test_g_tilde_values(params):
    assert g_tilde_scalar(0.0, params) == 0.0
    assert g_tilde_scalar(1.0, params) == 0.5
    assert g_tilde_scalar(-1.0, params) == -0.125


def test_g_vectorised(params):
    out = g_scalar(np.array([-1.0, 0.0, 1.0]), params)
    np.testing.assert_array_equal(out, [-0.5, 0.0, 2.0])


def test_ellipticity_and_subadditivity_on_grid(params):
    a = np.linspace(-5, 5, 100)
    A, B = np.meshgrid(a, a, indexing="ij")
    ge = A >= B
    lhs = g_scalar(A, params) - g_scalar(B, params)
    assert np.all(lhs[ge] >= params.sigma_lower ** 2 / 2 * (A - B)[ge] - 1e-12)
    assert np.all(g_scalar(A + B, params) <= g_scalar(A, params) + g_scalar(B, params) + 1e-12)


@given(finite, finite)
def test_ellipticity_property(a, b):
    p = GParams(1.0, 2.0)
    hi, lo = max(a, b), min(a, b)
    assert g_scalar(hi, p) - g_scalar(lo, p) >= 0.5 * (hi - lo) - 1e-9 * (1 + abs(hi) + abs(lo))


@given(finite, finite)
def test_subadditivity_property(a, b):
    p = GParams(0.5, 3.0)
    tol = 1e-9 * (1 + abs(a) + abs(b))
    assert g_scalar(a + b, p) <= g_scalar(a, p) + g_scalar(b, p) + tol


@pytest.mark.parametrize("lo,hi", [(0.0, 1.0), (2.0, 1.0), (1.0, 1.0), (-1.0, 2.0)])
def test_band_validation(lo, hi):
    with pytest.raises(ValueError):
        GParams(lo, hi)


def test_g_normal_oracle(params):
    assert g_normal_oracle("square", 1.0, params) == 4.0
    assert g_normal_oracle("neg_square", 1.0, params) == -1.0
    assert g_normal_oracle("identity", 1.0, params) == 0.0
    assert math.isclose(g_normal_oracle("abs", 1.0, params), 2 * math.sqrt(2 / math.pi))


def test_time_grid_ends_exactly():
    g = TimeGrid(0.3, 7)
    assert g.times[0] == 0.0 and g.times[-1] == 0.3
    assert math.isclose(g.dt, 0.3 / 7)


def test_splitmix_reference_values():
    # first outputs of SplitMix64 seeded with 0 (published reference sequence)
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    np.testing.assert_array_equal(
        path_seeds(0, 0, 2), [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4])


def test_path_seeds_batch_split():
    np.testing.assert_array_equal(path_seeds(5, 0, 10)[4:], path_seeds(5, 4, 6))


def test_policies(params, unit_grid):
    assert make_policy(2.0, params, unit_grid).theta(0, 0.0) == 2.0
    with pytest.raises(OutOfBand):
        make_policy(3.0, params, unit_grid)
    alt = PiecewiseConstantPolicy([1.0, 2.0] * 32)
    make_policy(alt, params, unit_grid)
    assert alt.theta(0, 0.0) == 1.0 and alt.theta(1, 0.0) == 2.0
    with pytest.raises(OutOfBand):
        make_policy([1.0, 2.5], params, unit_grid)


def test_named_dictionary(params, unit_grid):
    d = make_dictionary(["lower", "upper", "mid", "bang-bang", "switch-down"], params,
                        unit_grid)
    assert [p.label for p in d] == ["lower", "upper", "mid", "bang-bang", "switch-down"]
    for p in d:
        vals = p.band_values()
        assert np.all((vals >= 1.0) & (vals <= 2.0))


def test_quadratic_variation_exact(params, unit_grid):
    d = sample_driving(ConstantPolicy(2.0), unit_grid, seed=1, n_paths=3)
    assert np.all(d.qv[:, -1] == 4.0)
    assert np.all(d.qvprime[:, -1] == 0.25)
    assert np.all(d.cross_variation() == 1.0)


def test_step_bounds_hold(params, unit_grid):
    for policy in make_dictionary(["lower", "upper", "mid", "bang-bang", "switch-up"],
                                  params, unit_grid):
        d = sample_driving(policy, unit_grid, seed=7, n_paths=200)
        assert count_step_violations(d, params) == 0


def test_martingale_mean(params, unit_grid):
    d = sample_driving(make_policy("bang-bang", params, unit_grid), unit_grid, 3, 100_000)
    b = d.b[:, -1]
    assert abs(b.mean()) <= 3 * b.std(ddof=1) / math.sqrt(b.size)


def test_realized_cross_variation_close_to_t(params):
    grid = TimeGrid(1.0, 1024)
    d = sample_driving(make_policy("mid", params, grid), grid, 11, 200)
    # per-path error has standard deviation sqrt(2 dt)
    assert np.max(np.abs(d.realized_cross_variation() - 1.0)) < 6 * math.sqrt(2 / 1024)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 64 - 1), st.integers(1, 5))
def test_sampling_is_deterministic(seed, n_paths):
    grid = TimeGrid(1.0, 16)
    policy = ConstantPolicy(1.5)
    a = sample_driving(policy, grid, seed, n_paths)
    b = sample_driving(policy, grid, seed, n_paths)
    np.testing.assert_array_equal(a.dw, b.dw)
    np.testing.assert_array_equal(a.db, b.db)


def test_feedback_needs_state(params, unit_grid):
    fb = FeedbackPolicy(np.array([0.0, 1.0]), np.array([-1.0, 1.0]), np.array([-1.0, 1.0]),
                        np.full((2, 2, 2), 2.0))
    with pytest.raises(MissingStateSource):
        sample_driving(fb, unit_grid, 0, 2)
