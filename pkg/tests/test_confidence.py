import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cbfbandit.confidence import (
    BetaSchedule, ConfidenceParams, beta_n, beta_noise_scales, candidate_grid, hdot_bounds, info_gain_greedy,
    info_gain_table, log_det_gain, rkhs_norm_estimate,
)
from cbfbandit.gp import GpPosterior, Measurement

from oracles import greedy_gain_scan
from synthetic import ContainmentProblem, kernel_expansion, realized_gain_gap, synthetic_kernel


def test_beta_formula():
    p = ConfidenceParams([0.5, 2.0], [0.1, 0.1], 0.05)
    expected = 2.0 + 0.1 * np.sqrt(2 * (3.0 + 1 + np.log(2 / 0.05)))
    assert beta_n(p, [3.0, 3.0]) == pytest.approx(expected, rel=1e-14)
    with pytest.raises(ValueError):
        beta_n(p, [-1.0, 0.0])
    with pytest.raises(ValueError):
        ConfidenceParams([1.0], [0.1], 1.0)


def test_beta_noise_scales():
    np.testing.assert_array_equal(beta_noise_scales([0.1, 0.2], [0.1, 0.1]), [1.0, 2.0])
    np.testing.assert_array_equal(beta_noise_scales([0.1, 0.2], 0.3, "raw"), [0.3, 0.3])
    with pytest.raises(ValueError):
        beta_noise_scales([0.1], [0.0])
    with pytest.raises(ValueError):
        beta_noise_scales([0.1], [0.1], "other")


@settings(max_examples=50, deadline=None)
@given(B=st.floats(0, 5), s=st.floats(0, 2), g=st.floats(0, 100), d=st.floats(1e-4, 0.5),
       bump=st.floats(0, 3))
def test_beta_is_monotone(B, s, g, d, bump):
    base = beta_n(ConfidenceParams([B], [s], d), g)
    assert beta_n(ConfidenceParams([B], [s], d), g + bump) >= base
    assert beta_n(ConfidenceParams([B + bump], [s], d), g) >= base
    assert beta_n(ConfidenceParams([B], [s], d / (1 + bump)), g) >= base


def test_schedule_saturates():
    sched = BetaSchedule(np.array([1.0, 2.0, 3.0]))
    assert [sched(N) for N in (0, 2, 7)] == [1.0, 3.0, 3.0]
    assert BetaSchedule.constant(4.0)(100) == 4.0


def test_candidate_grid_in_box_and_reproducible():
    a = candidate_grid([0, -1], [2, 1], size=64, seed=3)
    assert a.shape == (64, 2)
    assert np.all((a >= [0, -1]) & (a <= [2, 1]))
    np.testing.assert_array_equal(a, candidate_grid([0, -1], [2, 1], size=64, seed=3))


def test_greedy_gain_matches_brute_force():
    k = synthetic_kernel(2, 1, 0)
    rng = np.random.default_rng(0)
    X, U = rng.uniform(-1, 1, (25, 2)), rng.uniform(-1, 1, (25, 1))
    table = info_gain_table(k, 0.1, X, U, n_max=8)
    np.testing.assert_allclose(table, greedy_gain_scan(k, 0.1, X, U, 8), rtol=1e-9, atol=1e-12)
    assert info_gain_greedy(k, 0.1, X, U, 5) == table[5]
    assert np.all(np.diff(info_gain_table(k, 0.1, X, U, n_max=60)) >= 0)


def test_gain_of_a_set_is_its_log_det():
    k = synthetic_kernel(2, 0, 5)
    rng = np.random.default_rng(2)
    X, U = rng.uniform(-1, 1, (6, 2)), np.zeros((6, 0))
    gp = GpPosterior.from_data([k], 0.2, jitter=0.0)
    total = 0.0
    for x, u in zip(X, U):
        total += 0.5 * np.log1p(gp.mean_var(x, u)[1][0] / 0.04)
        gp = gp.append(Measurement(x, u, np.zeros(1)))
    assert total == pytest.approx(0.5 * log_det_gain(k, 0.2, X, U), rel=1e-12)


def test_greedy_first_pick_is_largest_variance():
    k = synthetic_kernel(1, 1, 2)
    X = np.zeros((3, 1))
    U = np.array([[0.1], [1.0], [0.5]])
    v = k.diag(X, U)
    assert info_gain_table(k, 0.2, X, U, n_max=1)[1] == pytest.approx(0.5 * np.log1p(v.max() / 0.04))


def test_rkhs_estimate_does_not_exceed_the_true_norm():
    k = synthetic_kernel(2, 1, 4)
    rng = np.random.default_rng(1)
    centres = (rng.uniform(-1, 1, (8, 2)), rng.uniform(-1, 1, (8, 1)))
    f = kernel_expansion(k, 1.5, centres, rng)
    X = np.vstack([centres[0], rng.uniform(-1, 1, (40, 2))])
    U = np.vstack([centres[1], rng.uniform(-1, 1, (40, 1))])
    est = rkhs_norm_estimate(k, X, U, f(X, U), reg=1e-12)
    assert 1.4 < est <= 1.5 + 1e-6


def test_bounds_at_zero_beta_and_zero_data():
    k = synthetic_kernel(2, 1, 0)
    gp = GpPosterior.from_data([k, k], 0.1)
    x, u, g = np.array([0.2, 0.3]), np.array([0.7]), np.array([1.0, -2.0])
    lcb, ucb = hdot_bounds(gp, 0.0, g, 3.0, x, u)
    assert lcb == ucb == 0.0
    lcb, ucb = hdot_bounds(gp, 2.0, g, 3.0, x, u)
    rad = 3.0 * 2.0 * np.sqrt(2 * k.diag(x[None], u[None])[0])
    assert ucb == pytest.approx(rad) and lcb == pytest.approx(-rad)


def test_bound_width_identity():
    k = synthetic_kernel(2, 1, 1)
    rng = np.random.default_rng(3)
    gp = GpPosterior.from_data([k, k], 0.1)
    for _ in range(10):
        gp = gp.append(Measurement(rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 1), rng.normal(size=2)))
    x, u = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 1)
    lcb, ucb = hdot_bounds(gp, 1.7, [0.3, 0.4], 0.5, x, u)
    assert ucb - lcb == pytest.approx(2 * 0.5 * 1.7 * np.sqrt(gp.mean_var(x, u)[1].sum()))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), noise=st.floats(0.05, 1.0), m=st.integers(0, 2))
def test_realized_information_gain_inequality(seed, noise, m):
    rng = np.random.default_rng(seed)
    k = synthetic_kernel(2, m, seed)
    X, U = rng.uniform(-1, 1, (40, 2)), rng.uniform(-1, 1, (40, m))
    assert realized_gain_gap(k, noise, X, U) >= -1e-8


def test_containment_holds_on_a_few_trials():
    prob = ContainmentProblem()
    assert sum(prob.trial(s) for s in range(5)) >= 4
