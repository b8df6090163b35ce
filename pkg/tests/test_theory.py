import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from cbfbandit.confidence import ConfidenceParams, beta_n
from cbfbandit.theory import (
    GammaGrowth, GammaTable, NoFixedPoint, TheoremInputs, appendix_c_closed_form, budget_rhs,
    closed_form_constants, closed_form_rhs, constants_report, min_sampling_rate,
    solve_delta_n_max,
)

from oracles import smallest_n_scan


def inputs(eps=1.0, L_h=1.0, B=0.5, sigma=1.0, n=2, gamma=None, delta=0.05):
    conf = ConfidenceParams(np.full(n, B), np.full(n, sigma), delta)
    return TheoremInputs(eps, 1.0, L_h, 10.0, conf, gamma or GammaGrowth(0.5, 0.0, 1.0))


def test_growth_validation():
    with pytest.raises(ValueError):
        GammaGrowth(1.0, 0.5, 1.0)
    with pytest.raises(ValueError):
        GammaGrowth(-1.0, 0.1, 1.0)
    g = GammaGrowth.squared_exponential(2.0, 3)
    assert g(100) == pytest.approx(2.0 * np.log(101) ** 3, rel=1e-12)
    assert g(1) > 0.0
    assert GammaGrowth.linear(1.5)(1) == pytest.approx(1.5 * np.log(2.0))


def test_gamma_table_refuses_to_extrapolate():
    t = GammaTable(np.array([[0.0, 1.0, 1.5]]))
    assert t(2)[0] == 1.5
    with pytest.raises(NoFixedPoint):
        t(3)
    with pytest.raises(ValueError):
        GammaTable(np.array([[0.0, -1.0]]))


def test_theorem_inputs_validation():
    with pytest.raises(ValueError):
        inputs(eps=0.0)


def test_rhs_uses_recomputed_beta():
    inp = inputs()
    N = 50
    g = inp.gammas(N)
    beta = beta_n(inp.confidence, g)
    expected = 32 * beta ** 2 * inp.L_h ** 2 / (inp.epsilon ** 2 * np.log1p(1.0)) * g.sum()
    assert budget_rhs(inp, N) == pytest.approx(expected, rel=1e-12)


def test_noiseless_bound_is_trivial():
    inp = inputs(sigma=0.0)
    assert budget_rhs(inp, 10) == 0.0
    assert solve_delta_n_max(inp) == 1


@settings(max_examples=30, deadline=None)
@given(eps=st.floats(0.5, 5.0), L_h=st.floats(0.2, 2.0), B=st.floats(0.0, 1.0),
       sigma=st.floats(0.3, 2.0), c=st.floats(0.05, 1.0), theta=st.floats(0.0, 2.0),
       omega=st.floats(0.0, 0.3))
def test_solution_is_the_first_integer_that_holds(eps, L_h, B, sigma, c, theta, omega):
    inp = inputs(eps, L_h, B, sigma, gamma=GammaGrowth(c, omega, theta))
    holds = lambda N: N > budget_rhs(inp, N)
    try:
        N = solve_delta_n_max(inp, cap=10 ** 9)
    except NoFixedPoint:
        assume(False)
    assert holds(N) and (N == 1 or not holds(N - 1))
    if N <= 20_000:
        assert smallest_n_scan(holds, N) == N


@settings(max_examples=30, deadline=None)
@given(eps=st.floats(0.3, 3.0), B=st.floats(0.0, 1.0), sigma=st.floats(0.3, 2.0),
       c=st.floats(0.05, 1.0), theta=st.floats(0.0, 2.0))
def test_doubling_epsilon_never_increases_budget(eps, B, sigma, c, theta):
    g = GammaGrowth(c, 0.0, theta)
    a = solve_delta_n_max(inputs(eps, 1.0, B, sigma, gamma=g), cap=10 ** 12)
    b = solve_delta_n_max(inputs(2 * eps, 1.0, B, sigma, gamma=g), cap=10 ** 12)
    assert b <= a


def test_closed_form_constants_bound_the_product():
    rng = np.random.default_rng(0)
    for _ in range(50):
        inp = inputs(B=rng.uniform(0, 2), sigma=rng.uniform(0.1, 2), n=int(rng.integers(1, 4)))
        c1, c32, c2 = closed_form_constants(inp)
        for gam in rng.uniform(0, 50, 10):
            beta = beta_n(inp.confidence, np.full(inp.n, gam))
            assert beta ** 2 * inp.n * gam <= c1 * gam + c32 * gam ** 1.5 + c2 * gam ** 2 + 1e-9


def test_closed_form_rhs_dominates_rhs():
    rng = np.random.default_rng(2)
    for _ in range(20):
        g = GammaGrowth(rng.uniform(0.05, 2.0), rng.uniform(0, 0.4), rng.uniform(0, 3))
        inp = inputs(rng.uniform(0.5, 3), rng.uniform(0.3, 2), rng.uniform(0, 1),
                     rng.uniform(0.3, 2), n=int(rng.integers(1, 4)), gamma=g)
        for N in (1, 2, 10, 1000, 10 ** 6):
            assert closed_form_rhs(inp, g, N) >= budget_rhs(inp, N) * (1 - 1e-12)


def test_closed_form_dominates_on_ten_constant_sets():
    rng = np.random.default_rng(1)
    checked = 0
    while checked < 10:
        g = GammaGrowth(rng.uniform(0.05, 1.0), rng.uniform(0, 0.3), rng.uniform(0, 2))
        inp = inputs(rng.uniform(0.5, 3), rng.uniform(0.3, 2), rng.uniform(0, 1),
                     rng.uniform(0.3, 2), gamma=g)
        try:
            closed = appendix_c_closed_form(inp, cap=10 ** 12)
        except NoFixedPoint:
            continue
        assert closed >= solve_delta_n_max(inp, cap=10 ** 12)
        checked += 1


def test_gp_noise_sets_the_log_factor():
    inp = inputs(sigma=3.0)
    assert inp.log_factor() == pytest.approx(np.log1p(1 / 9))
    alt = TheoremInputs(inp.epsilon, inp.L_alpha, inp.L_h, inp.L_xdot, inp.confidence,
                        inp.gamma, gp_noise=0.1)
    assert alt.log_factor() == pytest.approx(np.log1p(100.0))
    assert budget_rhs(alt, 50) < budget_rhs(inp, 50)


def test_closed_form_needs_growth_model():
    inp = inputs(gamma=GammaTable(np.zeros((2, 5))))
    with pytest.raises(TypeError):
        appendix_c_closed_form(inp)


def test_cap_is_reported():
    inp = inputs(eps=1e-3, gamma=GammaGrowth(1.0, 0.45, 3.0))
    with pytest.raises(NoFixedPoint):
        solve_delta_n_max(inp, cap=10 ** 4)
    report = constants_report(inp, cap=10 ** 4)
    assert report["delta_n_max"] is None and "error" in report


def test_sampling_threshold():
    inp = inputs(eps=2.0, L_h=0.5)
    assert min_sampling_rate(inp, 4) == pytest.approx(2.0 / (1.0 * 0.5 * 10.0 * 4))
    with pytest.raises(ValueError):
        min_sampling_rate(inp, 0)


def test_report_fields():
    rep = constants_report(inputs())
    for key in ("delta_n_max", "dt_threshold", "beta_at_delta_n_max", "closed_form_delta_n_max"):
        assert key in rep
    assert rep["closed_form_delta_n_max"] >= rep["delta_n_max"]
