import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cbfbandit.cone import (
    ConeProblem, InputBox, feasibility_margin, filter_kernel, max_ucb_input, solve_safety_filter,
)

from oracles import grid_filter, grid_margin, grid_spacing, grid_ucb, lipschitz_of_phi, phi_on


def random_problem(rng, m, J, offset=0.0):
    R = rng.normal(size=(m + 1, m + 1))
    M = R @ R.T / (m + 1)
    A = rng.normal(size=(J, m))
    c = rng.normal(size=J) + offset
    r = rng.uniform(0.0, 1.0, J)
    box = InputBox(-np.ones(m), np.ones(m))
    return ConeProblem(A, c, r, M, box, rng.uniform(-1.5, 1.5, m))


def test_box_validation():
    with pytest.raises(ValueError):
        InputBox([1.0], [0.0])
    with pytest.raises(ValueError):
        InputBox([0.0], [np.inf])
    box = InputBox([-1.0, 0.0], [1.0, 2.0])
    np.testing.assert_array_equal(box.clip([3.0, -1.0]), [1.0, 0.0])
    assert box.vertices().shape == (4, 2)


def test_negative_radius_rejected():
    with pytest.raises(ValueError):
        ConeProblem([[1.0]], [0.0], [-1.0], np.eye(2), InputBox([-1.0], [1.0]), [0.0])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 31), m=st.sampled_from([1, 2]), J=st.sampled_from([1, 2]),
       offset=st.floats(-1.0, 2.0))
def test_margin_matches_grid(seed, m, J, offset):
    p = random_problem(np.random.default_rng(seed), m, J, offset)
    per = 2001 if m == 1 else 201
    val, u = feasibility_margin(p, return_argmax=True)
    ref, _ = grid_margin(p.A, p.c, p.radius, p.M, p.box.lower, p.box.upper, per)
    slack = lipschitz_of_phi(p.A, p.radius, p.M, p.box.lower, p.box.upper) * \
        grid_spacing(p.box.lower, p.box.upper, per)
    assert ref - 1e-7 <= val <= ref + slack + 1e-7
    # the reported argmax attains the reported value
    assert p.phi(u).min() == pytest.approx(val, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 31), m=st.sampled_from([1, 2]), J=st.sampled_from([1, 2]))
def test_filter_is_feasible_and_no_worse_than_grid(seed, m, J):
    p = random_problem(np.random.default_rng(seed), m, J, offset=1.0)
    if feasibility_margin(p) <= 1e-6:
        assert solve_safety_filter(p) is None or feasibility_margin(p) > 0
        return
    u = solve_safety_filter(p)
    assert u is not None
    assert np.all(u >= p.box.lower - 1e-12) and np.all(u <= p.box.upper + 1e-12)
    assert p.phi(u).min() >= -1e-7
    per = 2001 if m == 1 else 301
    ref = grid_filter(p.A, p.c, p.radius, p.M, p.box.lower, p.box.upper, p.u_nom, per)
    if ref is not None:
        assert np.sum((u - p.u_nom) ** 2) <= ref[0] + 1e-6


def test_filter_returns_nominal_when_feasible():
    box = InputBox([-1.0], [1.0])
    p = ConeProblem([[1.0]], [2.0], [0.1], np.eye(2) * 0.01, box, [0.3])
    np.testing.assert_allclose(solve_safety_filter(p), [0.3])


def test_filter_reports_infeasible():
    box = InputBox([-1.0, -1.0], [1.0, 1.0])
    p = ConeProblem([[1.0, 0.0]], [-5.0], [0.0], np.zeros((3, 3)), box, [0.0, 0.0])
    assert feasibility_margin(p) == pytest.approx(-4.0, abs=1e-6)
    assert solve_safety_filter(p) is None


def test_linear_constraint_projection():
    # with r = 0 the filter is a projection onto a half-plane intersected with the box
    box = InputBox([-10.0, -10.0], [10.0, 10.0])
    p = ConeProblem([[1.0, 1.0]], [-1.0], [0.0], np.zeros((3, 3)), box, [0.0, 0.0])
    np.testing.assert_allclose(solve_safety_filter(p), [0.5, 0.5], atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 31), m=st.sampled_from([1, 2, 3]))
def test_ucb_vertex_is_box_maximum(seed, m):
    rng = np.random.default_rng(seed)
    R = rng.normal(size=(m + 1, m + 1))
    M = R @ R.T
    a = rng.normal(size=m)
    r = rng.uniform(0, 2)
    box = InputBox(-rng.uniform(0.5, 2, m), rng.uniform(0.5, 2, m))
    u = max_ucb_input(a, r, M, box)
    val = a @ u + r * np.sqrt(np.concatenate([[1.0], u]) @ M @ np.concatenate([[1.0], u]))
    per = {1: 2001, 2: 101, 3: 21}[m]
    assert val >= grid_ucb(a, r, M, box.lower, box.upper, per) - 1e-9
    assert np.all((u == box.lower) | (u == box.upper))


def test_compiled_kernel_agrees_with_wrapper():
    rng = np.random.default_rng(4)
    p = random_problem(rng, 2, 2, offset=1.5)
    st_, u, margin, um = filter_kernel(p.A, p.c, p.radius, p.M, p.box.lower, p.box.upper,
                                       p.u_nom, 1e-9)
    assert margin == pytest.approx(feasibility_margin(p), abs=1e-8)
    assert phi_on(um[None], p.A, p.c, p.radius, p.M).min() == pytest.approx(margin, abs=1e-6)
    if st_ == 0:
        np.testing.assert_allclose(u, solve_safety_filter(p), atol=1e-7)
