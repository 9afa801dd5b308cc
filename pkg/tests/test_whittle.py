import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aoisched.whittle import (
    SubProblem,
    ThresholdPolicy,
    brute_force_threshold,
    optimal_threshold,
    threshold_average_cost,
    threshold_steady_state,
    verify_indexability,
    whittle_index,
)


def cost_from_chain(xbar, p, c, k=4000):
    """Average cost from the post-action age law: E[age] + c * P(reset)."""
    ss = threshold_steady_state(xbar, p, k)
    ages = np.arange(1, k + 1)
    return float(ages @ ss.probs) + c * float(ss.probs[0])


@pytest.mark.parametrize(
    "xbar,p,c,expected",
    [(1, 1.0, 0.0, 1.0), (1, 0.5, 0.0, 2.0), (2, 0.5, 3.0, 10 / 3)],
)
def test_threshold_cost_examples(xbar, p, c, expected):
    assert threshold_average_cost(xbar, p, c) == pytest.approx(expected, rel=1e-14)


def test_threshold_cost_rejects_zero_rate():
    with pytest.raises(ValueError):
        threshold_average_cost(2, 0.0, 1.0)


@pytest.mark.parametrize("xbar", [1, 2, 5])
@pytest.mark.parametrize("p", [0.2, 0.5, 0.9])
@pytest.mark.parametrize("c", [0.0, 1.0, 5.0])
def test_closed_form_matches_chain_expectation(xbar, p, c):
    assert threshold_average_cost(xbar, p, c) == pytest.approx(cost_from_chain(xbar, p, c), rel=1e-9)


def test_steady_state_examples():
    ss = threshold_steady_state(2, 0.5, 10)
    assert ss.probs[:4] == pytest.approx([1 / 3, 1 / 3, 1 / 6, 1 / 12])
    ss = threshold_steady_state(1, 1.0, 5)
    assert ss.probs.tolist() == [1.0, 0.0, 0.0, 0.0, 0.0]
    assert ss.tail == 0.0


@settings(max_examples=100)
@given(st.integers(1, 30), st.floats(0.05, 1.0), st.integers(0, 40))
def test_steady_state_normalised(xbar, p, extra):
    ss = threshold_steady_state(xbar, p, xbar + extra)
    assert ss.probs.sum() + ss.tail == pytest.approx(1.0, abs=1e-12)


def test_steady_state_needs_k_at_least_threshold():
    with pytest.raises(ValueError):
        threshold_steady_state(5, 0.5, 4)


def test_index_examples():
    assert whittle_index(7, 0, 0.3) == 0.0
    assert whittle_index(2, 1, 0.5) == 5.0
    assert whittle_index(1, 1, 1.0) == 1.0


def test_optimal_threshold_examples():
    assert optimal_threshold(0.5, 3.0) == 2
    assert optimal_threshold(1.0, 0.0) == 1
    assert brute_force_threshold(0.5, 3.0, 100) == 2


@pytest.mark.parametrize("p", [0.1, 0.3, 0.5, 0.8, 1.0])
@pytest.mark.parametrize("x", [1, 2, 3, 7, 20])
def test_tie_at_index_goes_to_idling(p, x):
    assert optimal_threshold(p, whittle_index(x, 1, p)) == x + 1


@pytest.mark.parametrize("p", [0.1, 0.5, 1.0])
@pytest.mark.parametrize("x", [1, 4, 25])
def test_index_is_the_cost_of_indifference(p, x):
    # with c = I(x,1) thresholds x and x+1 cost the same; the difference is linear in c
    c = whittle_index(x, 1, p)
    a, b = threshold_average_cost(x, p, c), threshold_average_cost(x + 1, p, c)
    assert a == pytest.approx(b, rel=1e-12)
    assert threshold_average_cost(x, p, c + 1) > threshold_average_cost(x + 1, p, c + 1)


def test_indexability_examples():
    rep = verify_indexability(0.5, [0, 1, 2, 5, 10, 50])
    assert rep.indexable
    assert rep.thresholds == sorted(rep.thresholds)
    rep = verify_indexability(1.0, [0])
    assert rep.indexable and rep.thresholds == [1]
    with pytest.raises(ValueError):
        verify_indexability(0.5, [2, 1])


@settings(max_examples=200)
@given(st.floats(0.05, 1.0), st.floats(0.0, 300.0))
def test_interval_rule_matches_scan_of_chain_costs(p, c):
    th = optimal_threshold(p, c)
    costs = [cost_from_chain(x, p, c, k=3000) for x in range(1, th + 4)]
    best = min(costs)
    assert costs[th - 1] <= best + 1e-7 * max(1.0, best)


def test_index_monotonicity():
    xs = range(1, 100)
    for p in (0.1, 0.5, 1.0):
        vals = [whittle_index(x, 1, p) for x in xs]
        assert all(b > a for a, b in zip(vals, vals[1:]))
    for x in (1, 5, 30):
        vals = [whittle_index(x, 1, p) for p in np.linspace(0.05, 1.0, 30)]
        assert all(b < a for a, b in zip(vals, vals[1:]))


def test_cost_is_convex_in_real_threshold():
    xs = np.linspace(1.0, 40.0, 157)
    for p in (0.2, 0.7):
        vals = np.array([threshold_average_cost(x, p, 2.0) for x in xs])
        assert (np.diff(vals, 2) > 0).all()


def test_domain_types():
    with pytest.raises(ValueError):
        SubProblem(0.0, 1.0)
    with pytest.raises(ValueError):
        SubProblem(0.5, -1.0)
    pol = ThresholdPolicy(3)
    assert pol.action(3, 1) == 1 and pol.action(2, 1) == 0 and pol.action(9, 0) == 0
    with pytest.raises(ValueError):
        ThresholdPolicy(0)
