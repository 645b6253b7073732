import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from feelpower.projection import project_budget, project_node_budgets, project_simplex


def qp_brute_force(v, budget):
    """Exact projection onto {x >= 0, sum x <= budget} by enumerating active sets.

    For each support S, the candidate is either v restricted to S (budget
    slack) or v_S shifted by a common tau (budget tight). The feasible
    candidate closest to v is the projection.
    """
    n = v.size
    best, best_d = None, np.inf
    for r in range(n + 1):
        for S in itertools.combinations(range(n), r):
            S = list(S)
            cands = []
            x = np.zeros(n)
            x[S] = v[S]
            cands.append(x)
            if S:
                tau = (v[S].sum() - budget) / len(S)
                y = np.zeros(n)
                y[S] = v[S] - tau
                cands.append(y)
            for c in cands:
                if np.all(c >= -1e-12) and c.sum() <= budget + 1e-12:
                    d = np.sum((c - v) ** 2)
                    if d < best_d:
                        best, best_d = c, d
    return best


@settings(max_examples=200, deadline=None)
@given(arrays(float, 5, elements=st.floats(-10, 10)), st.floats(0.1, 20))
def test_budget_projection_matches_brute_force(v, budget):
    np.testing.assert_allclose(project_budget(v, budget), qp_brute_force(v, budget), atol=1e-8)


@settings(max_examples=100, deadline=None)
@given(arrays(float, 8, elements=st.floats(-5, 5)), st.floats(0.1, 10))
def test_simplex_projection_properties(v, r):
    x = project_simplex(v, r)
    assert np.all(x >= 0)
    assert x.sum() == pytest.approx(r, rel=1e-12, abs=1e-12)
    # optimality: v - x is constant on the support and not larger off it
    gap = v - x
    supp = x > 0
    assert np.ptp(gap[supp]) < 1e-9
    if np.any(~supp):
        assert gap[~supp].max() <= gap[supp].min() + 1e-9


def test_projection_idempotent_and_feasible_points_fixed():
    v = np.array([1.0, 2.0, 0.5])
    assert np.array_equal(project_budget(v, 10.0), v)
    x = project_budget(np.array([5.0, 5.0, -1.0]), 4.0)
    np.testing.assert_allclose(x, [2.0, 2.0, 0.0])
    np.testing.assert_allclose(project_budget(x, 4.0), x)


def test_node_budget_projection():
    v = np.array([3.0, 3.0, 1.0, -1.0])
    out = project_node_budgets(v, np.array([0, 0, 1, 1]), [2.0, 5.0])
    np.testing.assert_allclose(out, [1.0, 1.0, 1.0, 0.0])
