import math

import numpy as np
import pytest

from conftest import make_problem
from feelpower import problem as pb
from feelpower.baselines import srm_allocate, srm_allocate_detailed, sum_rate, uniform_allocate
from feelpower.fom_solver import solve_fom
from feelpower.mm_solver import solve_mm
from feelpower.problem import AllocationProblem


def simple_problem(G, sigma2=1.0, budget=4.0):
    G = np.asarray(G, dtype=float)
    K = G.shape[0]
    return AllocationProblem(G, sigma2, np.full(K, 100.0), np.full(K, 1e6), np.zeros(K), np.arange(K), budget)


def test_uniform_allocation():
    prob = make_problem(seed=0)
    p = uniform_allocate(prob)
    np.testing.assert_allclose(p, 2.5)
    assert p.sum() == pytest.approx(prob.budget)


def test_sum_rate_matches_direct_formula():
    G = np.array([[2.0, 1.0], [1.0, 2.0]])
    prob = simple_problem(G)
    p = np.array([1.0, 1.0])
    # SINR = 2 / (1 + 1) = 1 for both -> one bit each
    assert sum_rate(prob, p) == pytest.approx(2.0, rel=1e-14)


def test_single_device_uses_whole_budget():
    prob = simple_problem([[3.0]], sigma2=1.0, budget=5.0)
    res = srm_allocate_detailed(prob)
    assert res.p[0] == pytest.approx(5.0, rel=1e-9)
    assert res.sum_rate == pytest.approx(math.log2(1 + 15.0))


def test_zero_gain_device_gets_nothing():
    prob = simple_problem([[0.0, 0.0], [0.0, 2.0]])
    p = srm_allocate(prob)
    assert p[0] == 0.0 and p[1] == pytest.approx(4.0, rel=1e-9)


@pytest.mark.parametrize("gains", [(2.0, 1.0), (5.0, 0.5), (1.0, 1.0)])
def test_diagonal_gains_match_grid_search(gains):
    prob = simple_problem(np.diag(gains), sigma2=1.0, budget=4.0)
    p = srm_allocate(prob)
    grid = np.linspace(0, 4.0, 4001)
    best = max(sum_rate(prob, [x, 4.0 - x]) for x in grid)
    assert sum_rate(prob, p) >= best - 1e-6
    assert p.sum() == pytest.approx(4.0, rel=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_srm_beats_uniform_on_sum_rate(seed):
    prob = make_problem(seed=seed)
    p = srm_allocate(prob, seed=seed)
    assert np.all(p >= 0) and p.sum() <= prob.budget + 1e-9
    assert sum_rate(prob, p) >= sum_rate(prob, uniform_allocate(prob)) - 1e-12


def test_restarts_validated():
    with pytest.raises(ValueError):
        srm_allocate_detailed(make_problem(seed=0), restarts=0)


@pytest.mark.parametrize("seed", [0, 1])
def test_learning_aware_allocators_beat_srm_on_capped_deficit(seed):
    prob = make_problem(seed=seed)
    srm = pb.capped_deficit(prob, srm_allocate(prob, seed=seed))
    assert pb.capped_deficit(prob, solve_mm(prob).p_opt) < srm
    assert pb.capped_deficit(prob, solve_fom(prob).p_opt) < srm
