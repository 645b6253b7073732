"""Reference allocators: uniform power and sum-rate maximization (SRM).

SRM ignores the learning side entirely and only looks at the channel; it is
a nonconvex problem, solved here best-effort by projected gradient ascent
from several starting points.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .channel import make_rng
from .problem import AllocationProblem
from .projection import project_budget

LN2 = math.log(2.0)


class BaselineKind(str, enum.Enum):
    UNIFORM = "uniform"
    SRM = "srm"


def uniform_allocate(prob: AllocationProblem) -> np.ndarray:
    """``P/K`` to every device."""
    return np.full(prob.num_devices, prob.budget / prob.num_devices)


def sum_rate(prob: AllocationProblem, p) -> float:
    """Network sum rate in bits/s/Hz."""
    Gn, Goff = prob._cache["Gn"], prob._cache["Goff"]
    p = np.asarray(p, dtype=float)
    return float(np.sum(np.log1p(Gn @ p) - np.log1p(Goff @ p)) / LN2)


def _sum_rate_grad(Gn, Goff, p):
    return (Gn.T @ (1.0 / (1.0 + Gn @ p)) - Goff.T @ (1.0 / (1.0 + Goff @ p))) / LN2


@dataclass
class SrmResult:
    p: np.ndarray
    sum_rate: float
    restarts: int


def _ascent(prob, p, tol, max_iter):
    Gn, Goff = prob._cache["Gn"], prob._cache["Goff"]
    f = sum_rate(prob, p)
    step = 1.0
    for _ in range(max_iter):
        g = _sum_rate_grad(Gn, Goff, p)
        while True:
            q = project_budget(p + step * g, prob.budget)
            d = q - p
            fq = sum_rate(prob, q)
            # Armijo condition for the projected step
            if fq >= f + 1e-4 * (g @ d) or step < 1e-14:
                break
            step *= 0.5
        if fq < f:
            break
        moved = float(np.linalg.norm(d))
        p, f = q, fq
        step *= 2.0
        if moved <= tol * (1.0 + float(np.linalg.norm(p))):
            break
    return p, f


def srm_allocate_detailed(
    prob: AllocationProblem, restarts: int = 8, tol: float = 1e-9, seed: int = 0, max_iter: int = 2000
) -> SrmResult:
    """Best of ``restarts`` projected-ascent runs; the first start is uniform.

    The remaining starts are uniformly random points of the budget simplex.
    Zero-gain devices are kept at zero power.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    rng = make_rng(seed)
    active = np.diag(prob.gains) > 0
    best_p, best_f = None, -np.inf
    for r in range(restarts):
        if r == 0:
            start = uniform_allocate(prob)
        else:
            start = rng.dirichlet(np.ones(prob.num_devices)) * prob.budget
        start = np.where(active, start, 0.0)
        p, f = _ascent(prob, start, tol, max_iter)
        if f > best_f:
            best_p, best_f = p, f
    best_p = np.where(active, best_p, 0.0)
    return SrmResult(p=best_p, sum_rate=sum_rate(prob, best_p), restarts=restarts)


def srm_allocate(prob: AllocationProblem, restarts: int = 8, tol: float = 1e-9, seed: int = 0) -> np.ndarray:
    return srm_allocate_detailed(prob, restarts, tol, seed).p
