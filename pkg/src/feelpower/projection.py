"""Euclidean projections onto power-budget sets."""

from __future__ import annotations

import numpy as np


def project_simplex(v, radius: float = 1.0) -> np.ndarray:
    """Project ``v`` onto ``{x >= 0, sum(x) = radius}`` (sort-based)."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return v.copy()
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - radius
    idx = np.arange(1, v.size + 1)
    rho = np.count_nonzero(u - css / idx > 0)
    tau = css[rho - 1] / rho
    return np.maximum(v - tau, 0.0)


def project_budget(v, budget: float) -> np.ndarray:
    """Project ``v`` onto ``{x >= 0, sum(x) <= budget}``."""
    w = np.maximum(np.asarray(v, dtype=float), 0.0)
    if w.sum() <= budget:
        return w
    return project_simplex(v, budget)


def project_node_budgets(v, node_of, budgets) -> np.ndarray:
    """Separate budget projection for each node's block of devices."""
    v = np.asarray(v, dtype=float)
    out = np.empty_like(v)
    for i, b in enumerate(budgets):
        idx = node_of == i
        out[idx] = project_budget(v[idx], b)
    return out
