"""Distributed first-order power allocation with momentum.

Every edge node owns the powers of its devices and a dual ``lambda_i`` for
its relaxed sample constraint; a coordinator owns the shared budget dual
``beta``, the momentum scalar ``theta`` and the per-node budget split
``P_i``. One iteration is:

1. each node takes a projected gradient step on its augmented Lagrangian
   ``L_i = phi_i**2 / 2 + lambda_i * phi_i + beta * e_i + mu * e_i**2 / 2``,
   where ``e_i = sum(p_i) - P_i`` and ``phi_i`` is the node's surrogate
   surplus linearised at the current iterate;
2. with momentum, the node blends the step into its previous powers with
   weight ``theta``;
3. each node moves ``lambda_i`` along ``phi_i`` evaluated at its new powers;
4. the coordinator updates ``beta``, ``theta`` and ``P_i`` from the new
   powers.

All node work in step 1-3 reads only the previous snapshot, so the nodes
can run in any order (or concurrently) with identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import problem as pb
from .mm_solver import AllocationResult
from .problem import AllocationProblem
from .projection import project_budget


class DivergenceError(RuntimeError):
    """Powers blew up; the step size is too large for this instance."""


@dataclass(frozen=True)
class FomSettings:
    eta: float = 1e-3
    mu: float = 10.0
    tol: float = 1e-4
    max_iter: int = 20000
    momentum_enabled: bool = True
    # True reproduces the literal ``P/I`` per-device start (over budget when
    # nodes own several devices); the default is ``P/K`` per device.
    literal_init: bool = False

    def __post_init__(self):
        if not (self.eta >= 0 and self.mu > 0 and self.tol > 0):
            raise ValueError("need eta >= 0, mu > 0 and tol > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class FomState:
    p: np.ndarray  # all device powers, node blocks given by prob.node_of
    z: np.ndarray
    lam: np.ndarray
    beta: float
    theta: float
    P_split: np.ndarray
    t: int = 0

    def node_powers(self, prob: AllocationProblem, i: int) -> np.ndarray:
        return self.p[prob.devices(i)]


def next_theta(theta: float) -> float:
    """Momentum schedule: the positive root of ``x**2 = theta**2 * (1 - x)``."""
    th2 = theta * theta
    return 0.5 * (-th2 + math.sqrt(th2 * th2 + 4.0 * th2))


def budget_split(prob: AllocationProblem, p) -> np.ndarray:
    """Per-node budgets ``P_i = 1'p_i - (1'p - P) / I``; they sum to ``P``."""
    p = np.asarray(p, dtype=float)
    node_sums = np.bincount(prob.node_of, weights=p, minlength=prob.num_nodes)
    return node_sums - (p.sum() - prob.budget) / prob.num_nodes


def update_budget_split(state: FomState, prob: AllocationProblem) -> np.ndarray:
    return budget_split(prob, state.p)


def update_beta(state: FomState, prob: AllocationProblem, settings: FomSettings) -> float:
    """Shared budget dual after the nodes have moved to ``state.p``."""
    return max(state.beta + settings.mu / prob.num_nodes * (float(state.p.sum()) - prob.budget), 0.0)


def init_state(prob: AllocationProblem, settings: FomSettings = FomSettings()) -> FomState:
    active = prob.active_devices()
    p = np.zeros(prob.num_devices)
    if settings.literal_init:
        p[active] = prob.budget / prob.num_nodes
    elif active.size:
        p[active] = prob.budget / active.size
    return FomState(
        p=p,
        z=p.copy(),
        lam=np.ones(prob.num_nodes),
        beta=1.0,
        theta=1.0,
        P_split=budget_split(prob, p),
    )


def node_gradient(prob: AllocationProblem, i: int, state: FomState, settings: FomSettings = FomSettings()) -> np.ndarray:
    """Gradient of node ``i``'s augmented Lagrangian in its own powers."""
    idx = prob.devices(i)
    p_i = state.p[idx]
    phi = pb.phi_node(prob, i, p_i, state.p)
    gphi = pb.grad_phi_node(prob, i, p_i, state.p)
    excess = p_i.sum() - state.P_split[i]
    return (phi + state.lam[i]) * gphi + state.beta + settings.mu * excess


def _node_update(prob, i, state, settings):
    idx = prob.devices(i)
    p_i = state.p[idx]
    z_i = np.maximum(p_i - settings.eta * node_gradient(prob, i, state, settings), 0.0)
    new_i = (1.0 - state.theta) * p_i + state.theta * z_i if settings.momentum_enabled else z_i
    lam_i = max(state.lam[i] + settings.eta * pb.phi_node(prob, i, new_i, state.p), 0.0)
    return idx, z_i, new_i, lam_i


def _coordinate(prob, state, settings, z, p_new, lam):
    if not np.all(np.isfinite(p_new)) or np.linalg.norm(p_new) > 1e6 * prob.budget:
        raise DivergenceError(f"powers diverged at iteration {state.t + 1}; reduce eta")
    beta = max(state.beta + settings.mu / prob.num_nodes * (float(p_new.sum()) - prob.budget), 0.0)
    return FomState(
        p=p_new,
        z=z,
        lam=lam,
        beta=beta,
        theta=next_theta(state.theta),
        P_split=budget_split(prob, p_new),
        t=state.t + 1,
    )


def step_nodewise(prob: AllocationProblem, state: FomState, settings: FomSettings = FomSettings(), order=None) -> FomState:
    """One iteration computed node by node in ``order`` (default ``0..I-1``).

    Every node reads only ``state``, so any order gives the same result.
    """
    z = state.z.copy()
    p_new = state.p.copy()
    lam = state.lam.copy()
    for i in range(prob.num_nodes) if order is None else order:
        idx, z_i, new_i, lam_i = _node_update(prob, int(i), state, settings)
        z[idx], p_new[idx], lam[i] = z_i, new_i, lam_i
    return _coordinate(prob, state, settings, z, p_new, lam)


class _Kernel:
    """Vectorized node updates: all nodes at once, same arithmetic per node."""

    def __init__(self, prob: AllocationProblem):
        c = prob._cache
        self.prob = prob
        self.Gn, self.Goff = c["Gn"], c["Goff"]
        self.Gn_same, self.Goff_same = c["Gn_same"], c["Goff_same"]
        self.scale = prob.scale
        self.node_of = prob.node_of
        self.I = prob.num_nodes
        self.offset = prob.initial - prob.caps

    def _nodes(self, terms):
        return np.bincount(self.node_of, weights=terms, minlength=self.I) + self.offset

    def step(self, state: FomState, settings: FomSettings) -> FomState:
        p = state.p
        s = 1.0 + self.Gn @ p
        u = 1.0 + self.Goff @ p
        w_u = self.scale / u
        # at the reference point the linearised term 1 - u/u_ref vanishes
        phi = self._nodes(self.scale * (np.log(s) - np.log(u)))
        gphi = self.Gn_same.T @ (self.scale / s) - self.Goff_same.T @ w_u
        excess = np.bincount(self.node_of, weights=p, minlength=self.I) - state.P_split
        no = self.node_of
        grad = (phi[no] + state.lam[no]) * gphi + state.beta + settings.mu * excess[no]
        z = np.maximum(p - settings.eta * grad, 0.0)
        p_new = (1.0 - state.theta) * p + state.theta * z if settings.momentum_enabled else z
        d = p_new - p
        s_new = s + self.Gn_same @ d
        u_new = u + self.Goff_same @ d
        phi_new = self._nodes(self.scale * (np.log(s_new) + 1.0 - np.log(u) - u_new / u))
        lam = np.maximum(state.lam + settings.eta * phi_new, 0.0)
        return _coordinate(self.prob, state, settings, z, p_new, lam)


def step(prob: AllocationProblem, state: FomState, settings: FomSettings = FomSettings()) -> FomState:
    """One synchronous iteration (all nodes, then the coordinator)."""
    return _Kernel(prob).step(state, settings)


def mse_metric(new: FomState, old: FomState) -> float:
    """Sum of the change norms of powers, budget split, node duals and ``beta``."""
    return float(
        np.linalg.norm(new.p - old.p)
        + np.linalg.norm(new.P_split - old.P_split)
        + np.linalg.norm(new.lam - old.lam)
        + abs(new.beta - old.beta)
    )


def _max_node_change(prob, new, old):
    d2 = np.bincount(prob.node_of, weights=(new.p - old.p) ** 2, minlength=prob.num_nodes)
    return float(np.sqrt(d2.max()))


@dataclass
class FomResult(AllocationResult):
    mse_trace: list[float] = field(default_factory=list)
    states: list[FomState] = field(default_factory=list)


def solve_fom(
    prob: AllocationProblem,
    settings: FomSettings = FomSettings(),
    keep_states: bool = False,
    callback=None,
) -> FomResult:
    """Run the distributed iteration until every node's power change is at most ``tol``.

    The returned ``p_opt`` is the last iterate projected onto the total
    budget, and its objective is the last entry of ``objective_trace``.

    ``history`` rows carry ``t, mse, phi, beta, theta, sum_p``. With
    ``keep_states`` every iterate is stored (memory grows with ``max_iter``).
    ``callback(state)`` is called after each iteration.
    """
    kernel = _Kernel(prob)
    state = init_state(prob, settings)
    states = [state] if keep_states else []
    history = []
    trace = [pb.phi_global(prob, state.p)]
    mse = []
    status = "max_iter"
    for _ in range(settings.max_iter):
        new = kernel.step(state, settings)
        mse.append(mse_metric(new, state))
        change = _max_node_change(prob, new, state)
        phi = pb.phi_global(prob, new.p)
        trace.append(phi)
        history.append(
            {"t": new.t, "mse": mse[-1], "phi": phi, "beta": new.beta, "theta": new.theta, "sum_p": float(new.p.sum())}
        )
        state = new
        if keep_states:
            states.append(state)
        if callback is not None:
            callback(state)
        if change <= settings.tol:
            status = "converged"
            break
    # the budget is only enforced through beta, which may still be settling
    # when the primal stop rule fires; report the nearest feasible point
    p_opt = project_budget(state.p, prob.budget)
    trace.append(pb.phi_global(prob, p_opt))
    return FomResult(
        p_opt=p_opt,
        objective_trace=trace,
        iterations=state.t,
        status=status,
        history=history,
        extras={"final_state": state},
        mse_trace=mse,
        states=states,
    )


def iterations_to_mse(mse_trace, threshold: float) -> int | None:
    """First iteration (1-based) whose MSE is at or below ``threshold``."""
    hits = np.flatnonzero(np.asarray(mse_trace) <= threshold)
    return int(hits[0]) + 1 if hits.size else None

