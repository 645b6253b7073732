"""Centralized majorization-minimization power allocation.

Each outer iteration builds the tangent surrogate at the current powers and
approximately solves the resulting subproblem

    min  psi_sur(p | p_t)**2
    s.t. psi_sur(p | p_t)**2 <= D**2 / 2
         node surrogate surplus_i(p | p_t) <= 0       for every node
         p >= 0, sum(p) <= P

with projected FISTA on an augmented Lagrangian. The two nonlinear
constraint families are handled by multipliers; the budget set is handled by
exact projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import problem as pb
from .problem import AllocationProblem
from .projection import project_budget, project_node_budgets


class InnerSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class MmSettings:
    outer_tol: float = 1e-6
    inner_tol: float = 1e-10
    max_outer: int = 50
    max_inner: int = 400
    inner_penalty: float = 1e3
    al_updates: int = 8
    half_d2_constraint: bool = True
    # None: only the total budget is enforced. Otherwise one budget per node.
    node_budgets: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.outer_tol <= 0 or self.inner_tol <= 0 or self.inner_penalty <= 0:
            raise ValueError("tolerances and penalty must be positive")
        if self.max_outer < 1 or self.max_inner < 1 or self.al_updates < 1:
            raise ValueError("iteration caps must be >= 1")


@dataclass
class AllocationResult:
    p_opt: np.ndarray
    objective_trace: list[float]
    iterations: int
    status: str  # converged | max_iter | regime_exit
    history: list[dict] = field(default_factory=list)
    extras: dict = field(default_factory=dict)


def _projector(prob: AllocationProblem, settings: MmSettings):
    active = np.diag(prob.gains) > 0
    if settings.node_budgets is not None:
        budgets = np.asarray(settings.node_budgets, dtype=float)
        if budgets.size != prob.num_nodes:
            raise ValueError("need one budget per node")

        def proj(v):
            out = project_node_budgets(v, prob.node_of, budgets)
            out[~active] = 0.0
            return out
    else:

        def proj(v):
            out = np.zeros_like(v)
            out[active] = project_budget(v[active], prob.budget)
            return out

    return proj


def kkt_residual(prob: AllocationProblem, p, p_star=None, settings: MmSettings | None = None) -> float:
    """Projected-gradient residual ``||p - proj(p - grad)||`` of the scaled objective.

    With ``p_star`` the surrogate is used; otherwise the exact objective. The
    objective is divided by ``D**2`` so the residual is dimensionless.
    """
    proj = _projector(prob, settings or MmSettings())
    p = np.asarray(p, dtype=float)
    if p_star is None:
        g = pb.grad_phi_global(prob, p)
    else:
        g = pb.grad_phi_surrogate(prob, p, p_star)
    return float(np.linalg.norm(p - proj(p - g / prob.D**2)))


def _fista(F, FG, proj, x0, L0, tol, max_iter):
    """Projected FISTA with backtracking and function-value restarts.

    ``FG(p)`` returns the value and gradient together.
    """
    x = x0.copy()
    y = x0.copy()
    Fx = F(x)
    t = 1.0
    L = L0
    for _ in range(max_iter):
        Fy, gy = FG(y)
        while True:
            x_new = proj(y - gy / L)
            d = x_new - y
            F_new = F(x_new)
            if F_new <= Fy + gy @ d + 0.5 * L * (d @ d) + 1e-14 * abs(Fy):
                break
            L *= 2.0
        gmap = L * math.sqrt(d @ d)
        if F_new > Fx:
            # adaptive restart: drop momentum and retry from x
            if np.array_equal(y, x):
                break
            y, t = x.copy(), 1.0
            continue
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        # keep the extrapolated point inside the set: the logs need p >= 0
        y = proj(x_new + ((t - 1.0) / t_new) * (x_new - x))
        x, Fx, t = x_new, F_new, t_new
        if gmap <= tol:
            break
        L *= 0.9
    return x, L


def _segment_safeguard(prob, p_t, x, tol):
    """Largest point on [p_t, x] (by bisection) meeting every true node cap."""
    def ok(q):
        return np.all(pb.node_surplus(prob, q) <= tol)

    if ok(x):
        return x
    lo, hi = 0.0, 1.0
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        if ok(p_t + mid * (x - p_t)):
            lo = mid
        else:
            hi = mid
    return p_t + lo * (x - p_t)


def solve_inner(
    prob: AllocationProblem,
    p_t,
    settings: MmSettings = MmSettings(),
    _L0: float = 1e-3,
    warm: dict | None = None,
) -> np.ndarray:
    """Approximately minimize the surrogate subproblem around ``p_t``.

    Returns a point with ``phi_surrogate(p_new | p_t) <= phi_surrogate(p_t | p_t)``
    that respects every node cap whenever ``p_t`` does.

    ``warm`` is an optional dict carrying the multipliers, penalty and step
    scale between calls; it is read and then updated in place.
    """
    p_t = np.asarray(p_t, dtype=float)
    proj = _projector(prob, settings)
    D = prob.D
    I = prob.num_nodes
    feas_tol = 1e-9  # scaled units; 1e-9 * D samples

    model = pb.SurrogateModel(prob, p_t)

    def parts(p):
        nodes, s = model.node_values(p)
        nodes = nodes / D
        psi_s = nodes.sum()
        g = nodes if not settings.half_d2_constraint else np.append(nodes, psi_s**2 - 0.5)
        return psi_s, g, s

    def f_scaled(p):
        return (model.value(p) / D) ** 2

    f0 = f_scaled(p_t)
    if kkt_residual(prob, p_t, p_t, settings) <= settings.inner_tol:
        return p_t.copy()

    n_con = I + (1 if settings.half_d2_constraint else 0)
    lam = np.zeros(n_con)
    mu = settings.inner_penalty
    L = _L0
    if warm:
        lam, mu, L = warm["lam"].copy(), warm["mu"], max(warm["L"], _L0)
    x = p_t.copy()
    prev_viol = np.inf

    for _ in range(settings.al_updates):
        lam_fixed, mu_fixed = lam.copy(), mu

        shift = lam_fixed / mu_fixed
        shift_sq = float(shift @ shift)

        def F(p):
            psi_s, g, _ = parts(p)
            h = np.maximum(0.0, g + shift)
            return psi_s**2 + 0.5 * mu_fixed * (float(h @ h) - shift_sq)

        def FG(p):
            psi_s, g, s = parts(p)
            h = np.maximum(0.0, g + shift)
            val = psi_s**2 + 0.5 * mu_fixed * (float(h @ h) - shift_sq)
            w = mu_fixed * h
            grad_psi = model.grad(p, s) / D
            out = 2.0 * psi_s * grad_psi
            if np.any(w[:I] > 0):
                out = out + model.node_jacobian(p, s).T @ w[:I] / D
            if settings.half_d2_constraint and w[I] > 0:
                out = out + w[I] * 2.0 * psi_s * grad_psi
            return val, out

        x, L = _fista(F, FG, proj, x, L, settings.inner_tol, settings.max_inner)
        _, g, _ = parts(x)
        lam = np.maximum(0.0, lam + mu * g)
        viol = float(np.max(np.maximum(g[:I], 0.0), initial=0.0))
        if viol <= feas_tol and np.all(lam[:I][g[:I] < -feas_tol] == 0.0):
            break
        if viol > 0.25 * prev_viol:
            mu *= 4.0
        prev_viol = viol
    if warm is not None:
        warm.update(lam=lam, mu=mu, L=L)

    if np.all(pb.node_surplus(prob, p_t) <= feas_tol * D) and np.any(pb.node_surplus(prob, x) > feas_tol * D):
        # surrogate caps are looser than the true ones; pull offending nodes back
        x_fix = restore_caps(prob, x)
        if f_scaled(x_fix) <= f0:
            x = x_fix
        else:
            x = _segment_safeguard(prob, p_t, x, feas_tol * D)
    if f_scaled(x) > f0:
        # the cap-feasible segment end did not improve; nothing better is known
        if np.all(pb.node_surplus(prob, p_t) <= feas_tol * D):
            return p_t.copy()
        raise InnerSolveError("no sufficient decrease and the start point violates the node caps")
    return x


def restore_caps(prob: AllocationProblem, p, sweeps: int = 50) -> np.ndarray:
    """Scale down over-cap nodes until every node's samples fit its cap.

    A node's surplus is increasing in a common scaling of its own powers and
    equals ``A_i - D_i <= 0`` at zero, so per-node bisection always succeeds;
    sweeps repeat because lowering one node helps its neighbours.
    """
    p = np.asarray(p, dtype=float).copy()
    c = prob._cache
    Gn, Goff = c["Gn"], c["Goff"]
    for _ in range(sweeps):
        surplus = pb.node_surplus(prob, p)
        over = np.flatnonzero(surplus > 0)
        if over.size == 0:
            return p
        for i in over:
            idx = prob.devices(i)
            base = p[idx].copy()
            # rows of node i split into the frozen rest and the scaled block
            own_s, own_u = Gn[np.ix_(idx, idx)] @ base, Goff[np.ix_(idx, idx)] @ base
            rest_s = 1.0 + Gn[idx] @ p - own_s
            rest_u = 1.0 + Goff[idx] @ p - own_u
            scale = prob.scale[idx]
            const = prob.initial[i] - prob.caps[i]

            def surplus_at(m):
                return float(scale @ (np.log(rest_s + m * own_s) - np.log(rest_u + m * own_u))) + const

            lo, hi = 0.0, 1.0
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if surplus_at(mid) <= 0:
                    lo = mid
                else:
                    hi = mid
            p[idx] = lo * base
    return p


def initial_point(prob: AllocationProblem) -> np.ndarray:
    """Uniform ``P/K`` over devices with a usable channel."""
    p = np.zeros(prob.num_devices)
    active = prob.active_devices()
    if active.size:
        p[active] = prob.budget / active.size
    return p


def solve_mm(prob: AllocationProblem, settings: MmSettings = MmSettings(), p0=None) -> AllocationResult:
    p = initial_point(prob) if p0 is None else np.asarray(p0, dtype=float).copy()
    if settings.node_budgets is not None:
        p = _projector(prob, settings)(p)
    p = restore_caps(prob, p)

    def record(t, p, step):
        return {
            "t": t,
            "phi": pb.phi_global(prob, p),
            "step_norm": step,
            "samples_collected": float(pb.node_surplus(prob, p).sum() + prob.D),
        }

    warm: dict = {}
    history = [record(0, p, 0.0)]
    trace = [history[0]["phi"]]
    status = "max_iter"
    it = 0
    for it in range(1, settings.max_outer + 1):
        if pb.psi(prob, p) >= 0:
            status = "regime_exit"
            it -= 1
            break
        try:
            p_new = solve_inner(prob, p, settings, warm=warm)
        except InnerSolveError:
            warm.clear()
            p_new = solve_inner(prob, p, settings, _L0=2e-3, warm=warm)
        step = float(np.linalg.norm(p_new - p))
        p = p_new
        history.append(record(it, p, step))
        trace.append(history[-1]["phi"])
        if step <= settings.outer_tol or trace[-1] <= 1e-6 * prob.D**2:
            status = "converged"
            break
    return AllocationResult(p_opt=p, objective_trace=trace, iterations=it, status=status, history=history)
