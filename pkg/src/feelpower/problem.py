"""Sample-deficit objective, its MM surrogate and the per-node relaxation.

Notation used throughout (all powers in mW):

* ``psi(p)``: signed sample surplus, collected samples minus the total cap
  ``D``; the objective is ``psi(p)**2``.
* ``s_k(p) = 1 + sum_l G[k, l] p_l / noise`` and
  ``u_k(p) = 1 + sum_{l != k} G[k, l] p_l / noise``, so that
  ``ln(1 + SINR_k) = ln s_k - ln u_k``.
* The surrogate replaces ``-ln u_k(p)`` with its tangent at an expansion
  point ``p_star``. This lower-bounds ``psi`` and is concave in ``p``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelState, DomainError, NetworkConfig


class RegimeExit(Exception):
    """The sample target is already met (``psi > 0``); no deficit to close."""


@dataclass(frozen=True)
class AllocationProblem:
    gains: np.ndarray
    noise_power: float
    scale: np.ndarray  # B*T/(V_k ln 2) per device
    caps: np.ndarray  # D_i
    initial: np.ndarray  # A_i
    node_of: np.ndarray
    budget: float
    xi2: float | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name in ("gains", "scale", "caps", "initial", "node_of"):
            arr = np.array(getattr(self, name), copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        K = self.gains.shape[0]
        if self.gains.shape != (K, K) or self.scale.shape != (K,) or self.node_of.shape != (K,):
            raise ValueError("inconsistent problem dimensions")
        if self.caps.shape != self.initial.shape or self.node_of.max() + 1 != self.caps.size:
            raise ValueError("node arrays do not match the partition")
        if not self.noise_power > 0 or not self.budget > 0:
            raise DomainError("noise power and budget must be positive")
        Gn = self.gains / self.noise_power
        off = Gn.copy()
        np.fill_diagonal(off, 0.0)
        same = self.node_of[:, None] == self.node_of[None, :]
        self._cache.update(Gn=Gn, Goff=off, Gn_same=Gn * same, Goff_same=off * same)

    @classmethod
    def from_config(cls, cfg: NetworkConfig, channels: ChannelState, initial=None, xi2=None) -> "AllocationProblem":
        scale = cfg.bandwidth * cfg.tx_time / (np.asarray(cfg.bits_per_sample) * math.log(2.0))
        return cls(
            gains=channels.gains,
            noise_power=cfg.noise_power,
            scale=scale,
            caps=np.asarray(cfg.dataset_caps, dtype=float),
            initial=np.asarray(cfg.initial_samples if initial is None else initial, dtype=float),
            node_of=cfg.node_of,
            budget=cfg.power_budget,
            xi2=xi2,
        )

    @property
    def num_devices(self) -> int:
        return self.gains.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.caps.size

    @property
    def D(self) -> float:
        return float(self.caps.sum())

    @property
    def A(self) -> float:
        return float(self.initial.sum())

    def devices(self, i: int) -> np.ndarray:
        if not 0 <= i < self.num_nodes:
            raise IndexError(f"node {i} out of range")
        return np.flatnonzero(self.node_of == i)

    def warmup_nodes(self, xi2: float | None = None) -> np.ndarray:
        """Nodes whose initial samples fall short of the contraction threshold."""
        xi2 = self.xi2 if xi2 is None else xi2
        if xi2 is None:
            return np.array([], dtype=int)
        need = self.caps - self.caps / (2.0 * math.sqrt(xi2))
        return np.flatnonzero(self.initial < need)

    def active_devices(self) -> np.ndarray:
        """Devices with a nonzero direct gain."""
        return np.flatnonzero(np.diag(self.gains) > 0)


def _check(p):
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise DomainError("transmit powers must be nonnegative")
    return p


def _su(prob, p):
    c = prob._cache
    return 1.0 + c["Gn"] @ p, 1.0 + c["Goff"] @ p


# -- exact objective -------------------------------------------------------

def node_surplus(prob: AllocationProblem, p) -> np.ndarray:
    """Per-node continuous samples minus cap, ``psi_i(p)``."""
    p = _check(p)
    s, u = _su(prob, p)
    per_dev = prob.scale * (np.log(s) - np.log(u))
    return np.bincount(prob.node_of, weights=per_dev, minlength=prob.num_nodes) + prob.initial - prob.caps


def psi(prob: AllocationProblem, p) -> float:
    """Signed sample surplus summed over all nodes."""
    return float(node_surplus(prob, p).sum())


def phi_global(prob: AllocationProblem, p) -> float:
    """Squared deviation of the collected samples from the target ``D``."""
    return psi(prob, p) ** 2


def grad_psi(prob: AllocationProblem, p) -> np.ndarray:
    p = _check(p)
    s, u = _su(prob, p)
    c = prob._cache
    return c["Gn"].T @ (prob.scale / s) - c["Goff"].T @ (prob.scale / u)


def grad_phi_global(prob: AllocationProblem, p) -> np.ndarray:
    return 2.0 * psi(prob, p) * grad_psi(prob, p)


def capped_deficit(prob: AllocationProblem, p) -> float:
    """Objective with each node's samples clipped at its cap.

    Samples beyond ``D_i`` cannot be stored, so this is the learning-relevant
    deviation used when comparing allocators that ignore the caps.
    """
    surplus = np.minimum(node_surplus(prob, p), 0.0)
    return float(surplus.sum() ** 2)


# -- MM surrogate -----------------------------------------------------------

def _surrogate_terms(prob, p, p_star):
    p, p_star = _check(p), _check(p_star)
    s, u = _su(prob, p)
    _, u_star = _su(prob, p_star)
    terms = prob.scale * (np.log(s) - np.log(u_star) + 1.0 - u / u_star)
    return terms, s, u_star


def psi_surrogate(prob: AllocationProblem, p, p_star) -> float:
    """Concave lower bound on ``psi`` that is tangent at ``p_star``."""
    terms, _, _ = _surrogate_terms(prob, p, p_star)
    return float(terms.sum() + prob.A - prob.D)


def node_psi_surrogate(prob: AllocationProblem, p, p_star) -> np.ndarray:
    """Surrogate surplus of every node, all powers free (centralized form)."""
    terms, _, _ = _surrogate_terms(prob, p, p_star)
    return np.bincount(prob.node_of, weights=terms, minlength=prob.num_nodes) + prob.initial - prob.caps


def phi_surrogate(prob: AllocationProblem, p, p_star) -> float:
    return psi_surrogate(prob, p, p_star) ** 2


def grad_psi_surrogate(prob: AllocationProblem, p, p_star) -> np.ndarray:
    _, s, u_star = _surrogate_terms(prob, p, p_star)
    c = prob._cache
    return c["Gn"].T @ (prob.scale / s) - c["Goff"].T @ (prob.scale / u_star)


def grad_phi_surrogate(prob: AllocationProblem, p, p_star) -> np.ndarray:
    return 2.0 * psi_surrogate(prob, p, p_star) * grad_psi_surrogate(prob, p, p_star)


def jac_node_psi_surrogate(prob: AllocationProblem, p, p_star) -> np.ndarray:
    """``I x K`` Jacobian of :func:`node_psi_surrogate`."""
    _, s, u_star = _surrogate_terms(prob, p, p_star)
    c = prob._cache
    rows = (prob.scale / s)[:, None] * c["Gn"] - (prob.scale / u_star)[:, None] * c["Goff"]
    J = np.zeros((prob.num_nodes, prob.num_devices))
    np.add.at(J, prob.node_of, rows)
    return J


class SurrogateModel:
    """Surrogate pieces for a fixed expansion point, fused for inner loops.

    Skips argument checks; callers keep ``p >= 0``.
    """

    def __init__(self, prob: AllocationProblem, p_star):
        self.prob = prob
        c = prob._cache
        self.Gn, self.Goff = c["Gn"], c["Goff"]
        p_star = _check(p_star)
        u_star = 1.0 + self.Goff @ p_star
        self.w_over_u = prob.scale / u_star
        self.const = prob.scale * (1.0 - np.log(u_star))
        self.offset = prob.initial - prob.caps
        self.node_of = prob.node_of
        self.I = prob.num_nodes
        self._lin = self.Goff.T @ self.w_over_u  # gradient of the linear part

    def node_values(self, p):
        s = 1.0 + self.Gn @ p
        u = 1.0 + self.Goff @ p
        terms = self.prob.scale * np.log(s) + self.const - self.w_over_u * u
        return np.bincount(self.node_of, weights=terms, minlength=self.I) + self.offset, s

    def value(self, p) -> float:
        return float(self.node_values(p)[0].sum())

    def grad(self, p, s=None):
        if s is None:
            s = 1.0 + self.Gn @ p
        return self.Gn.T @ (self.prob.scale / s) - self._lin

    def node_jacobian(self, p, s=None):
        if s is None:
            s = 1.0 + self.Gn @ p
        rows = (self.prob.scale / s)[:, None] * self.Gn - self.w_over_u[:, None] * self.Goff
        J = np.zeros((self.I, rows.shape[1]))
        np.add.at(J, self.node_of, rows)
        return J


def surrogate_curvature(prob: AllocationProblem, p, p_star, direction) -> float:
    """Second derivative of ``psi_surrogate`` along ``direction`` at ``p``."""
    _, s, _ = _surrogate_terms(prob, p, p_star)
    slope = prob._cache["Gn"] @ np.asarray(direction, dtype=float)
    return float(-np.sum(prob.scale * slope**2 / s**2))


# -- per-node relaxation ------------------------------------------------------

def _mixed(prob, i, p_i, p_t):
    p_t = _check(p_t)
    idx = prob.devices(i)
    p_i = _check(p_i)
    if p_i.shape != idx.shape:
        raise IndexError(f"node {i} has {idx.size} devices, got {p_i.size} powers")
    p = p_t.copy()
    p[idx] = p_i
    return idx, p, p_t


def phi_node(prob: AllocationProblem, i: int, p_i, p_t) -> float:
    """Node ``i``'s surrogate surplus with the other nodes frozen at ``p_t``.

    The surrogate is linearised at ``p_t``. Returns samples minus cap
    (unsquared): negative means the node is still short of data.
    """
    idx, p, p_t = _mixed(prob, i, p_i, p_t)
    s, u = _su(prob, p)
    _, u_t = _su(prob, p_t)
    terms = prob.scale[idx] * (np.log(s[idx]) + 1.0 - np.log(u_t[idx]) - u[idx] / u_t[idx])
    return float(terms.sum() + prob.initial[i] - prob.caps[i])


def grad_phi_node(prob: AllocationProblem, i: int, p_i, p_t) -> np.ndarray:
    idx, p, p_t = _mixed(prob, i, p_i, p_t)
    s, _ = _su(prob, p)
    _, u_t = _su(prob, p_t)
    c = prob._cache
    Gn, Goff = c["Gn"][np.ix_(idx, idx)], c["Goff"][np.ix_(idx, idx)]
    w = prob.scale[idx]
    return Gn.T @ (w / s[idx]) - Goff.T @ (w / u_t[idx])


def phi_node_all(prob: AllocationProblem, p_new, p_ref) -> np.ndarray:
    """``phi_node`` for every node at once.

    Node ``i`` sees its own devices at ``p_new`` and everyone else at
    ``p_ref``; each node's surrogate is linearised at ``p_ref``.
    """
    p_new, p_ref = _check(p_new), _check(p_ref)
    c = prob._cache
    d = p_new - p_ref
    s_ref, u_ref = _su(prob, p_ref)
    s = s_ref + c["Gn_same"] @ d
    u = u_ref + c["Goff_same"] @ d
    terms = prob.scale * (np.log(s) + 1.0 - np.log(u_ref) - u / u_ref)
    return np.bincount(prob.node_of, weights=terms, minlength=prob.num_nodes) + prob.initial - prob.caps


def grad_phi_node_all(prob: AllocationProblem, p_new, p_ref) -> np.ndarray:
    """Stacked per-node gradients; entry ``j`` is d phi_{node(j)} / d p_j."""
    p_new, p_ref = _check(p_new), _check(p_ref)
    c = prob._cache
    s_ref, u_ref = _su(prob, p_ref)
    s = s_ref + c["Gn_same"] @ (p_new - p_ref)
    return c["Gn_same"].T @ (prob.scale / s) - c["Goff_same"].T @ (prob.scale / u_ref)
