"""Closed-loop federated learning on a synthetic classification task.

Each round: allocate transmit power, turn the resulting rates into new
(floored) samples per node, let every node train the global model on
everything it has collected so far, and average the local models.

The task is multinomial logistic regression on a Gaussian mixture. Every
node owns a fixed pool of ``D_i`` samples drawn once per seed; collecting
``n`` samples reveals the first ``n`` rows of the pool, so datasets are
nested and only grow.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import channel as ch
from .baselines import srm_allocate, uniform_allocate
from .channel import DomainError, NetworkConfig
from .fom_solver import FomSettings, solve_fom
from .lossmodel import min_samples
from .mm_solver import MmSettings, solve_mm
from .problem import AllocationProblem


class EmptyDatasetError(ValueError):
    pass


def subseed(*keys: int) -> int:
    """Independent 64-bit seed derived from a tuple of integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


# -- task ----------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticTask:
    """Gaussian-mixture classification with a linear softmax model.

    Class means are drawn once from ``seed`` and scaled to norm
    ``separation``; inputs are ``mean + noise_scale * N(0, I)``. Weights
    have shape ``(input_dim + 1, class_count)``, the last row being the bias.
    """

    input_dim: int = 20
    class_count: int = 4
    separation: float = 2.0
    noise_scale: float = 1.0
    l2: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.class_count < 2:
            raise ValueError("need input_dim >= 1 and class_count >= 2")
        if self.noise_scale <= 0 or self.l2 < 0:
            raise ValueError("need noise_scale > 0 and l2 >= 0")

    @property
    def means(self) -> np.ndarray:
        rng = ch.make_rng(subseed(self.seed, 7))
        m = rng.standard_normal((self.class_count, self.input_dim))
        return self.separation * m / np.linalg.norm(m, axis=1, keepdims=True)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        y = rng.integers(0, self.class_count, size=n)
        X = self.means[y] + self.noise_scale * rng.standard_normal((n, self.input_dim))
        return X, y

    def init_weights(self) -> np.ndarray:
        return np.zeros((self.input_dim + 1, self.class_count))

    @staticmethod
    def _aug(X):
        return np.hstack([X, np.ones((X.shape[0], 1))])

    def _probs(self, w, Xa):
        z = Xa @ w
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def loss(self, w, X, y) -> float:
        """Mean cross-entropy plus ``l2 / 2 * ||w||^2``."""
        if len(y) == 0:
            raise EmptyDatasetError("loss of an empty dataset")
        z = self._aug(X) @ w
        zmax = z.max(axis=1)
        lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
        ce = float(np.mean(lse - z[np.arange(len(y)), y]))
        return ce + 0.5 * self.l2 * float(np.sum(w * w))

    def grad(self, w, X, y) -> np.ndarray:
        if len(y) == 0:
            raise EmptyDatasetError("gradient of an empty dataset")
        Xa = self._aug(X)
        r = self._probs(w, Xa)
        r[np.arange(len(y)), y] -= 1.0
        return Xa.T @ r / len(y) + self.l2 * w

    def per_sample_grad_sq(self, w, X, y) -> np.ndarray:
        """``||grad f(w | s_j)||^2`` for every sample, regularizer included."""
        Xa = self._aug(X)
        r = self._probs(w, Xa)
        r[np.arange(len(y)), y] -= 1.0
        # ||x r' + l2 w||^2 = |x|^2 |r|^2 + 2 l2 x'wr + l2^2 |w|^2
        cross = np.einsum("nd,dc,nc->n", Xa, w, r)
        return (
            np.sum(Xa**2, axis=1) * np.sum(r**2, axis=1)
            + 2.0 * self.l2 * cross
            + self.l2**2 * float(np.sum(w * w))
        )

    def smoothness(self, X) -> float:
        """Upper bound on the gradient Lipschitz constant over ``X``."""
        Xa = self._aug(X)
        return 0.5 * float(np.linalg.eigvalsh(Xa.T @ Xa / len(Xa))[-1]) + self.l2


# -- learning steps --------------------------------------------------------------

def local_sgd_round(grad_fn: Callable, w_global, X, y, lr: float, epochs: int = 1) -> np.ndarray:
    """Full-batch gradient steps on the node's collected data.

    ``grad_fn(w, X, y)`` must return the mean per-sample gradient.
    """
    if len(y) == 0:
        raise EmptyDatasetError("node has no samples")
    if epochs < 0 or lr < 0:
        raise ValueError("need epochs >= 0 and lr >= 0")
    w = np.array(w_global, dtype=float, copy=True)
    for _ in range(epochs):
        w = w - lr * grad_fn(w, X, y)
    return w


def aggregate(local_models: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Weighted average of local models; weights must be >= 0 and sum to 1."""
    a = np.asarray(weights, dtype=float)
    if len(local_models) != a.size or a.size == 0:
        raise ValueError("need one weight per model")
    if np.any(a < 0) or abs(a.sum() - 1.0) > 1e-12:
        raise ValueError(f"aggregation weights must be >= 0 and sum to 1 (sum {a.sum()!r})")
    out = np.zeros_like(np.asarray(local_models[0], dtype=float))
    for ai, wi in zip(a, local_models):
        out = out + ai * np.asarray(wi, dtype=float)
    return out


# -- closed loop -------------------------------------------------------------------

@dataclass(frozen=True)
class SimSettings:
    lr: float = 0.5
    local_epochs: int = 5
    channel_policy: str = "fixed"  # "fixed" block fading or "redraw" every round
    xi2: float | None = None  # enables the warm-up rule when set
    test_size: int = 2000
    mm: MmSettings = MmSettings()
    fom: FomSettings = FomSettings()
    srm_restarts: int = 8

    def __post_init__(self):
        if self.channel_policy not in ("fixed", "redraw"):
            raise ValueError("channel_policy must be 'fixed' or 'redraw'")
        if self.test_size < 1:
            raise ValueError("test_size must be >= 1")


@dataclass(frozen=True)
class RoundRecord:
    t: int
    counts: tuple[int, ...]
    new_samples: tuple[int, ...]
    node_loss: tuple[float, ...]
    global_loss: float
    weights: tuple[float, ...]
    grad_norm: float
    sum_power: float
    warmup: tuple[int, ...]


@dataclass
class TrainingTrace:
    allocator: str
    seed: int
    initial_counts: tuple[int, ...]
    records: list[RoundRecord] = field(default_factory=list)
    final_weights: np.ndarray | None = None

    @property
    def final_loss(self) -> float:
        return self.records[-1].global_loss if self.records else math.nan

    def header(self, num_nodes: int) -> list[str]:
        cols = ["t", "global_loss", "grad_norm", "sum_power", "warmup"]
        for name in ("count", "new", "loss", "alpha"):
            cols += [f"{name}_{i}" for i in range(num_nodes)]
        return cols

    def rows(self) -> list[list]:
        out = []
        for r in self.records:
            row = [r.t, repr(r.global_loss), repr(r.grad_norm), repr(r.sum_power), " ".join(map(str, r.warmup))]
            row += list(r.counts) + list(r.new_samples)
            row += [repr(v) for v in r.node_loss] + [repr(v) for v in r.weights]
            out.append(row)
        return out


Allocator = Callable[[AllocationProblem], np.ndarray]


def _allocate(name, prob: AllocationProblem, settings: SimSettings, seed: int) -> np.ndarray:
    if callable(name):
        return np.asarray(name(prob), dtype=float)
    if name == "uniform":
        return uniform_allocate(prob)
    if name == "srm":
        return srm_allocate(prob, restarts=settings.srm_restarts, seed=seed)
    if name == "mm":
        return solve_mm(prob, settings.mm).p_opt
    if name == "fom":
        return solve_fom(prob, settings.fom).p_opt
    raise ValueError(f"unknown allocator {name!r}")


def _sub_problem(cfg, channels, counts, nodes, budget):
    devs = np.concatenate([np.asarray(cfg.node_devices[i]) for i in nodes])
    owner = np.concatenate([np.full(len(cfg.node_devices[i]), j) for j, i in enumerate(nodes)])
    bits = np.asarray(cfg.bits_per_sample)[devs]
    return devs, AllocationProblem(
        gains=channels.gains[np.ix_(devs, devs)],
        noise_power=cfg.noise_power,
        scale=cfg.bandwidth * cfg.tx_time / (bits * math.log(2.0)),
        caps=np.asarray(cfg.dataset_caps)[nodes],
        initial=np.asarray(counts, dtype=float)[nodes],
        node_of=owner,
        budget=budget,
    )


def warmup_threshold(cfg: NetworkConfig, xi2: float | None) -> float:
    """Nodes holding at most this many samples are in warm-up."""
    if xi2 is None:
        return 0.0
    return max(min_samples(D, xi2) for D in cfg.dataset_caps)


def run_online(
    cfg: NetworkConfig,
    allocator: str | Allocator,
    task: SyntheticTask,
    rounds: int,
    seed: int = 0,
    settings: SimSettings = SimSettings(),
) -> TrainingTrace:
    """Simulate ``rounds`` rounds of allocation, collection and federated training.

    Warm-up nodes (at most :func:`warmup_threshold` samples) get ``P/K`` per
    device outside the allocator and skip training until they leave warm-up;
    the allocator splits the remaining budget over the other nodes.
    Aggregation weights are ``D_i`` normalized over the nodes that trained.
    """
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    name = allocator if isinstance(allocator, str) else getattr(allocator, "__name__", "custom")
    I, K = cfg.num_nodes, cfg.num_devices
    caps = np.asarray(cfg.dataset_caps, dtype=float)
    counts = np.floor(np.asarray(cfg.initial_samples, dtype=float)).astype(int)
    pools = [task.sample(int(D), ch.make_rng(subseed(seed, 1, i))) for i, D in enumerate(cfg.dataset_caps)]
    X_test, y_test = task.sample(settings.test_size, ch.make_rng(subseed(seed, 2)))
    channels = ch.sample_channels(cfg, subseed(seed, 3, 0))
    threshold = warmup_threshold(cfg, settings.xi2)
    w = task.init_weights()
    trace = TrainingTrace(allocator=name, seed=seed, initial_counts=tuple(int(c) for c in counts))

    for t in range(1, rounds + 1):
        if settings.channel_policy == "redraw" and t > 1:
            channels = ch.sample_channels(cfg, subseed(seed, 3, t))
        warm = np.flatnonzero(counts <= threshold)
        active_nodes = np.setdiff1d(np.arange(I), warm)
        p = np.zeros(K)
        per_dev = cfg.power_budget / K
        for i in warm:
            p[list(cfg.node_devices[i])] = per_dev
        if active_nodes.size:
            budget = cfg.power_budget - per_dev * sum(len(cfg.node_devices[i]) for i in warm)
            devs, sub = _sub_problem(cfg, channels, counts, active_nodes, budget)
            p[devs] = _allocate(allocator, sub, settings, subseed(seed, 4, t))
        p = np.maximum(p, 0.0)

        new_dev = ch.device_samples(channels.gains, p, cfg.noise_power, cfg, floored=True).astype(int)
        new_node = np.bincount(cfg.node_of, weights=new_dev, minlength=I).astype(int)
        counts = np.minimum(caps.astype(int), counts + new_node)

        trained = [i for i in range(I) if i not in set(warm.tolist()) and counts[i] >= 1]
        alpha = np.zeros(I)
        if trained:
            locals_ = []
            for i in trained:
                X, y = pools[i][0][: counts[i]], pools[i][1][: counts[i]]
                locals_.append(local_sgd_round(task.grad, w, X, y, settings.lr, settings.local_epochs))
            alpha[trained] = caps[trained] / caps[trained].sum()
            w = aggregate(locals_, alpha[trained])

        node_loss = tuple(
            task.loss(w, pools[i][0][: counts[i]], pools[i][1][: counts[i]]) if counts[i] else math.nan for i in range(I)
        )
        if trained:
            g = sum(alpha[i] * task.grad(w, pools[i][0][: counts[i]], pools[i][1][: counts[i]]) for i in trained)
            gnorm = float(np.linalg.norm(g))
        else:
            gnorm = math.nan
        trace.records.append(
            RoundRecord(
                t=t,
                counts=tuple(int(c) for c in counts),
                new_samples=tuple(int(c) for c in new_node),
                node_loss=node_loss,
                global_loss=task.loss(w, X_test, y_test),
                weights=tuple(float(a) for a in alpha),
                grad_norm=gnorm,
                sum_power=float(p.sum()),
                warmup=tuple(int(i) for i in warm),
            )
        )
    trace.final_weights = w
    return trace


# -- learning curves and gradient statistics -------------------------------------------

@dataclass
class MeasuredCurve:
    points: list[tuple[int, float]]
    converged: list[bool]
    epochs: list[int]


def train_to_convergence(task: SyntheticTask, X, y, max_epochs: int = 5000, window: int = 50, tol: float = 1e-6):
    """Full-batch gradient descent with step ``1/L`` from zero weights.

    Stops once the training loss changed by less than ``tol`` over the last
    ``window`` epochs. Returns ``(weights, epochs, converged)``.
    """
    lr = 1.0 / task.smoothness(X)
    w = task.init_weights()
    history = [task.loss(w, X, y)]
    for epoch in range(1, max_epochs + 1):
        w = w - lr * task.grad(w, X, y)
        history.append(task.loss(w, X, y))
        if epoch >= window and abs(history[-1 - window] - history[-1]) < tol:
            return w, epoch, True
    return w, max_epochs, False


def measure_loss_curve(
    task: SyntheticTask,
    sizes: Sequence[int],
    seed: int = 0,
    test_size: int = 5000,
    max_epochs: int = 5000,
    window: int = 50,
    tol: float = 1e-6,
) -> MeasuredCurve:
    """Held-out loss after training to convergence on nested prefixes of one pool."""
    sizes = [int(n) for n in sizes]
    if not sizes or sizes[0] < 1 or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be positive and strictly increasing")
    X, y = task.sample(sizes[-1], ch.make_rng(subseed(seed, 5)))
    X_test, y_test = task.sample(test_size, ch.make_rng(subseed(seed, 6)))
    points, conv, epochs = [], [], []
    for n in sizes:
        w, ep, ok = train_to_convergence(task, X[:n], y[:n], max_epochs, window, tol)
        if not ok:
            warnings.warn(f"training on {n} samples did not converge within {max_epochs} epochs")
        points.append((n, task.loss(w, X_test, y_test)))
        conv.append(ok)
        epochs.append(ep)
    return MeasuredCurve(points=points, converged=conv, epochs=epochs)


def gradient_statistics(task: SyntheticTask, X, y, weights: Sequence[np.ndarray]) -> list[tuple[float, float]]:
    """``(mean ||grad f||^2, ||grad F||^2)`` at each weight, for estimating xi."""
    out = []
    for w in weights:
        per = task.per_sample_grad_sq(w, X, y)
        full = task.grad(w, X, y)
        out.append((float(per.mean()), float(np.sum(full * full))))
    return out


def trajectory(task: SyntheticTask, X, y, epochs: int, every: int = 1) -> list[np.ndarray]:
    """Weights visited by full-batch gradient descent with step ``1/L``."""
    lr = 1.0 / task.smoothness(X)
    w = task.init_weights()
    out = [w]
    for e in range(1, epochs + 1):
        w = w - lr * task.grad(w, X, y)
        if e % every == 0:
            out.append(w)
    return out


# -- reporting ratios ------------------------------------------------------------------

def _ratio(a, b, what):
    if a < 0 or b < 0 or a + b == 0:
        raise DomainError(f"{what}: need nonnegative counts with a positive total")
    return a / (a + b)


def learning_ratio(train_time: float, opt_time: float) -> float:
    """Share of wall time spent learning rather than optimizing."""
    return _ratio(train_time, opt_time, "learning_ratio")


def collision_rate(collisions: int, avoidances: int) -> float:
    return _ratio(collisions, avoidances, "collision_rate")


def goal_rate(goals: int, failures: int) -> float:
    return _ratio(goals, failures, "goal_rate")
