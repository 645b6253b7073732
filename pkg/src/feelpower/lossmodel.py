"""Expected-loss curves and the data-deficit convergence bound.

The expected learning loss after collecting ``n`` samples is modelled as
``a * n**(-b)``. The convergence bound ties SGD progress to the squared
fraction of data still missing, ``alpha = ((D - n) / D)**2``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .channel import DomainError


class DegenerateInputError(ValueError):
    pass


class ContractionError(DomainError):
    """``4 * xi2 * alpha >= 1``: too little data for the bound to contract."""


class ParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class LossCurve:
    a: float
    b: float
    residual: float
    fallback: bool = False

    def __call__(self, n):
        return expected_loss(self, n)


@dataclass(frozen=True)
class BoundParams:
    xi1: float
    xi2: float
    L_smooth: float
    C0: float

    def __post_init__(self):
        if self.xi1 < 0 or self.xi2 <= 0 or self.L_smooth <= 0:
            raise DomainError("need xi1 >= 0, xi2 > 0, L_smooth > 0")


def expected_loss(curve: LossCurve, n):
    n = np.asarray(n, dtype=float)
    if np.any(n < 1):
        raise DomainError("sample count must be >= 1")
    out = curve.a * n ** (-curve.b)
    return float(out) if out.ndim == 0 else out


def _mse(a, b, n, y):
    return float(np.mean((a * n ** (-b) - y) ** 2))


def fit_power_law(points: Iterable[Sequence[float]], max_iter: int = 200, tol: float = 1e-15) -> LossCurve:
    """Least-squares fit of ``loss ~ a * n**(-b)`` with ``a, b > 0``.

    Starts from the closed-form log-log regression and refines the
    untransformed mean squared error with damped Gauss-Newton steps. If the
    refinement fails to improve on the start, the log-log estimate is kept
    and ``fallback`` is set.
    """
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise DegenerateInputError("need at least two (n, loss) points")
    n, y = pts[:, 0], pts[:, 1]
    if np.any(n < 1) or np.any(y <= 0):
        raise DegenerateInputError("need n >= 1 and loss > 0")
    if np.unique(n).size < 2:
        raise DegenerateInputError("need at least two distinct sample sizes")

    slope, intercept = np.polyfit(np.log(n), np.log(y), 1)
    a0, b0 = math.exp(intercept), max(-slope, 1e-12)
    a, b = a0, b0
    f = _mse(a, b, n, y)
    lam = 1e-3
    ln_n = np.log(n)
    for _ in range(max_iter):
        m = n ** (-b)
        r = a * m - y
        J = np.column_stack([m, -a * m * ln_n])
        JTJ = J.T @ J
        g = J.T @ r
        if np.linalg.norm(g) <= 1e-300:
            break
        improved = False
        for _ in range(40):
            step = np.linalg.solve(JTJ + lam * np.diag(np.diag(JTJ) + 1e-300), -g)
            a_new, b_new = a + step[0], b + step[1]
            if a_new > 0 and b_new > 0:
                f_new = _mse(a_new, b_new, n, y)
                if f_new <= f:
                    improved = True
                    break
            lam *= 10.0
        if not improved:
            break
        done = f - f_new <= tol * max(f, 1e-300) or f_new == 0.0
        a, b, f = a_new, b_new, f_new
        lam = max(lam / 10.0, 1e-12)
        if done:
            break

    if not (np.isfinite(a) and np.isfinite(b)) or f > _mse(a0, b0, n, y):
        warnings.warn("power-law refinement diverged; keeping log-log estimate")
        return LossCurve(a0, b0, _mse(a0, b0, n, y), fallback=True)
    return LossCurve(float(a), float(b), f)


def data_deficit(D: float, collected: float) -> float:
    """Squared fraction of the dataset that has not been collected yet."""
    if not D > 0 or not 0 <= collected <= D:
        raise DomainError("need D > 0 and 0 <= collected <= D")
    return ((D - collected) / D) ** 2


def convergence_bound(params: BoundParams, alpha: float, t: int) -> float:
    """Upper bound on the expected optimality gap after ``t`` rounds."""
    if t < 0:
        raise DomainError("t must be >= 0")
    rate = 4.0 * params.xi2 * alpha
    if rate >= 1.0:
        raise ContractionError(f"4*xi2*alpha = {rate:.6g} >= 1; collect more samples")
    floor = 2.0 * alpha * params.xi1 / ((1.0 - rate) * params.L_smooth)
    return rate**t * (params.C0 + floor) + floor


def variance_floor(params: BoundParams, alpha: float) -> float:
    rate = 4.0 * params.xi2 * alpha
    if rate >= 1.0:
        raise ContractionError(f"4*xi2*alpha = {rate:.6g} >= 1")
    return 2.0 * alpha * params.xi1 / ((1.0 - rate) * params.L_smooth)


def min_samples(D: float, xi2: float) -> float:
    """Strict lower bound on collected samples for the bound to contract.

    Callers need ``collected > min_samples(D, xi2)``. Negative thresholds
    (``xi2 < 1/4``) are clamped to zero.
    """
    if not D > 0 or not xi2 > 0:
        raise DomainError("need D > 0 and xi2 > 0")
    return max(0.0, D - D / (2.0 * math.sqrt(xi2)))


def estimate_xi(observations: Iterable[Sequence[float]], method: str = "lstsq", quantile: float = 0.95) -> tuple[float, float]:
    """Fit ``E||grad f||^2 ~ xi1 + xi2 * ||grad F||^2`` from gradient moments.

    Each observation is ``(mean per-sample squared grad norm, squared full
    grad norm)``. ``method="quantile"`` keeps the least-squares slope but
    raises the intercept until the line lies above the given quantile of the
    residuals, which gives a more conservative ``xi1``. Results are clamped
    to ``xi1 >= 0`` and ``xi2 > 0``.
    """
    obs = np.asarray(list(observations), dtype=float)
    if obs.ndim != 2 or obs.shape[0] < 2:
        raise DegenerateInputError("need at least two observations")
    y, x = obs[:, 0], obs[:, 1]
    if np.ptp(x) == 0:
        raise DegenerateInputError("full-gradient norms must not all be equal")
    xi2, xi1 = np.polyfit(x, y, 1)
    xi2 = max(float(xi2), 1e-12)
    if method == "quantile":
        xi1 = float(np.quantile(y - xi2 * x, quantile))
    elif method != "lstsq":
        raise ValueError(f"unknown method {method!r}")
    return max(float(xi1), 0.0), xi2


def read_points_csv(lines: Iterable[str]) -> list[tuple[float, float]]:
    """Parse ``n,loss`` rows; ``#`` lines and a leading header are skipped."""
    out = []
    seen_header = False
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        row = next(csv.reader([line]))
        if not seen_header and not out and row and row[0].strip().lower() == "n":
            seen_header = True
            continue
        if len(row) < 2:
            raise ParseError(f"expected 2 columns, got {len(row)}", lineno)
        try:
            out.append((float(row[0]), float(row[1])))
        except ValueError:
            raise ParseError(f"non-numeric value in {line!r}", lineno) from None
    return out
