"""PNG figures for the CLI reports (written next to the CSV files).

Only imported when ``--plot`` is given, so matplotlib stays off the import
path of the library itself.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}
# keep PNG bytes stable between runs
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def objective_trace(traces: dict[str, list[float]], path, ylabel="objective"):
    """One line per named trace, log-scaled when the values allow it."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, values in traces.items():
            ax.plot(np.arange(len(values)), values, marker="o", ms=2.5, lw=1, label=name)
        if all(min(v) > 0 for v in traces.values() if len(v)):
            ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel(ylabel)
        if len(traces) > 1:
            ax.legend()
        return _save(fig, path)


def loss_by_round(curves: dict[str, tuple[list[int], list[float]]], path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, (t, loss) in curves.items():
            ax.plot(t, loss, marker="o", ms=3, lw=1, label=name)
        ax.set_xlabel("round")
        ax.set_ylabel("held-out loss")
        ax.legend()
        return _save(fig, path)


def compare_bars(names: list[str], values: list[float], path, ylabel="capped sample deficit"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(names, values, color="0.45", width=0.6)
        ax.set_ylabel(ylabel)
        return _save(fig, path)


def loss_curve(points, a: float, b: float, path):
    """Measured ``(n, loss)`` points and the fitted ``a * n**(-b)``."""
    n = np.array([p[0] for p in points], dtype=float)
    y = np.array([p[1] for p in points], dtype=float)
    grid = np.linspace(n.min(), n.max(), 200)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(n, y, "o", ms=3.5, color="k", label="measured")
        ax.plot(grid, a * grid ** (-b), lw=1.2, label=f"fit: {a:.3g} n^-{b:.3g}")
        ax.set_xlabel("training samples n")
        ax.set_ylabel("loss")
        ax.legend()
        return _save(fig, path)


def bound_curve(t, bound, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(t, bound, lw=1.2)
        ax.set_xlabel("round t")
        ax.set_ylabel("optimality-gap bound")
        return _save(fig, path)
