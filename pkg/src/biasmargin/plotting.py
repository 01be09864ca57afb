"""Figures for sweep reports (file output only, Agg backend)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_axis(recs: list[dict], axis: str, path: str | Path) -> Path:
    """Median excess error and median bound value against one grid axis."""
    path = Path(path)
    xs = [float(r[axis]) for r in recs]
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.plot(xs, [r["median_excess_err"] for r in recs], "o-", label="median clean error - eta")
    rhs = [r["median_bound_excess"] for r in recs]
    if all(math.isfinite(v) for v in rhs):
        ax.plot(xs, rhs, "s--", label="bound rhs - eta")
    if axis in ("n", "p") and min(xs) > 0:
        ax.set_xscale("log")
    ax.set_xlabel(axis)
    ax.set_ylabel("error")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
