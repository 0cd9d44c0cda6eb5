"""Matplotlib figures written as standalone SVG files."""

from __future__ import annotations

import math
from collections import defaultdict
from typing import Iterable, Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOG_FLOOR = 1e-12

golden_mean = (math.sqrt(5) - 1.0) / 2.0
fig_width = 5.0

params = {
    "figure.figsize": [fig_width, fig_width * golden_mean],
    "font.size": 9,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
    "axes.grid": True,
    "grid.alpha": 0.3,
    # glyphs as paths keep the SVG self-contained; fixed salt keeps ids stable
    "svg.fonttype": "path",
    "svg.hashsalt": "agnostic-fedavg",
}

RULE_COLORS = {"agnostic": "tab:blue", "weighted": "tab:green"}


def _save(fig, out_path) -> None:
    fig.savefig(out_path, format="svg", bbox_inches="tight", metadata={"Date": None})
    plt.close(fig)


def plot_loss_curves(rows: Iterable[Mapping], out_path, column: str = "objective_aggregate",
                     ylabel: str | None = None) -> int:
    """Seed-averaged objective per round, one line per rule, log-scale y.

    Returns the number of plotted series.
    """
    acc: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for row in rows:
        acc[str(row["rule"])][int(row["round"])].append(float(row[column]))
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        for rule in sorted(acc):
            rounds = sorted(acc[rule])
            means = [max(sum(acc[rule][r]) / len(acc[rule][r]), LOG_FLOOR) for r in rounds]
            (line,) = ax.plot(rounds, means, label=rule, color=RULE_COLORS.get(rule))
            line.set_gid(f"series-{rule}")
        ax.set_yscale("log")
        ax.set_xlabel("communication round")
        ax.set_ylabel(ylabel or column.replace("_", " "))
        ax.legend(loc="upper right").set_gid("legend")
        _save(fig, out_path)
    return len(acc)


def plot_skew_scatter(rows: Iterable[Mapping], out_path) -> int:
    """Weighted-minus-agnostic loss against participation skew, one dot per row."""
    xs, ys = [], []
    for row in rows:
        xs.append(float(row["skew"]))
        ys.append(float(row["difference"]))
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        ax.axhline(0.0, color="0.4", linewidth=0.8, linestyle="--", gid="zero-line")
        coll = ax.scatter(xs, ys, color="tab:red", s=14, zorder=3)
        coll.set_gid("points")
        ax.set_xlabel(r"participation skew $\|p - \frac{1}{N}\mathbf{1}\|_1$")
        ax.set_ylabel("loss difference (weighted - agnostic)")
        _save(fig, out_path)
    return len(xs)
