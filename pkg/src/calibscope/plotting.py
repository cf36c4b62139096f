"""Figures written next to the CSV reports: reliability bars and trajectories."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")  # headless, save-only
import matplotlib.pyplot as plt

from .dynamics import OVER_FITTED, UNDER_FITTED, StateReport, TrajectoryPoint
from .metrics import ReliabilityBin, ece_from_bins

FIGURE_SIZE = (6.0, 4.5)
DPI = 150
STATE_COLORS = {UNDER_FITTED: "#9ecae1", OVER_FITTED: "#fcbba1"}


def reliability_figure(diagram: list[ReliabilityBin], path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=FIGURE_SIZE)
    centers = [(b.lo + b.hi) / 2 for b in diagram]
    widths = [max(b.hi - b.lo, 0.004) for b in diagram]
    ax.bar(centers, [b.accuracy for b in diagram], width=widths, color="#4c72b0",
           edgecolor="white", linewidth=0.3, label="accuracy")
    ax.scatter([b.mean_conf for b in diagram], [b.accuracy for b in diagram], s=6, color="k",
               zorder=3, label="(mean confidence, accuracy)")
    ax.plot([0, 1], [0, 1], ls="--", color="grey", lw=1)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    ax.set_title(title or f"ECE = {ece_from_bins(diagram):.4f}")
    ax.legend(loc="upper left", fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def trajectory_figure(traj: list[TrajectoryPoint], report: StateReport | None, path,
                      title: str = "") -> None:
    steps = [p.step for p in traj]
    fig, ax = plt.subplots(figsize=(8.0, 4.5))
    if report is not None:
        # shade contiguous runs of one state; runs meet halfway between checkpoints
        edges = [steps[0]] + [(a + b) / 2 for a, b in zip(steps, steps[1:])] + [steps[-1]]
        start = 0
        seen = set()
        for i in range(1, len(traj) + 1):
            if i == len(traj) or report.labels[i] != report.labels[start]:
                state = report.labels[start]
                color = STATE_COLORS.get(state)
                if color:
                    label = state.replace("_", "-") if state not in seen else None
                    seen.add(state)
                    ax.axvspan(edges[start], edges[i], color=color, alpha=0.35, lw=0, label=label)
                start = i
        if report.transition_step is not None:
            ax.axvline(report.transition_step, color="k", ls=":", lw=1)
    series = {
        "Acc": [p.acc for p in traj],
        "Conf": [p.conf for p in traj],
        "ECE": [p.ece for p in traj],
        "CErr_pos": [p.cerr_pos for p in traj],
        "CErr_neg": [p.cerr_neg for p in traj],
    }
    for name, values in series.items():
        pts = [(s, v) for s, v in zip(steps, values) if v is not None]
        if pts:
            ax.plot(*zip(*pts), label=name, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylim(0, 1)
    ax.set_title(title)
    ax.legend(loc="center right", fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
