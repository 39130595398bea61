"""Figures for exploration sessions, filter frontiers and adaptation runs.

Everything renders off-screen (Agg) straight to files; callers pass a
directory and get back the paths written.
"""

import os
from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .filters import MetricPoint, pareto_filter  # noqa: E402

FIG_SIZE = (6.0, 4.0)
DPI = 120


def _style(ax):
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    ax.grid(True, alpha=0.3, linewidth=0.5)


def _save(fig, directory, name) -> str:
    Path(directory).mkdir(parents=True, exist_ok=True)
    path = os.path.join(directory, name)
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_history(report, directory, name="exploration_history.png") -> str:
    """Speedup per iteration plus the running best."""
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    xs = [it for it, s in report.history if s is not None]
    ys = [s for _, s in report.history if s is not None]
    best, run = [], 0.0
    for _, s in report.history:
        run = max(run, s or 0.0)
        best.append(run)
    ax.scatter(xs, ys, s=8, color="0.55", label="candidate")
    ax.step([it for it, _ in report.history], best, where="post", color="C0", label="best so far")
    ax.axhline(1.0, color="0.3", linewidth=0.8, linestyle=":")
    it95 = report.iterations_to_95pct
    if it95 is not None:
        ax.axvline(it95, color="C3", linewidth=0.8, linestyle="--", label=f"95% at {it95}")
    ax.set_xlabel("iteration")
    ax.set_ylabel(f"speedup over {report.config.reference_level}")
    ax.set_title(report.program)
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    return _save(fig, directory, name)


def plot_frontier(cases: Sequence, directory, name="frontier.png", title="") -> str:
    """Speedup against size ratio, frontier cases joined."""
    points = [MetricPoint.of(c) for c in cases if c.output_correct]
    front = sorted(pareto_filter(points), key=lambda p: p.size_ratio)
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    ax.scatter([p.size_ratio for p in points], [p.speedup for p in points], s=10, color="0.6",
               label="cases")
    ax.plot([p.size_ratio for p in front], [p.speedup for p in front], "o-", color="C1",
            markersize=4, label="Pareto frontier")
    ax.axhline(1.0, color="0.3", linewidth=0.8, linestyle=":")
    ax.axvline(1.0, color="0.3", linewidth=0.8, linestyle=":")
    ax.set_xlabel("size ratio (baseline size / case size)")
    ax.set_ylabel("speedup")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    return _save(fig, directory, name)


def plot_adaptation(report, directory, name="adaptation.png") -> str:
    """Cumulative time of the adaptive run against the per-phase oracle."""
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(FIG_SIZE[0], FIG_SIZE[1] * 1.4), sharex=True,
                                      gridspec_kw={"height_ratios": [2, 1]})
    acc, oracle, a, o = [], [], 0.0, 0.0
    for t, ot in zip(report.step_times, report.oracle_step_times):
        a += t
        o += ot
        acc.append(a)
        oracle.append(o)
    steps = range(1, len(acc) + 1)
    top.plot(steps, acc, color="C0", label="adaptive")
    top.plot(steps, oracle, color="0.4", linestyle="--", label="oracle")
    top.set_ylabel("cumulative time (s)")
    top.set_title(f"regret {100 * report.regret:.3f}%")
    top.legend(frameon=False, fontsize=8)
    bottom.step(steps, report.choices, where="post", color="C2", linewidth=0.8)
    calib = [i + 1 for i, c in enumerate(report.calibrating) if c]
    bottom.scatter(calib, [report.choices[i - 1] for i in calib], s=6, color="C3",
                   label="calibrating")
    bottom.set_xlabel("step")
    bottom.set_ylabel("clone")
    bottom.set_yticks(sorted(set(report.choices)))
    bottom.legend(frameon=False, fontsize=8)
    for ax in (top, bottom):
        _style(ax)
    return _save(fig, directory, name)


def plot_exploration(report, directory) -> List[str]:
    prefix = report.program.replace(os.sep, "_")
    return [plot_history(report, directory, f"{prefix}_history.png"),
            plot_frontier([report.baseline] + report.cases, directory, f"{prefix}_frontier.png",
                          report.program)]


__all__ = ["plot_adaptation", "plot_exploration", "plot_frontier", "plot_history"]
