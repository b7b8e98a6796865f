"""Figure rendering for run records and replication batches.

Every function draws one figure and writes it to a file (PNG by
default, any extension matplotlib recognizes).  Rendering is headless
(Agg backend) so these work in batch jobs and CI.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .records import RunRecord

__all__ = [
    "plot_cumulative_error",
    "plot_prediction_vs_truth",
    "plot_mse_distribution",
    "plot_weight_trajectories",
]


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_cumulative_error(records: dict[str, RunRecord], path: str | Path) -> Path:
    """Cumulative squared prediction error over the evaluation range, per rule."""
    if not records:
        raise ValueError("no records to plot")
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label in sorted(records):
        record = records[label]
        sl = record.eval_slice
        t = np.arange(record.eval_start, record.T + 1)
        ax.plot(t, np.cumsum(record.sq_error[sl]), label=label, linewidth=1.2)
    ax.set_xlabel("t")
    ax.set_ylabel("cumulative squared error")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    return _finish(fig, path)


def plot_prediction_vs_truth(record: RunRecord, path: str | Path, last_n: int = 200) -> Path:
    """Observations and aggregate predictions over the tail of the run."""
    if last_n < 1:
        raise ValueError(f"last_n must be >= 1, got {last_n}")
    start = max(record.eval_start - 1, record.T - last_n)
    t = np.arange(start + 1, record.T + 1)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(t, record.y[start:], label="observed", color="black", linewidth=0.8, alpha=0.7)
    ax.plot(t, record.y_hat[start:], label=f"{record.rule} prediction", linewidth=1.2)
    if record.mu is not None:
        ax.plot(
            t,
            record.mu[start:],
            label="conditional mean",
            linestyle="--",
            linewidth=1.0,
            alpha=0.8,
        )
    ax.set_xlabel("t")
    ax.set_ylabel("y")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    return _finish(fig, path)


def plot_mse_distribution(rows: list[dict], path: str | Path) -> Path:
    """Box plot of per-replication MSE for each rule.

    ``rows`` are replication summary rows with at least ``rule`` and
    ``mse`` keys (as produced by the replication runner).
    """
    by_rule: dict[str, list[float]] = {}
    for row in rows:
        by_rule.setdefault(str(row["rule"]), []).append(float(row["mse"]))
    if not by_rule:
        raise ValueError("no rows to plot")
    labels = sorted(by_rule)
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(labels), 4.5))
    ax.boxplot([by_rule[k] for k in labels], tick_labels=labels)
    ax.set_ylabel("MSE")
    ax.tick_params(axis="x", rotation=30)
    ax.grid(True, axis="y", alpha=0.3)
    return _finish(fig, path)


def plot_weight_trajectories(
    record: RunRecord, path: str | Path, legend_top: int = 8
) -> Path:
    """Every expert's weight over time; the heaviest experts get the legend."""
    if legend_top < 0:
        raise ValueError(f"legend_top must be >= 0, got {legend_top}")
    t = np.arange(1, record.T + 1)
    peak = record.rho.max(axis=0)
    top = set(np.argsort(peak)[::-1][:legend_top])
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for m in range(record.n_experts):
        name = record.expert_names[m]
        ax.plot(
            t,
            record.rho[:, m],
            linewidth=1.2 if m in top else 0.6,
            alpha=1.0 if m in top else 0.4,
            label=name if m in top else None,
        )
    ax.set_xlabel("t")
    ax.set_ylabel("weight")
    ax.set_ylim(-0.02, 1.02)
    if top:
        ax.legend(fontsize=7)
    ax.grid(True, alpha=0.3)
    return _finish(fig, path)
