"""Figure rendering for the report-producing commands.

Evaluation and query-loop commands write CSV as the machine-readable output;
these helpers render the matching PNG next to it. Uses the Agg backend so
headless runs work.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def plot_active_trace(
    trace: Sequence[tuple[int, int, float]],
    out_path: str | Path,
    passive_accuracy: float | None = None,
    title: str = "Query loop: accuracy vs labeled pairs",
) -> Path:
    """Accuracy-versus-labeled-count curve for one query-loop run."""
    counts = [c for _, c, _ in trace]
    accs = [a for _, _, a in trace]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(counts, accs, marker="o", lw=1.5, label="active")
    if passive_accuracy is not None:
        ax.axhline(passive_accuracy, color="gray", ls="--", lw=1, label="passive (all labels)")
    ax.set_xlabel("labeled training pairs")
    ax.set_ylabel("test accuracy")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    out = Path(out_path)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_fold_accuracies(
    accuracies: Sequence[float],
    out_path: str | Path,
    title: str = "Cross-validation accuracy per fold",
) -> Path:
    """Per-fold accuracy bars with the mean drawn across them."""
    import numpy as np

    fig, ax = plt.subplots(figsize=(6, 4))
    xs = range(len(accuracies))
    ax.bar(xs, accuracies, color="#4878cf", width=0.7)
    mean = float(np.mean(accuracies))
    ax.axhline(mean, color="firebrick", ls="--", lw=1.2, label=f"mean {mean:.4f}")
    ax.set_xlabel("fold")
    ax.set_ylabel("accuracy")
    ax.set_xticks(list(xs))
    ax.set_ylim(0.0, 1.05)
    ax.set_title(title)
    ax.legend(loc="lower right")
    out = Path(out_path)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
