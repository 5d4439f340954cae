"""Training-curve and per-class-delta figures, rendered headless to PNG."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def loss_curves(series: dict[str, dict[str, list]], path) -> Path:
    """``series[run] = {"epoch": [...], "total": [...], ...}``; one panel per component."""
    parts = ("total", "classification", "regression", "objectness")
    fig, axes = plt.subplots(1, len(parts), figsize=(4 * len(parts), 3.2))
    for ax, part in zip(axes, parts):
        for run, s in series.items():
            ax.plot(s["epoch"], s[part], label=run)
        ax.set_title(part)
        ax.set_xlabel("epoch")
    axes[0].legend(fontsize=7)
    return _save(fig, path)


def epoch_curve(series: dict[str, tuple[list, list]], path, ylabel: str, title: str) -> Path:
    """One line per run of ``(epochs, values)``; ``None`` values are skipped."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    drawn = 0
    for run, (epochs, values) in series.items():
        pts = [(e, v) for e, v in zip(epochs, values) if v is not None]
        if pts:
            ax.plot(*zip(*pts), label=run)
            drawn += 1
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if drawn:
        ax.legend(fontsize=7)
    return _save(fig, path)


def per_class_delta(names: list[str], deltas: list[float], path) -> Path:
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(names) + 2), 3.2))
    colors = ["tab:green" if d >= 0 else "tab:red" for d in deltas]
    ax.bar(range(len(names)), deltas, color=colors)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylabel("AP50:95 change")
    return _save(fig, path)
