"""Render report figures (PNG) next to the delimited outputs.

Training runs get a loss / validation-MAE curve, grid searches get a
best-MAE-per-window chart with per-epoch trajectories, and evaluations get a
per-image metric chart.  All rendering uses the Agg backend so the CLI works
headless.
"""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .cnn import EpochRecord
from .metrics import EvalResult
from .selection import SelectionReport


def save_training_figure(records: Sequence[EpochRecord], path: str | os.PathLike) -> None:
    epochs = [r.epoch for r in records]
    fig, ax1 = plt.subplots(figsize=(7, 4.5))
    ax1.plot(epochs, [r.train_loss for r in records], "o-", color="tab:blue", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("mean training loss", color="tab:blue")
    ax1.tick_params(axis="y", labelcolor="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [r.val_mae for r in records], "s--", color="tab:red", label="validation MAE")
    ax2.set_ylabel("validation MAE", color="tab:red")
    ax2.tick_params(axis="y", labelcolor="tab:red")
    ax1.set_title("Training progress")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_selection_figure(report: SelectionReport, path: str | os.PathLike) -> None:
    finite = [r for r in report.records if not r.diverged]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4.5))

    best = report.best_per_window()
    masks = sorted({r.mask for r in finite})
    for mask in masks:
        windows = sorted({r.window for r in finite if r.mask == mask})
        maes = []
        for w in windows:
            cands = [r for r in finite if r.window == w and r.mask == mask]
            maes.append(min(c.val_mae for c in cands))
        label = f"mask {mask}x{mask}" if len(masks) > 1 else "best per window"
        ax1.plot(windows, maes, "o-", label=label)
    ax1.set_xlabel("window size")
    ax1.set_ylabel("best validation MAE")
    ax1.set_title("Model selection: best MAE per window")
    ax1.legend()

    for w, b in sorted(best.items()):
        traj = sorted(
            (
                r
                for r in finite
                if (r.window, r.lr, r.dropout, r.mask) == (w, b.lr, b.dropout, b.mask)
            ),
            key=lambda r: r.epoch,
        )
        ax2.plot(
            [r.epoch for r in traj],
            [r.val_mae for r in traj],
            label=f"{w}x{w} lr={b.lr:g} d={b.dropout:g}",
        )
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation MAE")
    ax2.set_title("Best cell per window: MAE by epoch")
    ax2.legend(fontsize=8)

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_eval_figure(
    image_ids: Sequence[str], results: Sequence[EvalResult], path: str | os.PathLike
) -> None:
    n = len(results)
    xs = range(n)
    fig, ax = plt.subplots(figsize=(max(7, 0.45 * n + 3), 4.5))
    width = 0.27
    ax.bar([x - width for x in xs], [r.accuracy for r in results], width, label="accuracy")
    ax.bar(list(xs), [r.specificity for r in results], width, label="specificity")
    ax.bar([x + width for x in xs], [r.recall for r in results], width, label="recall")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(image_ids, rotation=45, ha="right", fontsize=7)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("score (input-foreground pixels)")
    ax.set_title("Staff-removal evaluation")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
