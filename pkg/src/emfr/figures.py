"""Matplotlib rendering of report figures, written next to the delimited
output of each reporting subcommand."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .corpus import HistogramBin
from .tagger import CENTURIES, GENRE_CLASSES, STATES, EvalReport


def save_year_histogram(bins: list[HistogramBin], path: str | Path,
                        title: str = "Documents per year") -> None:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    if bins:
        width = bins[0].end - bins[0].start
        ax.bar([b.start for b in bins], [b.count for b in bins],
               width=width * 0.9, align="edge", color="#4878b0")
    ax.set_xlabel("year")
    ax.set_ylabel("documents")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_loss_curve(rows: list[tuple[int, float, float]], path: str | Path) -> None:
    fig, (ax_loss, ax_lr) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    steps = [r[0] for r in rows]
    ax_loss.plot(steps, [r[2] for r in rows], color="#4878b0", lw=0.8)
    ax_loss.set_ylabel("loss")
    ax_lr.plot(steps, [r[1] for r in rows], color="#b04848", lw=0.8)
    ax_lr.set_ylabel("learning rate")
    ax_lr.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_eval_grid(report: EvalReport, path: str | Path) -> None:
    """One accuracy heatmap per state, rows drama/varia/both, one column
    per century; empty cells are blank."""
    rows = (*GENRE_CLASSES, "both")
    fig, axes = plt.subplots(1, len(STATES), figsize=(9, 3))
    for ax, state in zip(np.atleast_1d(axes), STATES):
        grid = np.full((len(rows), len(CENTURIES)), np.nan)
        for i, genre in enumerate(rows):
            for j, century in enumerate(CENTURIES):
                cell = (report.both_cell(state, century) if genre == "both"
                        else report.cells.get((state, genre, century)))
                if cell is not None and cell.total > 0:
                    grid[i, j] = 100.0 * cell.accuracy
        im = ax.imshow(grid, vmin=0, vmax=100, cmap="viridis")
        ax.set_xticks(range(len(CENTURIES)), [str(c) for c in CENTURIES])
        ax.set_yticks(range(len(rows)), rows)
        ax.set_title(state)
        for i in range(len(rows)):
            for j in range(len(CENTURIES)):
                if not np.isnan(grid[i, j]):
                    ax.text(j, i, f"{grid[i, j]:.1f}", ha="center", va="center",
                            color="white", fontsize=7)
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_carbon_bars(names: list[str], co2e_kgs: list[float],
                     path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(names, co2e_kgs, color="#4878b0")
    ax.set_ylabel("CO2e (kg)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
