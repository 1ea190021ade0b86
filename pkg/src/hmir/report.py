"""Render profiling output: a per-level CSV plus diagnostic figures."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import Diagnostics

PER_LEVEL_FIELDS = ("level", "mean_gt_rank", "recall_at_10", "mean_tau")


def write_per_level_csv(diag: Diagnostics, path: str | Path) -> Path:
    """One row per level: ground-truth rank, recall@10 and rank-agreement
    when scoring is cut off after that level."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PER_LEVEL_FIELDS)
        for profile in diag.per_level:
            writer.writerow([
                profile.level,
                f"{profile.mean_gt_rank:.6f}",
                f"{profile.recall_at_10:.6f}",
                "" if profile.mean_tau is None else f"{profile.mean_tau:.6f}",
            ])
    return path


def render_figures(diag: Diagnostics, out_dir: str | Path) -> list[Path]:
    """Write the three diagnostic figures into ``out_dir`` and return their
    paths: ground-truth rank distribution per level, which level each
    sub-query matched best at, and top-k agreement between adjacent levels."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    levels = [p.level for p in diag.per_level]
    written: list[Path] = []

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.boxplot([p.gt_ranks for p in diag.per_level], tick_labels=[str(l) for l in levels])
    ax.set_yscale("log")
    ax.set_xlabel("finest level included")
    ax.set_ylabel("ground-truth rank")
    ax.set_title(f"Rank by scoring depth ({diag.sample_size} queries)")
    fig.tight_layout()
    path = out_dir / "rank_distribution.png"
    fig.savefig(path)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    counts = [diag.best_match_counts.get(l, 0) for l in diag.levels]
    ax.bar([str(l) for l in diag.levels], counts)
    ax.set_xlabel("level of best sub-query match")
    ax.set_ylabel("sub-queries")
    ax.set_title("Where sub-queries match best")
    fig.tight_layout()
    path = out_dir / "best_match_granularity.png"
    fig.savefig(path)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [p.level for p in diag.per_level if p.mean_tau is not None]
    ys = [p.mean_tau for p in diag.per_level if p.mean_tau is not None]
    ax.plot(xs, ys, marker="o")
    ax.set_ylim(-1.05, 1.05)
    ax.set_xlabel("level")
    ax.set_ylabel("mean top-k agreement with previous level")
    ax.set_title("Ranking stability across levels")
    fig.tight_layout()
    path = out_dir / "tau_convergence.png"
    fig.savefig(path)
    plt.close(fig)
    written.append(path)

    return written
