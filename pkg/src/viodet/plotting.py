"""Report figures rendered to files (matplotlib, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evalkit import MetricsReport  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def ablation_bars(rows: Mapping[str, MetricsReport], path, columns: Sequence[str] = ("AP", "AP50", "AP75", "AR10")):
    """Grouped bars, one group per ablation row, values in percent."""
    labels = list(rows)
    x = np.arange(len(labels))
    width = 0.8 / len(columns)
    fig, ax = plt.subplots(figsize=(8, 4))
    for k, col in enumerate(columns):
        vals = [100 * (getattr(rows[r], col) or 0.0) for r in labels]
        ax.bar(x + (k - (len(columns) - 1) / 2) * width, vals, width, label=col)
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_ylabel("percent")
    ax.set_ylim(0, 100)
    ax.legend(ncol=len(columns), fontsize="small")
    ax.set_title("Ablation")
    fig.tight_layout()
    return _save(fig, path)


def map_topdown(snapshot: Sequence[Mapping], categories: Mapping[int, str], path, title: Optional[str] = None):
    """Superpoints seen from above, colored by their best-scoring label."""
    fig, ax = plt.subplots(figsize=(6, 6))
    if snapshot:
        locs = np.array([sp["loc"] for sp in snapshot])
        best = [max(sp["scores"], key=lambda ls: ls[1]) if sp["scores"] else (None, 0.0) for sp in snapshot]
        labels = [b[0] for b in best]
        size = np.array([b[1] for b in best])
        uniq = sorted({lb for lb in labels if lb is not None})
        cmap = plt.get_cmap("tab20")
        for n, lb in enumerate(uniq):
            sel = np.array([lab == lb for lab in labels])
            ax.scatter(
                locs[sel, 0],
                locs[sel, 1],
                s=10 + 8 * np.sqrt(size[sel]),
                color=cmap(n % 20),
                label=categories.get(lb, str(lb)),
                alpha=0.8,
            )
        ax.legend(fontsize="small", loc="best")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_title(title or f"Superpoints ({len(snapshot)})")
    fig.tight_layout()
    return _save(fig, path)
