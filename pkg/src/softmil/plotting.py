"""Report figures written next to the CSV tables.

Figures go through the Agg backend with the PNG ``Software`` tag removed,
so identical inputs give byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from softmil.evaluation import RocTable  # noqa: E402
from softmil.optimizer import LambdaSweepResult  # noqa: E402

_PNG_METADATA = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(Path(path), dpi=100, metadata=_PNG_METADATA)
    plt.close(fig)


def save_froc_figure(path, tables: Mapping[str, RocTable]) -> None:
    """GT and image sensitivity against FP per image, one line per table."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.8), sharey=True)
    styles = ["-", "--", ":", "-."]
    for k, (name, table) in enumerate(tables.items()):
        ls = styles[k % len(styles)]
        axes[0].plot(table.fp_points, table.gt_sensitivity, ls, marker="D", label=name)
        axes[1].plot(table.fp_points, table.image_sensitivity, ls, marker="D", label=name)
    axes[0].set_title("GT sensitivity")
    axes[1].set_title("Image sensitivity")
    for ax in axes:
        ax.set_xlabel("FP per image")
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("sensitivity (%)")
    axes[0].legend(loc="lower right")
    fig.tight_layout()
    _save(fig, path)


def save_sweep_figure(path, sweep: LambdaSweepResult) -> None:
    """Sensitivities, train/validation gap and model size along the grid."""
    lam = np.asarray(sweep.grid)
    fps = sweep.train_tables[0].fp_points
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.8))
    for j, fp in enumerate(fps):
        tr = np.array([t.gt_sensitivity[j] for t in sweep.train_tables])
        va = np.array([t.gt_sensitivity[j] for t in sweep.val_tables])
        line, = axes[0].semilogx(lam, tr, "-", marker="o", ms=3, label=f"train, FP={fp:g}")
        axes[0].semilogx(lam, va, "--", marker="o", ms=3, color=line.get_color(), label=f"validation, FP={fp:g}")
        axes[1].semilogx(lam, va - tr, marker="o", ms=3, color=line.get_color(), label=f"FP={fp:g}")
    axes[2].semilogx(lam, [f.nnz for f in sweep.fits], marker="o", ms=3, color="k")
    for ax in axes:
        ax.axvline(sweep.selected_lambda, color="grey", lw=0.8)
        ax.set_xlabel("lambda")
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("GT sensitivity (%)")
    axes[1].set_ylabel("validation - train (%)")
    axes[2].set_ylabel("nonzero weights")
    axes[0].legend(fontsize=7)
    axes[1].legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)
