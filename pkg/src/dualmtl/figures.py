"""Figure rendering for reports: training curves and sweep comparisons.

Uses the Agg backend so figures render headlessly straight to files,
next to the CSV tables they visualize. Writes go through the same
temp-then-rename path as every other artifact.
"""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .dataio import atomic_write_bytes  # noqa: E402
from .harness import AggregateRow  # noqa: E402
from .trainer import TrainReport  # noqa: E402


def _save(fig, path: Path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format=Path(path).suffix.lstrip(".") or "png", dpi=120)
    plt.close(fig)
    atomic_write_bytes(Path(path), buf.getvalue())


def plot_training_curves(report: TrainReport, path: Path) -> Path:
    """Two panels: objective breakdown and validation MSE per epoch."""
    path = Path(path)
    epochs = range(report.epochs_run)
    fig, (ax_obj, ax_val) = plt.subplots(1, 2, figsize=(10.0, 4.0))

    ax_obj.plot(epochs, report.history["total"], label="total", lw=1.5)
    ax_obj.plot(epochs, report.history["mse"], label="fit (mse)", lw=1.0)
    ax_obj.plot(epochs, report.history["similarity"], label="head shrinkage", lw=1.0)
    ax_obj.plot(epochs, report.history["orthogonality"], label="cross-gram", lw=1.0)
    ax_obj.set_xlabel("epoch")
    ax_obj.set_ylabel("training objective")
    if any(v > 0 for v in report.history["total"]):
        ax_obj.set_yscale("log")
    ax_obj.legend(fontsize=8)

    ax_val.plot(epochs, report.history["val_mse"], color="tab:red", lw=1.2)
    ax_val.axvline(report.best_epoch, color="gray", ls="--", lw=0.8)
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("validation MSE")
    ax_val.set_title(f"best epoch {report.best_epoch}", fontsize=9)

    fig.tight_layout()
    _save(fig, path)
    return path


def plot_rmse_comparison(aggregates: list[AggregateRow], path: Path) -> Path:
    """Grouped bars of mean test RMSE (with SD whiskers) per task/method."""
    path = Path(path)
    methods = sorted({a.method for a in aggregates})
    tasks = sorted({a.task for a in aggregates})
    width = 0.8 / max(len(methods), 1)

    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(tasks), 4.0))
    for k, method in enumerate(methods):
        xs, means, sds = [], [], []
        for i, task in enumerate(tasks):
            match = [a for a in aggregates if a.method == method and a.task == task]
            if not match:
                continue
            xs.append(i + (k - (len(methods) - 1) / 2) * width)
            means.append(match[0].mean_rmse)
            sds.append(match[0].sd_rmse)
        ax.bar(xs, means, width=width * 0.9, yerr=sds, capsize=3, label=method)
    ax.set_xticks(range(len(tasks)))
    ax.set_xticklabels([f"task {t}" for t in tasks])
    ax.set_ylabel("test RMSE (mean over seeds)")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
    return path
