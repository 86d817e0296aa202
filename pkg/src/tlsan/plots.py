"""Figures written next to the CSV outputs (training curve, ranking metrics)."""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 10,
}

COLORS = {"tlsan": "#1f77b4", "popularity": "#7f7f7f"}


def figure_path(csv_path):
    """``run/metrics.csv`` -> ``run/metrics.png``."""
    root, _ = os.path.splitext(csv_path)
    return root + ".png"


def _save(fig, path):
    # no timestamp in the metadata so reruns are byte-identical
    fig.savefig(path, metadata={"Software": None}, bbox_inches="tight")
    plt.close(fig)


def moving_average(values, window):
    values = np.asarray(values, dtype=float)
    if len(values) < window or window < 2:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def plot_training(rows, path, window=20):
    """Per-step loss with its moving average, plus the learning rate."""
    steps = np.array([int(r["step"]) for r in rows])
    losses = np.array([float(r["loss"]) for r in rows])
    lrs = np.array([float(r["lr"]) for r in rows])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(steps, losses, lw=0.6, alpha=0.4, color=COLORS["tlsan"], label="loss per sample")
        ma = moving_average(losses, window)
        if len(ma) != len(losses):
            ax.plot(steps[window - 1:], ma, lw=1.5, color=COLORS["tlsan"], label=f"{window}-step mean")
        ax.set_xlabel("step")
        ax.set_ylabel("training loss")
        ax.set_yscale("log")
        lr_ax = ax.twinx()
        lr_ax.step(steps, lrs, where="post", color="#d62728", lw=1.0, label="learning rate")
        lr_ax.set_ylabel("learning rate")
        lr_ax.grid(False)
        lines = ax.get_legend_handles_labels()
        more = lr_ax.get_legend_handles_labels()
        ax.legend(lines[0] + more[0], lines[1] + more[1], loc="upper right")
        _save(fig, path)
    return path


def plot_report(reports, path):
    """Precision@K and Recall@K against K for every model in ``reports``."""
    with plt.rc_context(STYLE):
        fig, (left, right) = plt.subplots(1, 2, figsize=(9.0, 3.6))
        for name, rep in reports.items():
            ks = sorted(rep.precision)
            color = COLORS.get(name)
            label = f"{name} (AUC {rep.auc:.3f})"
            left.plot(ks, [rep.precision[k] for k in ks], marker="o", color=color, label=label)
            right.plot(ks, [rep.recall[k] for k in ks], marker="o", color=color, label=label)
        left.set_ylabel("precision@K")
        right.set_ylabel("recall@K")
        for ax in (left, right):
            ax.set_xlabel("K")
        right.legend(loc="lower right")
        fig.tight_layout()
        _save(fig, path)
    return path
