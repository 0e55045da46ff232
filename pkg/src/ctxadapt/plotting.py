"""Report figures, rendered headless to PNG files."""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .cbpl import class_histogram  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "font.size": 8,
    "axes.labelsize": 8,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

# strip the matplotlib version so reruns produce identical bytes
_PNG_METADATA = {"Software": None}


def _save(fig, path):
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def plot_trace(trace, path):
    """Mean pseudo-label loss and learning rate per epoch."""
    epochs = [e.epoch for e in trace.epochs]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        ax.plot(epochs, trace.losses, marker="o", ms=3, color="C0", label="loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean cross-entropy", color="C0")
        ax2 = ax.twinx()
        ax2.plot(epochs, trace.learning_rates, ls="--", color="C1", label="learning rate")
        ax2.set_ylabel("learning rate", color="C1")
        ax2.spines["right"].set_visible(True)
        ax.set_title("training trace")
        return _save(fig, path)


def plot_per_class(class_names, evaluation, path):
    """Grouped bars of per-class accuracy, one group per named evaluation."""
    names = list(evaluation)
    x = np.arange(len(class_names))
    width = 0.8 / len(names)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * len(class_names)), 2.8))
        for i, name in enumerate(names):
            acc = np.nan_to_num(evaluation[name].per_class_accuracy, nan=0.0)
            label = f"{name} (avg {100 * evaluation[name].average:.1f})"
            ax.bar(x + (i - (len(names) - 1) / 2) * width, 100 * acc, width, label=label)
        ax.set_xticks(x)
        ax.set_xticklabels(class_names, rotation=45, ha="right")
        ax.set_ylabel("top-1 accuracy (%)")
        ax.set_ylim(0, 105)
        ax.legend(loc="lower right", frameon=False)
        return _save(fig, path)


def plot_thresholds(class_names, thresholds, histogram, global_threshold, path):
    """Per-class thresholds (bars) against the global one, with retained counts."""
    x = np.arange(len(class_names))
    values = [np.nan if t is None else t for t in thresholds]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * len(class_names)), 2.8))
        ax.bar(x, values, color="C2")
        ax.axhline(global_threshold, color="k", lw=0.8, ls=":")
        for xi, count in zip(x, histogram):
            ax.text(xi, 0.02, str(int(count)), ha="center", va="bottom", fontsize=6, rotation=90)
        ax.set_xticks(x)
        ax.set_xticklabels(class_names, rotation=45, ha="right")
        ax.set_ylabel("class threshold")
        ax.set_ylim(0, 1.05)
        return _save(fig, path)


def plot_fusion_grid(grid, path):
    """Heatmap of average accuracy over (gamma, alpha, beta) triples.

    ``grid`` maps ``(alpha, beta, gamma)`` to an accuracy in [0, 1].
    """
    alphas = sorted({k[0] for k in grid})
    betas = sorted({k[1] for k in grid})
    gammas = sorted({k[2] for k in grid})
    cols = [(a, b) for a in alphas for b in betas]
    data = np.full((len(gammas), len(cols)), np.nan)
    for i, g in enumerate(gammas):
        for j, (a, b) in enumerate(cols):
            if (a, b, g) in grid:
                data[i, j] = 100 * grid[(a, b, g)]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.55 * len(cols)), 0.5 * len(gammas) + 1.2))
        im = ax.imshow(data, cmap="viridis", aspect="auto")
        for i in range(len(gammas)):
            for j in range(len(cols)):
                if np.isfinite(data[i, j]):
                    ax.text(j, i, f"{data[i, j]:.1f}", ha="center", va="center", fontsize=6, color="w")
        ax.set_xticks(range(len(cols)))
        ax.set_xticklabels([f"a={a:g}\nb={b:g}" for a, b in cols])
        ax.set_yticks(range(len(gammas)))
        ax.set_yticklabels([f"g={g:g}" for g in gammas])
        fig.colorbar(im, ax=ax, label="avg accuracy (%)")
        return _save(fig, path)


def render_report_figures(out_dir, class_names, evaluation, trace=None, dataset=None, global_threshold=None):
    """Write every applicable figure into ``out_dir``; returns the file paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = [plot_per_class(class_names, evaluation, os.path.join(out_dir, "per_class_accuracy.png"))]
    if trace is not None and len(trace):
        paths.append(plot_trace(trace, os.path.join(out_dir, "training_trace.png")))
    if dataset is not None:
        paths.append(
            plot_thresholds(
                class_names,
                dataset.thresholds,
                class_histogram(dataset),
                global_threshold,
                os.path.join(out_dir, "class_thresholds.png"),
            )
        )
    return paths
