"""Figures written next to the delimited report files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from jade.architectures import MODES  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}
MODE_COLOURS = {"single": "#7f7f7f", "paired": "#1f77b4", "jade": "#d62728"}
STYLE_COLOUR, CONTENT_COLOUR = "#9ecae1", "#de2d26"
# fixed metadata keeps re-emitted PNGs byte-identical
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_results(aggregates, columns, path) -> Path:
    """Grouped bars of mean error (percent) with sample-std error bars."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(columns), figsize=(3.2 * len(columns), 2.8), squeeze=False)
        for ax, col in zip(axes[0], columns):
            modes = [m for m in MODES if col in aggregates.get(m, {})]
            means = [100 * aggregates[m][col].mean for m in modes]
            stds = [100 * aggregates[m][col].sample_std for m in modes]
            ax.bar(range(len(modes)), means, yerr=stds, capsize=3, color=[MODE_COLOURS[m] for m in modes])
            ax.set_xticks(range(len(modes)), modes)
            ax.set_ylabel("error (%)")
            ax.set_title(col)
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_profiles(profiles, path, content: range | None = None) -> Path:
    """One bar panel per profile; content dims (classifier inputs) in red."""
    n_dims = len(profiles[0].normalized)
    content = content if content is not None else range(n_dims // 2, n_dims)
    colours = [CONTENT_COLOUR if d in content else STYLE_COLOUR for d in range(n_dims)]
    ncols = min(len(profiles), 5)
    nrows = -(-len(profiles) // ncols)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(2.4 * ncols, 1.9 * nrows), squeeze=False, sharey=True)
        for ax in axes.flat[len(profiles):]:
            ax.set_visible(False)
        for ax, p in zip(axes.flat, profiles):
            ax.bar(np.arange(n_dims), p.normalized, color=colours, width=0.8)
            ax.set_title(f"{p.condition} (n={p.n_samples})")
            ax.set_ylim(0, 1.05)
            ax.set_xticks([0, n_dims // 2, n_dims - 1])
        for ax in axes[:, 0]:
            ax.set_ylabel("norm. variance")
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_objective(trace, path, window: int = 200) -> Path:
    """Per-step training objective with its moving average."""
    trace = np.asarray(trace, dtype=np.float64)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        ax.plot(trace, lw=0.5, color="#bbbbbb", label="per step")
        if trace.size >= window:
            smooth = np.convolve(trace, np.ones(window) / window, mode="valid")
            ax.plot(np.arange(window - 1, trace.size), smooth, color="#d62728", label=f"{window}-step mean")
        ax.set_xlabel("step")
        ax.set_ylabel("objective")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, Path(path))
