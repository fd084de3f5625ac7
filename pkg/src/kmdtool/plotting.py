"""Figures for decompositions, forecasts and regional comparisons.

Everything renders off-screen with the Agg backend and writes straight to a
file; nothing here is needed for the numerical pipeline.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from kmdtool.grid_data import GridMask, format_month, format_window, unflatten  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 110,
    "savefig.bbox": "tight",
}

KIND_COLORS = {
    "Mean": "tab:green",
    "Annual": "tab:orange",
    "LongTermDecay": "tab:red",
    "Other": "0.6",
}


def _cmap(name: str, bad: str = "#d9d9d9"):
    cmap = plt.get_cmap(name).copy()
    cmap.set_bad(color=bad)
    return cmap


def _image(field: np.ndarray, mask: GridMask) -> np.ndarray:
    return unflatten(np.asarray(field, dtype=float), mask, np.nan).values


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_eigenvalues(path, decomp, labels=None) -> Path:
    """Discrete eigenvalues against the unit circle, marker area by mode norm."""
    kinds = {lab.mode_index: lab.kind.value for lab in labels or []}
    norms = decomp.norms
    size = 8 + 120 * norms / norms.max() if norms.size and norms.max() > 0 else 10
    colors = [KIND_COLORS[kinds.get(j, "Other")] for j in range(decomp.n_modes)]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 4.2))
        t = np.linspace(0, 2 * np.pi, 400)
        ax.plot(np.cos(t), np.sin(t), color="0.3", lw=0.8)
        ax.scatter(decomp.eigenvalues.real, decomp.eigenvalues.imag, s=size, c=colors,
                   edgecolors="k", linewidths=0.3, zorder=3)
        for kind, color in KIND_COLORS.items():
            if kind in kinds.values():
                ax.scatter([], [], c=color, label=kind, edgecolors="k", linewidths=0.3)
        if kinds:
            ax.legend(loc="lower left", frameon=False)
        ax.set_aspect("equal")
        ax.set_xlabel("Re $\\lambda$")
        ax.set_ylabel("Im $\\lambda$")
        ax.set_title(f"{decomp.algorithm.value}  {format_window(decomp.window)}")
        return _save(fig, path)


def plot_mode_maps(path, decomp, mask: GridMask, indices: Sequence[int], titles=None) -> Path:
    """Real part of selected modes on the grid; units are percent concentration."""
    indices = list(indices)
    titles = titles or [f"mode {j}" for j in indices]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(indices), figsize=(3.2 * len(indices), 3.0), squeeze=False)
        for ax, j, title in zip(axes[0], indices, titles):
            img = _image(decomp.modes[j].real, mask)
            lim = np.nanmax(np.abs(img)) or 1.0
            im = ax.imshow(img, cmap=_cmap("RdBu_r"), vmin=-lim, vmax=lim)
            ax.set_title(title)
            ax.set_xticks([])
            ax.set_yticks([])
            fig.colorbar(im, ax=ax, shrink=0.8, label="%")
        return _save(fig, path)


def plot_comparison_maps(path, actual: np.ndarray, predicted: np.ndarray, mask: GridMask,
                         month=None) -> Path:
    """Actual, predicted and absolute difference maps for one month."""
    a, p = _image(actual, mask), _image(predicted, mask)
    panels = [(a, "actual", "Blues_r", (0, 100)), (p, "predicted", "Blues_r", (0, 100)),
              (np.abs(a - p), "|actual - predicted|", "magma", (0, None))]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 3, figsize=(9.6, 3.0))
        for ax, (img, title, cmap, (lo, hi)) in zip(axes, panels):
            im = ax.imshow(img, cmap=_cmap(cmap), vmin=lo, vmax=hi)
            ax.set_title(title)
            ax.set_xticks([])
            ax.set_yticks([])
            fig.colorbar(im, ax=ax, shrink=0.8, label="%")
        if month is not None:
            fig.suptitle(format_month(month))
        return _save(fig, path)


def plot_regional_series(path, comparison) -> Path:
    """Actual (blue) against predicted (red) regional means, one panel per region."""
    n = len(comparison.names)
    ncols = min(4, max(1, n))
    nrows = int(np.ceil(n / ncols)) or 1
    x = np.arange(len(comparison.months))
    ticks = x[:: max(1, len(x) // 4)]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(nrows, ncols, figsize=(3.0 * ncols, 2.2 * nrows),
                                 squeeze=False, sharex=True)
        for i, ax in enumerate(axes.flat):
            if i >= n:
                ax.set_visible(False)
                continue
            ax.plot(x, comparison.actual[i], color="tab:blue", lw=1.0, label="actual")
            ax.plot(x, comparison.predicted[i], color="tab:red", lw=1.0, label="predicted")
            ax.set_title(comparison.names[i])
            ax.set_xticks(ticks)
            ax.set_xticklabels([format_month(comparison.months[t]) for t in ticks], rotation=30)
        axes.flat[0].legend(frameon=False)
        axes.flat[0].set_ylabel("mean concentration (%)")
        return _save(fig, path)


def plot_sweep(path, entries) -> Path:
    """Mean and annual mode norms across sweep windows."""
    from kmdtool.catalog import ModeKind, norms_by_kind

    starts = [format_month(e.window[0]) for e in entries]
    x = np.arange(len(entries))
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.0, 2.8))
        for kind in (ModeKind.MEAN, ModeKind.ANNUAL):
            ax.plot(x, norms_by_kind(entries, kind), marker="o", ms=3,
                    color=KIND_COLORS[kind.value], label=kind.value)
        ax.set_xticks(x[:: max(1, len(x) // 8)])
        ax.set_xticklabels(starts[:: max(1, len(x) // 8)], rotation=30)
        ax.set_xlabel("window start")
        ax.set_ylabel("mode L2 norm")
        ax.legend(frameon=False)
        return _save(fig, path)
