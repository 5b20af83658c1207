"""Advisory figures. The CSV files written next to them are the contract."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def sweep_plot(rows: list, path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for variant in sorted({r["variant"] for r in rows}):
        by = {}
        for r in rows:
            if r["variant"] == variant:
                by.setdefault(float(r["lambda"]), []).append(r)
        lams = sorted(by)
        for ax, metric in zip(axes, ("bacc", "dcor2_latent")):
            means = [np.mean([float(r[metric]) for r in by[lam]]) for lam in lams]
            ax.plot(lams, means, marker="o", label=variant)
            ax.set_xscale("symlog", linthresh=0.1)
            ax.set_xlabel("lambda")
            ax.set_ylabel(metric)
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def grid_heatmap(grid: np.ndarray, sigma_values, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    lim = float(np.abs(grid).max()) or 1.0
    im = ax.imshow(grid, cmap="coolwarm", vmin=-lim, vmax=lim)
    ticks = range(len(sigma_values))
    labels = [f"{v:g}" for v in sigma_values]
    ax.set_xticks(ticks, labels)
    ax.set_yticks(ticks, labels)
    ax.set_xlabel("sigma_B")
    ax.set_ylabel("sigma_A")
    for i in ticks:
        for j in ticks:
            ax.text(j, i, f"{grid[i, j]:.1f}", ha="center", va="center", fontsize=7)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
