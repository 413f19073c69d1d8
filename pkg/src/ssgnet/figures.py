"""Report figures rendered next to the delimited outputs.

Everything goes through the Agg backend so the CLI works headless.  Figures
are diagnostic companions to the CSV/binary outputs, never the primary data.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ContractError  # noqa: E402

_DPI = 130


def save_loss_curves(trace, path) -> None:
    """Plot the loss components of a training trace over steps."""
    if not trace:
        raise ContractError("trace is empty")
    steps = [r.step for r in trace]
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    ax.plot(steps, [r.l_ssg for r in trace], label="total", lw=1.6,
            color="#29384d")
    ax.plot(steps, [r.l_eigen for r in trace], label="eigen", lw=1.2,
            color="#b4443c")
    ax.plot(steps, [r.l_spatial for r in trace], label="spatial", lw=1.2,
            color="#3f7d4e")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.3)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_map_panel(maps: np.ndarray, path, image: np.ndarray | None = None,
                   title: str | None = None) -> None:
    """One row of grayscale panels, optionally led by the source image."""
    maps = np.asarray(maps)
    if maps.ndim != 3:
        raise ContractError(f"maps must be (n, H, W), got {maps.shape}")
    n = maps.shape[0]
    cols = n + (1 if image is not None else 0)
    fig, axes = plt.subplots(1, cols, figsize=(2.4 * cols, 2.7))
    axes = np.atleast_1d(axes)
    col = 0
    if image is not None:
        axes[0].imshow(np.clip(np.asarray(image).transpose(1, 2, 0), 0, 1))
        axes[0].set_title("input", fontsize=9)
        col = 1
    for i in range(n):
        ax = axes[col + i]
        ax.imshow(maps[i], cmap="gray", vmin=0.0, vmax=1.0)
        ax.set_title(f"map {i}", fontsize=9)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
