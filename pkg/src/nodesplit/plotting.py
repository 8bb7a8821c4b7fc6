"""PNG renderings of contrast posterior densities."""
from __future__ import annotations

import math
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps repeated renderings byte-identical
_META = {"Software": None}


def _annotate(ax, label: str, p_u: Optional[float], p_a: Optional[float]) -> None:
    ax.axvline(0.0, color="red", lw=1)
    text = []
    if p_u is not None:
        text.append(f"$p_U$ = {p_u:.3f}")
    if p_a is not None:
        text.append(f"$p_A$ = {p_a:.3f}")
    ax.set_title(label, fontsize=9)
    if text:
        ax.text(0.98, 0.95, "\n".join(text), transform=ax.transAxes, ha="right", va="top",
                fontsize=8)
    ax.set_yticks([])


def plot_density(path, x, density, label: str, p_u: Optional[float] = None,
                 p_a: Optional[float] = None) -> None:
    """One contrast density with a reference line at zero."""
    fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
    ax.plot(x, density, color="black", lw=1.2)
    _annotate(ax, label, p_u, p_a)
    ax.set_xlabel("contrast")
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)


def plot_grid(path, curves: Sequence[tuple], ncols: int = 3) -> None:
    """Panel of densities; ``curves`` holds (label, x, density, p_U, p_A)."""
    n = len(curves)
    if n == 0:
        return
    ncols = min(ncols, n)
    nrows = math.ceil(n / ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(3.2 * ncols, 2.6 * nrows), dpi=100,
                             squeeze=False)
    for ax, (label, x, d, p_u, p_a) in zip(axes.flat, curves):
        ax.plot(x, d, color="black", lw=1.2)
        _annotate(ax, label, p_u, p_a)
    for ax in list(axes.flat)[n:]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
