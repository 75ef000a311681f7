"""SVG figures: pole diagram, ensemble envelopes and ratio box plot."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps the SVG bytes reproducible
_SVG_META = {"Date": None, "Creator": "ncsfsp"}
plt.rcParams["svg.hashsalt"] = "ncsfsp"


def _save(fig, path):
    fig.savefig(path, format="svg", metadata=_SVG_META, bbox_inches="tight")
    plt.close(fig)


def pole_diagram(eigenvalues, path: str | Path, radius: float | None = None, title: str = "") -> None:
    ev = np.asarray(eigenvalues, dtype=complex)
    fig, ax = plt.subplots(figsize=(5, 5))
    th = np.linspace(0, 2 * np.pi, 400)
    ax.plot(np.cos(th), np.sin(th), "k-", lw=0.8)
    if radius is not None:
        ax.plot(radius * np.cos(th), radius * np.sin(th), "k:", lw=0.6, label=f"|z| = {radius:.4f}")
    ax.plot(ev.real, ev.imag, "x", ms=6, color="tab:red", label="eigenvalues")
    ax.set_aspect("equal")
    ax.axhline(0, color="0.8", lw=0.5)
    ax.axvline(0, color="0.8", lw=0.5)
    ax.set_xlabel("Re")
    ax.set_ylabel("Im")
    ax.set_title(title or "Leading eigenvalues of E{A (x) A}")
    ax.legend(loc="upper right", fontsize=8)
    _save(fig, path)


def envelope(t, mean, lower, upper, path: str | Path, labels=None, title: str = "", reference=None) -> None:
    """Mean and 5-95 % band of every state component against time."""
    mean = np.asarray(mean)
    n = mean.shape[1]
    labels = labels or [f"x{i + 1}" for i in range(n)]
    fig, axes = plt.subplots(n, 1, figsize=(7, 2.2 * n), sharex=True, squeeze=False)
    for i, ax in enumerate(axes[:, 0]):
        ax.fill_between(t, lower[:, i], upper[:, i], color="tab:blue", alpha=0.25, lw=0, label="5-95 %")
        ax.plot(t, mean[:, i], color="tab:blue", lw=1.2, label="mean")
        if reference is not None:
            ax.plot(t, reference[:, i], "k--", lw=0.8, label="reference")
        ax.set_ylabel(labels[i])
        ax.grid(alpha=0.3)
    axes[0, 0].legend(fontsize=8, loc="best")
    axes[-1, 0].set_xlabel("t [s]")
    if title:
        axes[0, 0].set_title(title)
    _save(fig, path)


def ratio_boxplot(ratios: dict, path: str | Path, title: str = "") -> None:
    """One box per mode of the per-replica J / J_ideal values (log scale)."""
    names = list(ratios)
    data = [np.asarray(ratios[k])[np.isfinite(ratios[k])] for k in names]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.boxplot(data, whis=(0, 100))
    ax.set_xticks(range(1, len(names) + 1), names)
    ax.set_yscale("log")
    ax.set_ylabel("J / J_ideal")
    ax.grid(alpha=0.3, which="both")
    ax.set_title(title or "Tracking energy relative to the ideal loop")
    _save(fig, path)
