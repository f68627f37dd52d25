"""Report figures written next to the CSV/JSON outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_det(points: np.ndarray, path, eer: float | None = None) -> Path:
    """FRR against FAR over the threshold sweep."""
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(points[:, 1], points[:, 2], marker=".", lw=1)
    if eer is not None:
        ax.plot([0, 1], [0, 1], ls=":", c="grey", lw=0.8)
        ax.scatter([eer], [eer], c="red", zorder=3, label=f"EER {eer:.4f}")
        ax.legend(loc="upper right")
    ax.set(xlabel="FAR", ylabel="FRR", xlim=(0, 1), ylim=(0, 1), title="DET")
    return _save(fig, path)


def plot_cmc(curve: np.ndarray, path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    ranks = np.arange(1, len(curve) + 1)
    ax.step(ranks, curve, where="post")
    ax.set(xlabel="rank", ylabel="identification rate", ylim=(0, 1.02), title="CMC")
    return _save(fig, path)


def plot_losses(rows: list[dict], path) -> Path:
    """One line per loss column on a log scale."""
    fig, ax = plt.subplots(figsize=(5, 3))
    steps = [float(r["step"]) for r in rows]
    for key in rows[0] if rows else []:
        if key in ("step", "theta_s", "theta_t"):
            continue
        values = np.array([float(r[key]) for r in rows])
        ax.plot(steps, np.maximum(values, 1e-12), lw=0.8, label=key)
    ax.set(xlabel="step", ylabel="loss", yscale="log")
    if rows:
        ax.legend(fontsize="small")
    return _save(fig, path)
