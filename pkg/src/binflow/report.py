"""Figure rendering for CLI reports.

Every CSV the command line emits can be accompanied by a matplotlib
figure written next to it; the Agg backend keeps this headless-safe.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_trace_figure(path: str, steps: list[str], psis: list[float], energies: list) -> None:
    """Lower-bound trace, with primal energies overlaid when present."""
    fig, ax = plt.subplots(figsize=(7, 4))
    xs = np.arange(len(psis))
    ax.plot(xs, psis, marker="o", ms=3, label="lower bound")
    known = [(i, e) for i, e in enumerate(energies) if e is not None]
    if known:
        ax.plot([i for i, _ in known], [e for _, e in known], marker="s", ms=3, label="primal energy")
    ax.set_xticks(xs[:: max(1, len(xs) // 16)])
    ax.set_xticklabels([steps[i] for i in xs[:: max(1, len(xs) // 16)]], rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("objective")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bench_figure(path: str, rows: list[dict]) -> None:
    """Grouped runtimes of the F and Q kernels per problem size."""
    fig, ax = plt.subplots(figsize=(7, 4))
    sizes = sorted({(r["height"], r["width"], r["d"]) for r in rows})
    kernels = sorted({r["kernel"] for r in rows})
    width = 0.8 / max(len(kernels), 1)
    for ki, kernel in enumerate(kernels):
        ys = []
        for size in sizes:
            match = [r["seconds"] for r in rows if r["kernel"] == kernel and (r["height"], r["width"], r["d"]) == size]
            ys.append(match[0] if match else np.nan)
        ax.bar(np.arange(len(sizes)) + ki * width, ys, width, label=kernel)
    ax.set_xticks(np.arange(len(sizes)) + 0.4 - width / 2)
    ax.set_xticklabels([f"{h}x{w} D={d}" for h, w, d in sizes], fontsize=8)
    ax.set_ylabel("seconds")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_figure(path: str, losses: list[float]) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(np.arange(len(losses)), losses, marker="o", ms=2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
