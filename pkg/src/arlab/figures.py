"""Matplotlib rendering for the report path.

Every CSV the experiment runner emits gets a sibling figure; callers
pass the already-computed data, so nothing here touches models.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .diagnostics import Curve, SurfaceGrid


def save_surface_figure(grid: SurfaceGrid, path) -> None:
    fig, ax = plt.subplots(figsize=(5.2, 4.2))
    mesh = ax.pcolormesh(grid.eps2, grid.eps1, grid.values, shading="nearest",
                         cmap="viridis")
    fig.colorbar(mesh, ax=ax, label=grid.quantity)
    ax.set_xlabel("eps2 (random direction)")
    ax.set_ylabel("eps1 (gradient-sign direction)")
    ax.set_title(f"local {grid.quantity} surface")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_curve_figure(curve: Curve, path, label: str | None = None) -> None:
    fig, ax = plt.subplots(figsize=(5.2, 3.8))
    ax.plot(curve.xs, curve.accuracies, marker="o", label=label)
    ax.set_xlabel(curve.xlabel)
    ax.set_ylabel("robust accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    if label:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_sweep_figure(lambdas, clean, robust, path) -> None:
    fig, ax = plt.subplots(figsize=(5.2, 3.8))
    ax.plot(lambdas, clean, marker="o", label="clean")
    ax.plot(lambdas, robust, marker="s", label="robust")
    ax.set_xscale("log")
    ax.set_xlabel("lambda")
    ax.set_ylabel("accuracy")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_attack_bar_figure(names, accuracies, path) -> None:
    fig, ax = plt.subplots(figsize=(max(4.5, 0.9 * len(names) + 2), 3.8))
    ax.bar(range(len(names)), accuracies, color="#3b6ea5")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_margin_scatter_figure(records, path) -> None:
    xs = [r.normalized_margin for r in records if not r.censored]
    ys = [r.min_distortion for r in records if not r.censored]
    fig, ax = plt.subplots(figsize=(4.8, 4.2))
    ax.scatter(xs, ys, s=14, alpha=0.6)
    ax.set_xlabel("normalized margin")
    ax.set_ylabel("minimal L2 distortion")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
