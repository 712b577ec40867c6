"""Figure rendering for the report paths.

Every CSV the CLI writes gets a PNG sibling: suppression curves per
domain, training loss/accuracy traces, and accuracy bar charts for
reports and ablation tables.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_RC = {
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
}


def _styled():
    return plt.rc_context(_RC)


def save_delta_amplitude_figure(curves, path, title="Filter suppression by radial frequency"):
    with _styled():
        fig, ax = plt.subplots()
        for domain, curve in curves.items():
            ax.plot(np.arange(len(curve)), curve, marker="o", ms=3, label=domain)
        ax.axhline(0.0, color="k", lw=0.8)
        ax.set_xlabel("radial frequency shell")
        ax.set_ylabel("amplitude before - after")
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def save_training_curves(log_rows, path):
    steps = [r["step"] for r in log_rows]
    with _styled():
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.4))
        ax1.plot(steps, [r["loss_c"] for r in log_rows], label="classification", lw=0.9)
        ax1.plot(steps, [r["loss_md"] for r in log_rows], label="distillation", lw=0.9)
        ax1.plot(steps, [r["loss_all"] for r in log_rows], label="total", lw=0.9)
        ax1.set_xlabel("step")
        ax1.set_ylabel("loss")
        ax1.legend()
        ax2.plot(steps, [r["acc_train"] for r in log_rows], color="tab:green", lw=0.9)
        ax2.set_xlabel("step")
        ax2.set_ylabel("train accuracy")
        ax2.set_ylim(0, 1.02)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def save_accuracy_figure(rows, path, title="Held-out accuracy"):
    """rows: list of (label, accuracy)."""
    labels = [r[0] for r in rows]
    values = [r[1] for r in rows]
    with _styled():
        fig, ax = plt.subplots()
        ax.bar(np.arange(len(rows)), values, color="tab:blue", width=0.6)
        ax.set_xticks(np.arange(len(rows)))
        ax.set_xticklabels(labels, rotation=20, ha="right")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1.02)
        ax.set_title(title)
        for i, v in enumerate(values):
            ax.text(i, v + 0.01, f"{v:.3f}", ha="center", fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
