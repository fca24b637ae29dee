"""Matplotlib renderings of sweep and evaluation reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["rate_performance_figure", "tau2_bits_figure", "eval_panel_figure"]


def _group(records, key):
    groups = {}
    for r in records:
        groups.setdefault(key(r), []).append(r)
    return groups


def rate_performance_figure(records, path, baseline_records=()):
    """Task metric against transmitted bits, one series per configuration."""
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    for label, rows in sorted(_group(records, lambda r: r.config_id).items()):
        bits = [r.bits_measured for r in rows]
        moda = [r.moda for r in rows]
        order = np.argsort(bits)
        ax.plot(np.array(bits)[order], np.array(moda)[order],
                marker="o", label=label)
    if baseline_records:
        for label, rows in sorted(_group(baseline_records,
                                         lambda r: r.config_id).items()):
            bits = [r.bits_measured for r in rows]
            moda = [r.moda for r in rows]
            ax.scatter(bits, moda, marker="x", label=label, color="gray")
    ax.set_xlabel("bits per frame")
    ax.set_ylabel("MODA")
    ax.set_xscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def tau2_bits_figure(records, path):
    """Mean bits/frame as a function of the entropy-model history length."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    groups = _group(records, lambda r: r.tau2)
    taus = sorted(groups)
    means = [float(np.mean([r.bits_measured for r in groups[t]])) for t in taus]
    ax.plot(taus, means, marker="s")
    ax.set_xlabel("entropy-model history length")
    ax.set_ylabel("mean bits per frame")
    ax.set_xticks(taus)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def eval_panel_figure(pred, truth, bitmap, path):
    """Side-by-side prediction, ground truth, and bit-allocation map."""
    fig, axes = plt.subplots(1, 3, figsize=(9.0, 3.2))
    for ax, img, title in zip(axes,
                              (pred, truth, bitmap),
                              ("prediction", "truth", "bit allocation")):
        ax.imshow(np.asarray(img, dtype=np.float64), cmap="viridis")
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
