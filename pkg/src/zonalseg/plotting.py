"""Report figures: Kiviat (radar) charts, critical-difference diagrams and loss curves."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# stable SVG element ids and no timestamps, so reruns give identical files
matplotlib.rcParams["svg.hashsalt"] = "zonalseg"
_SAVE_METADATA = {"svg": {"Date": None}, "png": {"Software": None}, "pdf": {"CreationDate": None}}

CG_COLOR = "tab:blue"
PZ_COLOR = "tab:cyan"


def _save(fig, path):
    ext = str(path).rsplit(".", 1)[-1].lower()
    fig.savefig(path, bbox_inches="tight", metadata=_SAVE_METADATA.get(ext))
    plt.close(fig)


def kiviat(spokes, cg, pz, path, title=None):
    """Radar chart with one spoke per train -> test condition, DSC in [0, 100]."""
    n = len(spokes)
    angles = np.linspace(0, 2 * np.pi, n, endpoint=False)
    closed = np.concatenate([angles, angles[:1]])
    fig = plt.figure(figsize=(5, 5))
    ax = fig.add_subplot(111, polar=True)
    ax.set_theta_offset(np.pi / 2)
    ax.set_theta_direction(-1)
    for values, color, label in ((cg, CG_COLOR, "CG"), (pz, PZ_COLOR, "PZ")):
        v = np.asarray(values, dtype=float)
        v = np.concatenate([v, v[:1]])
        ax.plot(closed, v, color=color, lw=1.5, label=label)
        ax.fill(closed, v, color=color, alpha=0.15)
    ax.set_xticks(angles)
    ax.set_xticklabels(spokes, fontsize=8)
    ax.set_ylim(0, 100)
    ax.set_yticks([20, 40, 60, 80, 100])
    ax.tick_params(axis="y", labelsize=7)
    ax.legend(loc="upper right", bbox_to_anchor=(1.15, 1.1), fontsize=8, frameon=False)
    if title:
        ax.set_title(title, fontsize=10, pad=18)
    _save(fig, path)


def cd_diagram(methods, mean_ranks, cd, control, path, title=None):
    """Critical-difference diagram for a Bonferroni-Dunn comparison.

    Methods are placed on a rank axis; the bar of width ``cd`` starts at the
    control method and methods within it are joined by a bold line.
    """
    k = len(methods)
    r = np.asarray(mean_ranks, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 1.2 + 0.3 * k))
    ax.set_xlim(0.8, k + 0.2)
    ax.set_ylim(-(k + 1), 2)
    ax.hlines(0, 1, k, color="k", lw=1)
    for t in range(1, k + 1):
        ax.vlines(t, -0.1, 0.1, color="k", lw=1)
        ax.text(t, 0.3, str(t), ha="center", va="bottom", fontsize=8)
    order = np.argsort(r)
    for row, j in enumerate(order, start=1):
        ax.vlines(r[j], -row, 0, color="0.4", lw=0.8)
        ha = "right" if r[j] > (k + 1) / 2 else "left"
        dx = 0.05 if ha == "left" else -0.05
        ax.text(r[j] + dx, -row, f"{methods[j]} ({r[j]:.2f})", ha=ha, va="center", fontsize=8)
    ax.plot([r[control], r[control] + cd], [1.2, 1.2], color="tab:red", lw=2)
    ax.text(r[control] + cd / 2, 1.35, f"CD = {cd:.2f}", ha="center", va="bottom", fontsize=8)
    inside = [j for j in range(k) if abs(r[j] - r[control]) <= cd]
    if len(inside) > 1:
        lo, hi = min(r[inside]), max(r[inside])
        ax.plot([lo, hi], [-0.6, -0.6], color="k", lw=3)
    ax.axis("off")
    if title:
        ax.set_title(title, fontsize=10)
    _save(fig, path)


def loss_curve(losses, lrs, path):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.arange(len(losses)), losses, color="k", lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("Dice loss")
    for e in np.nonzero(np.diff(lrs))[0]:
        ax.axvline(e + 1, color="0.7", ls="--", lw=0.8)
    _save(fig, path)
