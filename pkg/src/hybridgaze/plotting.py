"""Static figures: prediction overlays, quality histograms, quantile galleries, ablation bars.

Everything renders through the non-interactive Agg backend straight to files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.lines import Line2D  # noqa: E402

from .synthgen import Domain  # noqa: E402

PRED_COLOR = "red"
GT_COLOR = "blue"
LANDMARK_COLOR = "lime"
ARROW_LENGTH = 30.0     # display pixels for a unit in-plane gaze component
FRONTAL_EPS = 1e-6


def arrow_vector(gaze, length: float = ARROW_LENGTH) -> np.ndarray:
    """In-plane arrow ``length * (sin(phi) cos(theta), sin(theta))`` in image (x right, y down)."""
    theta, phi = float(gaze[0]), float(gaze[1])
    return length * np.array([np.sin(phi) * np.cos(theta), np.sin(theta)])


def _draw_gaze(ax, origin, gaze, color, length):
    vec = arrow_vector(gaze, length)
    if np.hypot(*vec) < FRONTAL_EPS * length:
        # frontal gaze has no in-plane extent
        ax.plot(*origin, marker="o", markersize=7, markerfacecolor="none", markeredgecolor=color, mew=2)
    else:
        ax.annotate("", xy=(origin[0] + vec[0], origin[1] + vec[1]), xytext=tuple(origin),
                    arrowprops=dict(arrowstyle="-|>", color=color, lw=2))
    return vec


def visualize(image, gaze_gt, gaze_pred, path, landmarks=None, origin=None,
              length: float = ARROW_LENGTH, title: str | None = None) -> dict:
    """Overlay predicted landmarks (green), predicted gaze (red) and ground truth (blue).

    ``origin`` defaults to the predicted iris center, else the image center.
    Returns the arrow vectors that were drawn.
    """
    image = np.asarray(image)
    h, w = image.shape
    if origin is None:
        origin = landmarks[0] if landmarks is not None else ((w - 1) / 2, (h - 1) / 2)
    fig, ax = plt.subplots(figsize=(w / 24, h / 24 + 0.6), dpi=96)
    ax.imshow(image, cmap="gray", vmin=0, vmax=1)
    if landmarks is not None:
        lm = np.asarray(landmarks)
        ax.scatter(lm[:, 0], lm[:, 1], s=14, c=LANDMARK_COLOR, edgecolors="black", linewidths=0.4, zorder=3)
    gt = _draw_gaze(ax, origin, gaze_gt, GT_COLOR, length)
    pred = _draw_gaze(ax, origin, gaze_pred, PRED_COLOR, length)
    handles = [Line2D([], [], color=PRED_COLOR, lw=2, label="predicted gaze"),
               Line2D([], [], color=GT_COLOR, lw=2, label="ground truth")]
    if landmarks is not None:
        handles.insert(0, Line2D([], [], ls="", marker="o", color=LANDMARK_COLOR, label="landmarks"))
    ax.legend(handles=handles, loc="lower center", bbox_to_anchor=(0.5, 1.0), ncol=len(handles),
              fontsize=6, frameon=False)
    ax.set_xlim(-0.5, w - 0.5)
    ax.set_ylim(h - 0.5, -0.5)
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=7, pad=14)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return {"gt": gt, "pred": pred}


def plot_quality_histogram(hist, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=100)
    for d, color in ((Domain.SYNTHETIC, "tab:green"), (Domain.REALLIKE, "tab:orange")):
        v = hist.values[hist.domains == d]
        if len(v):
            ax.hist(v, bins=hist.edges, alpha=0.6, color=color, label=f"{d.name.lower()} (n={len(v)})")
    ax.set_xlabel(r"quality $e^{-\alpha}$")
    ax.set_ylabel("samples")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_quantile_gallery(images, hist, path) -> None:
    items = list(hist.quantiles.items())
    fig, axes = plt.subplots(1, len(items), figsize=(1.6 * len(items), 1.5), dpi=100, squeeze=False)
    for ax, (q, idx) in zip(axes[0], items):
        ax.imshow(images[idx], cmap="gray", vmin=0, vmax=1)
        ax.set_title(f"q={q:g}\n{hist.values[idx]:.3g}", fontsize=7)
        ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_ablation(table, path) -> None:
    modes = [r.mode for r in table.rows]
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(modes), 3), dpi=100)
    ax.bar(modes, [r.mean for r in table.rows], yerr=[r.std for r in table.rows],
           color="tab:blue", alpha=0.8, capsize=4)
    ax.set_ylabel("mean angular error (deg)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_training_curves(metrics, path) -> None:
    ep = [m.epoch for m in metrics]
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3), dpi=100)
    a.plot(ep, [m.L_total for m in metrics], label="L_total")
    a.plot(ep, [m.L_h for m in metrics], label="L_h")
    a.plot(ep, [m.L_gaze for m in metrics], label="L_gaze / L_UM")
    a.set_xlabel("epoch")
    a.legend(fontsize=7)
    b.plot(ep, [m.val_angular_deg for m in metrics], color="tab:red")
    b.set_xlabel("epoch")
    b.set_ylabel("val angular error (deg)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
