"""Landmark heatmaps: spatial softmax, soft-argmax decoding, target rendering, L1 loss.

All arrays are channel-first ``(..., C, H, W)`` with a 0-based grid.  A heatmap
cell ``(cx, cy)`` maps to input pixels as ``scale * c + (scale - 1) / 2``, i.e. the
cell center, so a delta at a cell decodes to that cell's center in input pixels.
"""

from __future__ import annotations

import numpy as np

DEFAULT_RESOLUTION = (32, 48)
DEFAULT_SCALE = 2.0
DEFAULT_SIGMA = 2.0


class HeatmapShapeError(ValueError):
    pass


def spatial_softmax(logits: np.ndarray) -> np.ndarray:
    """Normalise each channel into a probability map over its H x W grid."""
    logits = np.asarray(logits)
    shifted = logits - logits.max(axis=(-2, -1), keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=(-2, -1), keepdims=True)


def spatial_softmax_vjp(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    inner = np.sum(grad_probs * probs, axis=(-2, -1), keepdims=True)
    return probs * (grad_probs - inner)


def grid_coordinates(resolution, scale: float = 1.0, dtype=np.float64):
    """Input-pixel x and y coordinates of each heatmap cell center, each of shape (H, W)."""
    h, w = resolution
    offset = (scale - 1.0) / 2.0
    xs = np.arange(w, dtype=dtype) * scale + offset
    ys = np.arange(h, dtype=dtype) * scale + offset
    return np.broadcast_to(xs[None, :], (h, w)), np.broadcast_to(ys[:, None], (h, w))


def soft_argmax(probs: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Expected cell position under each normalised channel, in input pixels.

    Returns ``(..., C, 2)`` with (x, y) in the last axis.
    """
    probs = np.asarray(probs)
    gx, gy = grid_coordinates(probs.shape[-2:], scale, probs.dtype)
    x = np.sum(probs * gx, axis=(-2, -1))
    y = np.sum(probs * gy, axis=(-2, -1))
    return np.stack([x, y], axis=-1)


def soft_argmax_vjp(grad_points: np.ndarray, resolution, scale: float = 1.0) -> np.ndarray:
    gx, gy = grid_coordinates(resolution, scale, grad_points.dtype)
    return grad_points[..., 0, None, None] * gx + grad_points[..., 1, None, None] * gy


def decode(logits: np.ndarray, scale: float = 1.0) -> np.ndarray:
    return soft_argmax(spatial_softmax(logits), scale)


def render_target(landmarks, resolution=DEFAULT_RESOLUTION, sigma: float = DEFAULT_SIGMA,
                  scale: float = DEFAULT_SCALE) -> tuple[np.ndarray, bool]:
    """Render a normalised Gaussian target channel per landmark.

    Parameters
    ----------
    landmarks : array (C, 2)
        Landmark positions in input pixels.
    resolution : (H, W)
        Heatmap grid size.
    sigma : float
        Gaussian width in heatmap cells.
    scale : float
        Input pixels per heatmap cell.

    Returns
    -------
    stack : ndarray (C, H, W)
        Each channel sums to one.
    degraded : bool
        True when a landmark fell so far outside the grid that its Gaussian had
        no mass and a border delta was substituted.
    """
    lm = np.asarray(landmarks, dtype=np.float64)
    h, w = resolution
    offset = (scale - 1.0) / 2.0
    cells = (lm - offset) / scale
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    gx = np.exp(-0.5 * ((xs[None, :] - cells[:, 0, None]) / sigma) ** 2)
    gy = np.exp(-0.5 * ((ys[None, :] - cells[:, 1, None]) / sigma) ** 2)
    stack = gy[:, :, None] * gx[:, None, :]
    mass = stack.sum(axis=(1, 2))
    degraded = False
    for i in np.flatnonzero(mass < 1e-12):
        degraded = True
        stack[i] = 0.0
        cx = int(np.clip(np.rint(cells[i, 0]), 0, w - 1))
        cy = int(np.clip(np.rint(cells[i, 1]), 0, h - 1))
        stack[i, cy, cx] = 1.0
        mass[i] = 1.0
    return stack / mass[:, None, None], degraded


def heatmap_loss(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Summed L1 distance between normalised stacks.

    Reduces over the trailing (C, H, W) axes, so a batch ``(N, C, H, W)`` gives
    per-sample values.  Returns ``(loss, d loss / d pred)``; the subgradient is 0
    where the stacks agree exactly.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise HeatmapShapeError(f"heatmap shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    return np.abs(diff).sum(axis=(-3, -2, -1)), np.sign(diff)


def heatmap_loss_from_logits(logits: np.ndarray, target: np.ndarray):
    """Like :func:`heatmap_loss` but differentiated w.r.t. the pre-softmax logits."""
    probs = spatial_softmax(logits)
    loss, g = heatmap_loss(probs, target)
    return loss, spatial_softmax_vjp(probs, g)
