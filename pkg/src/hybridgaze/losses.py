"""Loss terms and their gradients.

Every function works on numpy arrays, reduces over the trailing component axis
only, and returns per-sample values; batch reduction is :func:`masked_mean`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ALPHA_CLAMP = 10.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LossWeights:
    heatmap: float = 5.0
    radius: float = 1.0
    gaze: float = 1.0

    def __post_init__(self):
        if min(self.heatmap, self.radius, self.gaze) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    heatmap_term: float = 0.0
    radius_term: float = 0.0
    gaze_term: float = 0.0
    total: float = 0.0
    uncertainty: bool = False
    gaze_residuals: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def as_row(self) -> tuple[float, float, float, float]:
        return self.heatmap_term, self.radius_term, self.gaze_term, self.total


def radius_loss(r_pred, r_gt):
    """``|r_pred - r_gt|`` and its derivative w.r.t. ``r_pred`` (0 at equality)."""
    diff = np.asarray(r_pred, dtype=np.float64) - np.asarray(r_gt, dtype=np.float64)
    return np.abs(diff), np.sign(diff)


def gaze_loss(g_gt, g_recon):
    """L1 gaze loss.

    Returns ``(loss, residuals, d loss / d g_recon)`` where ``residuals`` are the
    per-component absolute differences kept for the uncertainty loss.
    """
    diff = np.asarray(g_recon, dtype=np.float64) - np.asarray(g_gt, dtype=np.float64)
    res = np.abs(diff)
    return res.sum(axis=-1), res, np.sign(diff)


def uncertainty_gaze_loss(residual, alpha):
    """Per-component ``exp(-alpha) * (l - 1/2) + alpha / 2``, averaged over components.

    ``alpha`` is clamped to [-10, 10]; the gradient w.r.t. alpha is zero where the
    clamp is active.

    Returns
    -------
    loss : ndarray (...)
    d_residual : ndarray (..., K)
    d_alpha : ndarray (..., K)
    """
    residual = np.asarray(residual, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    a = np.clip(alpha, -ALPHA_CLAMP, ALPHA_CLAMP)
    q = np.exp(-a)
    k = residual.shape[-1]
    loss = (q * (residual - 0.5) + 0.5 * a).mean(axis=-1)
    d_res = q / k
    d_alpha = np.where(np.abs(alpha) <= ALPHA_CLAMP, (-q * (residual - 0.5) + 0.5) / k, 0.0)
    return loss, d_res, d_alpha


def quality(alpha) -> np.ndarray:
    """Per-sample quality: mean over components of ``exp(-alpha)`` (alpha clamped)."""
    a = np.clip(np.asarray(alpha, dtype=np.float64), -ALPHA_CLAMP, ALPHA_CLAMP)
    return np.exp(-a).mean(axis=-1)


def gaussian_nll_reference(residual, alpha):
    """Gaussian negative log-likelihood with variance ``exp(alpha)``."""
    residual = np.asarray(residual, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    return 0.5 * residual ** 2 * np.exp(-alpha) + 0.5 * alpha + HALF_LOG_2PI


def masked_mean(values, mask):
    """Mean of ``values`` over entries where ``mask`` is set; 0 when nothing is supervised."""
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return 0.0
    return float(values[mask].sum() / n)


def total_loss(heatmap_term: float, radius_term: float, gaze_term: float,
               weights: LossWeights = LossWeights(), um_enabled: bool = False,
               gaze_residuals=None) -> LossBreakdown:
    """Weighted total; with ``um_enabled`` the gaze slot holds the uncertainty loss."""
    total = (weights.heatmap * heatmap_term + weights.radius * radius_term
             + weights.gaze * gaze_term)
    out = LossBreakdown(float(heatmap_term), float(radius_term), float(gaze_term),
                        float(total), um_enabled)
    if gaze_residuals is not None:
        out.gaze_residuals = np.asarray(gaze_residuals)
    return out
