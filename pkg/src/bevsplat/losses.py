"""Training objectives over similarity peaks.

The weak metric loss pushes the positive map's peak above every negative
peak through a softplus margin; the GPS loss ties the global peak to the
best peak inside a metric window around a noisy location label. Peaks are
treated as fixed-argmax selections for the backward pass, which matches
differentiating through a max.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .matching import SimilarityMap

DEFAULT_ALPHA = 10.0
DEFAULT_GPS_WINDOW_M = 5.0
DEFAULT_NEGATIVES = 4


@dataclass(frozen=True)
class LossConfig:
    alpha: float = DEFAULT_ALPHA
    d: float = DEFAULT_GPS_WINDOW_M
    lambda1: int = 0
    negatives: int = DEFAULT_NEGATIVES

    @classmethod
    def from_json(cls, cfg: dict) -> "LossConfig":
        return cls(
            alpha=float(cfg.get("alpha", DEFAULT_ALPHA)),
            d=float(cfg.get("d", DEFAULT_GPS_WINDOW_M)),
            lambda1=int(cfg.get("lambda1", 0)),
            negatives=int(cfg.get("negatives", DEFAULT_NEGATIVES)),
        )


@dataclass(frozen=True)
class LossReport:
    l_weakly: float
    l_gps: float
    l_total: float
    lambda1: int
    alpha: float
    d: float


def weakly_loss(peak_pos: float, peaks_neg: Sequence[float], alpha: float = DEFAULT_ALPHA) -> float:
    """Mean softplus margin (1/M) sum log(1 + exp(alpha*(neg - pos)))."""
    if len(peaks_neg) == 0:
        raise ValueError("at least one negative peak is required")
    margins = alpha * (np.asarray(peaks_neg, dtype=np.float64) - peak_pos)
    # logaddexp(0, x) = log(1 + e^x) without overflow
    return float(np.mean(np.logaddexp(0.0, margins)))


def weakly_backward(
    peak_pos: float, peaks_neg: Sequence[float], alpha: float = DEFAULT_ALPHA
) -> tuple[float, np.ndarray]:
    """Gradients (d/d peak_pos, d/d peaks_neg) of weakly_loss."""
    m = len(peaks_neg)
    sig = expit(alpha * (np.asarray(peaks_neg, dtype=np.float64) - peak_pos))
    d_neg = alpha / m * sig
    return float(-np.sum(d_neg)), d_neg


def _window_bounds(m: SimilarityMap, label: tuple[int, int], d: float, beta: float):
    rad = m.search_radius
    width = 2 * rad + 1
    lr, lc = label
    if not (-rad <= lr <= rad and -rad <= lc <= rad):
        raise ValueError(f"label {label} outside the similarity map (radius {rad})")
    half = math.ceil(d / beta)
    r_lo = max(0, lr + rad - half)
    r_hi = min(width, lr + rad + half + 1)
    c_lo = max(0, lc + rad - half)
    c_hi = min(width, lc + rad + half + 1)
    if r_lo >= r_hi or c_lo >= c_hi:
        raise ValueError("empty GPS window after clipping")
    return r_lo, r_hi, c_lo, c_hi


def gps_peaks(
    p_pos: SimilarityMap,
    label: tuple[int, int],
    d: float = DEFAULT_GPS_WINDOW_M,
    beta: float | None = None,
) -> tuple[tuple[int, int], tuple[int, int], float, float]:
    """Global and window argmax cells (array indices) with their values."""
    beta = p_pos.beta if beta is None else beta
    vals = p_pos.values
    g_flat = int(np.argmax(vals))
    g_cell = (g_flat // vals.shape[1], g_flat % vals.shape[1])
    r_lo, r_hi, c_lo, c_hi = _window_bounds(p_pos, label, d, beta)
    win = vals[r_lo:r_hi, c_lo:c_hi]
    w_flat = int(np.argmax(win))
    w_cell = (r_lo + w_flat // win.shape[1], c_lo + w_flat % win.shape[1])
    return g_cell, w_cell, float(vals[g_cell]), float(vals[w_cell])


def gps_loss(
    p_pos: SimilarityMap,
    label: tuple[int, int],
    d: float = DEFAULT_GPS_WINDOW_M,
    beta: float | None = None,
) -> float:
    """|global peak - peak within the d-meter window around the label|."""
    _, _, g_val, w_val = gps_peaks(p_pos, label, d, beta)
    return abs(g_val - w_val)


def gps_backward(
    p_pos: SimilarityMap,
    label: tuple[int, int],
    d: float = DEFAULT_GPS_WINDOW_M,
    beta: float | None = None,
) -> np.ndarray:
    """Subgradient field over the similarity values (+-1 at the two argmax
    cells, zero when they agree)."""
    g_cell, w_cell, g_val, w_val = gps_peaks(p_pos, label, d, beta)
    grad = np.zeros_like(p_pos.values)
    if g_val == w_val:
        return grad
    sign = 1.0 if g_val > w_val else -1.0
    grad[g_cell] += sign
    grad[w_cell] -= sign
    return grad


def total_loss(l_weakly: float, l_gps: float, lambda1: int) -> float:
    if lambda1 not in (0, 1):
        raise ValueError(f"lambda1 must be 0 or 1, got {lambda1}")
    if l_weakly < 0 or l_gps < 0:
        raise ValueError("loss terms must be non-negative")
    return l_weakly + lambda1 * l_gps


def make_report(
    peak_pos: float,
    peaks_neg: Sequence[float],
    p_pos: SimilarityMap | None,
    label: tuple[int, int] | None,
    config: LossConfig,
) -> LossReport:
    """Evaluate the combined objective for one query."""
    l_w = weakly_loss(peak_pos, peaks_neg, config.alpha)
    l_g = 0.0
    if config.lambda1:
        if p_pos is None or label is None:
            raise ValueError("lambda1=1 requires the positive map and a location label")
        l_g = gps_loss(p_pos, label, config.d)
    return LossReport(
        l_weakly=l_w,
        l_gps=l_g,
        l_total=total_loss(l_w, l_g, config.lambda1),
        lambda1=config.lambda1,
        alpha=config.alpha,
        d=config.d,
    )
