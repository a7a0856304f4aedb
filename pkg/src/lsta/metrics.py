"""Segmentation quality measures.

Region similarity is plain intersection-over-union. Contour accuracy extracts
boundary pixels (object pixels with a 4-neighbor that is background or lies
outside the image) and matches them across masks within a Chebyshev-distance
tolerance, implemented by dilating boundaries with a square structuring
element; this is the usual tolerance-based stand-in for exact bipartite
contour matching, and at tolerance 0 the two coincide. Empty-vs-empty
comparisons score 1.0 by convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError


def _as_bool_mask(m) -> np.ndarray:
    return np.asarray(m) > 0.5


def metric_j(pred, gt) -> float:
    """Intersection-over-union of two binary masks."""
    p, g = _as_bool_mask(pred), _as_bool_mask(gt)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def boundary_pixels(mask) -> np.ndarray:
    """Object pixels adjacent (4-connectivity) to background; pixels on the
    image border count the outside as background."""
    m = _as_bool_mask(mask)
    padded = np.pad(m, 1)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def _chebyshev_dilate(b: np.ndarray, tol: int) -> np.ndarray:
    if tol == 0:
        return b
    h, w = b.shape
    padded = np.pad(b, tol)
    out = np.zeros_like(b)
    for dy in range(2 * tol + 1):
        for dx in range(2 * tol + 1):
            out |= padded[dy:dy + h, dx:dx + w]
    return out


def metric_f(pred, gt, tol_px: int = 1) -> float:
    """Harmonic mean of boundary precision and recall at a pixel tolerance."""
    if tol_px < 0:
        raise ValueError(f"tolerance must be >= 0, got {tol_px}")
    bp, bg = boundary_pixels(pred), boundary_pixels(gt)
    if bp.shape != bg.shape:
        raise ShapeError(f"mask shapes differ: {bp.shape} vs {bg.shape}")
    np_, ng = int(bp.sum()), int(bg.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    precision = float((bp & _chebyshev_dilate(bg, tol_px)).sum() / np_)
    recall = float((bg & _chebyshev_dilate(bp, tol_px)).sum() / ng)
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class ClipScore:
    name: str
    j: float
    f: float


@dataclass
class EvalReport:
    clips: Sequence[ClipScore]
    mean_j: float
    mean_f: float
    jf_mean: float
    fps: Optional[float] = None

    def summary_lines(self):
        lines = [f"{'clip':<20} {'J':>8} {'F':>8}"]
        for c in self.clips:
            lines.append(f"{c.name:<20} {c.j:8.4f} {c.f:8.4f}")
        lines.append(f"{'mean':<20} {self.mean_j:8.4f} {self.mean_f:8.4f}")
        lines.append(f"J&F mean: {self.jf_mean:.4f}")
        if self.fps is not None:
            lines.append(f"inference speed: {self.fps:.2f} frames/s")
        return lines


def evaluate_clips(clips, tol_px: int = 1, fps: Optional[float] = None) -> EvalReport:
    """Per-clip and aggregate scores for `(name, predicted_masks, gt_masks)` triples."""
    scored = []
    for name, preds, gts in clips:
        if len(preds) != len(gts):
            raise ValueError(f"clip {name}: {len(preds)} predictions vs {len(gts)} ground-truth masks")
        js = [metric_j(p, g) for p, g in zip(preds, gts)]
        fs = [metric_f(p, g, tol_px) for p, g in zip(preds, gts)]
        scored.append(ClipScore(name, float(np.mean(js)), float(np.mean(fs))))
    mean_j = float(np.mean([c.j for c in scored])) if scored else 0.0
    mean_f = float(np.mean([c.f for c in scored])) if scored else 0.0
    return EvalReport(scored, mean_j, mean_f, (mean_j + mean_f) / 2.0, fps)
