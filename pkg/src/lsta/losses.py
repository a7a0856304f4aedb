"""Training objectives.

Per-pixel cross entropy feeds two heads: a hard-example-mined loss that
averages only the largest ``floor(HW/16)`` pixel losses against the binary
ground truth (gradient flows through the selected pixels only), and a
distillation loss that averages full-frame cross entropy against a teacher's
soft per-pixel probabilities. The total objective blends the two with a
tradeoff weight alpha in [0, 1].

Probabilities are clamped to [1e-7, 1 - 1e-7] before any logarithm. Ties at
the selection boundary are broken by (loss value desc, pixel index asc) so
runs are deterministic.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

PROB_EPS = 1e-7
HARD_FRACTION_DIVISOR = 16


def _check_probability_map(pred: Tensor) -> tuple:
    if pred.data.ndim != 3 or pred.data.shape[2] != 2:
        raise ShapeError(f"expected an H*W*2 probability map, got {pred.data.shape}")
    return pred.data.shape[0], pred.data.shape[1]


def _pixel_cross_entropy(pred: Tensor, target_probs: np.ndarray) -> Tensor:
    """-sum_ch target * log(clamped pred), flattened to (H*W,)."""
    h, w = _check_probability_map(pred)
    logp = T.log(T.clamp(pred, PROB_EPS, 1.0 - PROB_EPS))
    ce = T.neg(T.tsum(T.mul(logp, Tensor(target_probs)), axis=2))
    return T.reshape(ce, (h * w,))


def ohem_ce(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean of the r = floor(HW/16) largest per-pixel cross entropies against
    a binary mask. Needs HW >= 16 so at least one pixel is selected."""
    h, w = _check_probability_map(pred)
    target = np.asarray(target, dtype=np.float32)
    if target.shape != (h, w):
        raise ShapeError(f"mask {target.shape} does not match prediction {(h, w)}")
    r = (h * w) // HARD_FRACTION_DIVISOR
    if r < 1:
        raise ValueError(f"hard-example mining needs at least {HARD_FRACTION_DIVISOR} pixels, got {h * w}")
    onehot = np.stack([1.0 - target, target], axis=-1)
    ce = _pixel_cross_entropy(pred, onehot)
    # stable argsort on negated values: descending by loss, ascending pixel
    # index on ties
    selected = np.argsort(-ce.data, kind="stable")[:r]
    picked = T.take_rows(T.reshape(ce, (h * w, 1)), selected)
    return T.div(T.tsum(picked), float(r))


def distill_ce(pred: Tensor, soft: np.ndarray) -> Tensor:
    """Mean over all pixels of cross entropy against teacher soft labels."""
    h, w = _check_probability_map(pred)
    soft = np.asarray(soft, dtype=np.float32)
    if soft.shape != (h, w, 2):
        raise ShapeError(f"soft labels {soft.shape} do not match prediction {(h, w, 2)}")
    ce = _pixel_cross_entropy(pred, soft)
    return T.div(T.tsum(ce), float(h * w))


def total_loss(pred: Tensor, target: np.ndarray, soft: np.ndarray, alpha: float = 0.5) -> Tensor:
    """alpha-blend of mined and distillation losses; endpoints reduce to the
    lone component so they match it bit for bit."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        return ohem_ce(pred, target)
    if alpha == 0.0:
        return distill_ce(pred, soft)
    return T.add(T.mul(ohem_ce(pred, target), alpha), T.mul(distill_ce(pred, soft), 1.0 - alpha))
