"""Finite-difference gradient checking.

The checker only evaluates forward passes, so it stays independent of the
reverse-mode rules it validates. Forward computation is float32, which puts a
measurement floor on any finite-difference estimate: each evaluation carries
~eps32*|f| rounding, so the difference quotient is uncertain by about
``2*eps32*|f| / (2*step)``. A coordinate therefore passes if the relative
error beats `rtol` OR the absolute disagreement is inside a small multiple of
that provable noise band; a wrong backward rule produces O(|grad|) errors and
still fails. The perturbed values are read back from the float32 buffer so
the quotient uses the step that was actually applied.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, zero_grads

_EPS32 = float(np.finfo(np.float32).eps)
_NOISE_SAFETY = 8.0


def _scalar(t: Tensor) -> float:
    return float(np.asarray(t.data).reshape(-1)[0])


def central_difference(fn: Callable[[], Tensor], leaf: Tensor, index, step: float = 1e-3):
    """(quotient, noise_bound) for d fn / d leaf[index]; restores the leaf."""
    original = leaf.data[index]
    leaf.data[index] = original + np.float32(step)
    hi = float(leaf.data[index])
    plus = _scalar(fn())
    leaf.data[index] = original - np.float32(step)
    lo = float(leaf.data[index])
    minus = _scalar(fn())
    leaf.data[index] = original
    span = hi - lo
    quotient = (plus - minus) / span
    noise = _EPS32 * (abs(plus) + abs(minus) + 1e-12) / span
    return quotient, noise


def check_gradients(
    fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    step: float = 1e-3,
    rtol: float = 1e-4,
    grad_floor: float = 1e-3,
    max_coords: int | None = None,
) -> float:
    """Compare analytic gradients of the scalar `fn()` against central
    finite differences, coordinate by coordinate.

    Coordinates whose analytic gradient magnitude is below `grad_floor` are
    skipped (relative error is meaningless there). When `max_coords` is set,
    an evenly spaced subsample per leaf is checked instead of every entry.
    Returns the worst relative error among coordinates that had to meet
    `rtol`; raises AssertionError on any failure.
    """
    zero_grads(leaves)
    out = fn()
    backward(out)
    analytic = [None if leaf.grad is None else leaf.grad.copy() for leaf in leaves]

    worst = 0.0
    for leaf, grad in zip(leaves, analytic):
        assert grad is not None, "leaf received no gradient"
        coords = list(np.ndindex(leaf.data.shape))
        if max_coords is not None and len(coords) > max_coords:
            picks = np.linspace(0, len(coords) - 1, max_coords).astype(int)
            coords = [coords[int(i)] for i in picks]
        for index in coords:
            a = float(grad[index])
            if abs(a) <= grad_floor:
                continue
            f, noise = central_difference(fn, leaf, index, step)
            rel = abs(a - f) / max(abs(a), abs(f))
            if abs(a - f) <= _NOISE_SAFETY * noise:
                continue  # inside the float32 measurement floor
            worst = max(worst, rel)
            assert rel < rtol, (
                f"gradient mismatch at {index}: analytic {a:.6g} vs finite-difference {f:.6g} "
                f"(rel err {rel:.3g} >= {rtol}, noise bound {noise:.2g})"
            )
    return worst


def check_directional(
    fn: Callable[[], Tensor],
    leaf: Tensor,
    direction: np.ndarray,
    step: float = 1e-3,
    rtol: float = 1e-3,
) -> float:
    """Compare grad . v against the centered difference along direction v.

    One probe validates a whole parameter tensor, which keeps end-to-end
    model checks affordable.
    """
    zero_grads([leaf])
    out = fn()
    backward(out)
    assert leaf.grad is not None, "leaf received no gradient"
    analytic = float((leaf.grad.astype(np.float64) * direction).sum())

    original = leaf.data.copy()
    delta = (step * direction).astype(np.float32)
    leaf.data[...] = original + delta
    plus = _scalar(fn())
    leaf.data[...] = original - delta
    minus = _scalar(fn())
    leaf.data[...] = original
    fd = (plus - minus) / (2.0 * step)
    noise = _EPS32 * (abs(plus) + abs(minus) + 1e-12) / (2.0 * step)

    rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8)
    ok = rel < rtol or abs(analytic - fd) <= _NOISE_SAFETY * noise
    assert ok, f"directional gradient mismatch: {analytic:.6g} vs {fd:.6g} (rel {rel:.3g})"
    return rel
