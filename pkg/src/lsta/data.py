"""Synthetic moving-shapes video clips with exact masks, plus the teacher
soft-label oracle used for distillation.

Each clip contains exactly one primary object (disc, rectangle, or ring) in a
warm color moving over a textured background, zero or more cool-colored
distractor shapes that are never labeled, and optionally a dark occluder bar
that may hide part of the object. Masks record the rendered (visible) support
of the primary object exactly, with no anti-aliased gray zone. Generation is
deterministic per (scene, rng seed).

The occluder width is sized so it can cover at most ~60% of the object in any
frame; generation verifies this and that at least one object pixel stays
visible everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .losses import PROB_EPS
from .rng import Rng

SHAPE_KINDS = ("disc", "rectangle", "ring")
TRAJECTORIES = ("linear", "sinusoidal")

MAX_OCCLUSION = 0.60
_RING_INNER = 0.55
_RECT_ASPECT = (0.85, 1.25)  # half-height, half-width multipliers


class SceneError(ValueError):
    """Scene parameters produce an invalid clip (object leaves canvas, etc.)."""


@dataclass(frozen=True)
class OccluderSpec:
    axis: str            # "vertical" bar sweeping horizontally, or "horizontal"
    width: int
    speed: float         # pixels/frame along the sweep direction
    start: float
    color: tuple = (0.12, 0.12, 0.14)


@dataclass(frozen=True)
class Distractor:
    kind: str
    start: tuple         # (y, x)
    velocity: tuple
    size: float
    color: tuple


@dataclass(frozen=True)
class SceneSpec:
    canvas: tuple                        # (H, W)
    kind: str = "disc"
    trajectory: str = "linear"
    start: tuple = (32.0, 32.0)
    velocity: tuple = (0.0, 0.0)         # pixels/frame
    wobble_amp: float = 0.0              # sinusoidal offset on x
    wobble_period: float = 12.0
    size: float = 8.0
    scale_drift: float = 0.0             # linear size drift per frame
    color: tuple = (0.9, 0.45, 0.2)
    background_seed: int = 0
    distractors: Sequence[Distractor] = ()
    occluder: Optional[OccluderSpec] = None

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise SceneError(f"unknown shape kind {self.kind!r}")
        if self.trajectory not in TRAJECTORIES:
            raise SceneError(f"unknown trajectory {self.trajectory!r}")
        if self.size < 2.0:
            raise SceneError(f"object size {self.size} below the 2px minimum")


@dataclass
class Clip:
    frames: List[np.ndarray]   # (H, W, 3) float32 in [0, 1]
    masks: List[np.ndarray]    # (H, W) float32 in {0, 1}

    def __len__(self):
        return len(self.frames)


def _support(kind: str, cy: float, cx: float, size: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "disc":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= size * size
    if kind == "rectangle":
        return (np.abs(yy - cy) <= size * _RECT_ASPECT[0]) & (np.abs(xx - cx) <= size * _RECT_ASPECT[1])
    if kind == "ring":
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (d2 <= size * size) & (d2 >= (size * _RING_INNER) ** 2)
    raise SceneError(f"unknown shape kind {kind!r}")


def _resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    sh, sw = img.shape[:2]
    ys = np.clip((np.arange(h) + 0.5) * sh / h - 0.5, 0, sh - 1)
    xs = np.clip((np.arange(w) + 0.5) * sw / w - 0.5, 0, sw - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x1)]
    c = img[np.ix_(y1, x0)]
    d = img[np.ix_(y1, x1)]
    return (1 - fy) * (1 - fx) * a + (1 - fy) * fx * b + fy * (1 - fx) * c + fy * fx * d


def _background(spec: SceneSpec) -> np.ndarray:
    h, w = spec.canvas
    rng = Rng(spec.background_seed)
    coarse = rng.uniform((max(h // 8, 2), max(w // 8, 2), 3))
    tex = _resize_bilinear(coarse, h, w)
    return (0.30 + 0.25 * tex).astype(np.float64)


def _position(spec: SceneSpec, t: int) -> tuple:
    cy = spec.start[0] + spec.velocity[0] * t
    cx = spec.start[1] + spec.velocity[1] * t
    if spec.trajectory == "sinusoidal" and spec.wobble_amp > 0:
        cx += spec.wobble_amp * np.sin(2.0 * np.pi * t / spec.wobble_period)
    return cy, cx


def _size_at(spec: SceneSpec, t: int) -> float:
    return max(spec.size * (1.0 + spec.scale_drift * t), 2.0)


def _occluder_support(occ: OccluderSpec, t: int, h: int, w: int) -> np.ndarray:
    pos = occ.start + occ.speed * t
    half = occ.width / 2.0
    extent = w if occ.axis == "vertical" else h
    # pixel-center rasterization, consistent with the shape supports
    covered = np.abs(np.arange(extent) - pos) <= half
    sup = np.zeros((h, w), dtype=bool)
    if occ.axis == "vertical":
        sup[:, covered] = True
    else:
        sup[covered, :] = True
    return sup


def generate_clip(spec: SceneSpec, t: int, rng: Rng) -> Clip:
    """Render `t` frames and exact visible-support masks.

    Raises SceneError if the primary object ever loses all visible pixels or
    the occluder covers more than 60% of it.
    """
    if t < 2:
        raise ValueError(f"clips need at least 2 frames, got {t}")
    h, w = spec.canvas
    base_bg = _background(spec)
    noise_rng = rng.split("pixel-noise")

    frames, masks = [], []
    for ti in range(t):
        frame = base_bg.copy()
        for dis in spec.distractors:
            cy = dis.start[0] + dis.velocity[0] * ti
            cx = dis.start[1] + dis.velocity[1] * ti
            sup = _support(dis.kind, cy, cx, dis.size, h, w)
            frame[sup] = dis.color

        cy, cx = _position(spec, ti)
        size = _size_at(spec, ti)
        obj = _support(spec.kind, cy, cx, size, h, w)
        if not obj.any():
            raise SceneError(f"object leaves the canvas at frame {ti}")
        frame[obj] = spec.color

        visible = obj
        if spec.occluder is not None:
            occ = _occluder_support(spec.occluder, ti, h, w)
            covered = (obj & occ).sum() / obj.sum()
            if covered > MAX_OCCLUSION:
                raise SceneError(f"occluder covers {covered:.0%} of the object at frame {ti}")
            frame[occ] = spec.occluder.color
            visible = obj & ~occ
            if not visible.any():
                raise SceneError(f"object fully occluded at frame {ti}")

        # mild deterministic texture so objects are not perfectly flat
        frame = frame + (noise_rng.uniform((h, w, 3)) - 0.5) * 0.04
        frames.append(np.clip(frame, 0.0, 1.0).astype(np.float32))
        masks.append(visible.astype(np.float32))
    return Clip(frames, masks)


def random_scene_spec(canvas, clip_len: int, rng: Rng,
                      with_distractors: bool = True,
                      occluder_prob: float = 0.5) -> SceneSpec:
    """Draw a scene whose trajectory provably stays on canvas for `clip_len`
    frames. Primary objects are warm-colored; distractors are cool-colored."""
    h, w = canvas
    kind = SHAPE_KINDS[rng.integers(0, len(SHAPE_KINDS))]
    trajectory = TRAJECTORIES[rng.integers(0, len(TRAJECTORIES))]
    size = float(6.0 + rng.uniform() * (min(h, w) / 6.0 - 4.0))
    drift = float((rng.uniform() - 0.5) * 0.01)
    max_size = max(size, size * (1 + drift * (clip_len - 1)))

    wobble = float(rng.uniform() * 3.0) if trajectory == "sinusoidal" else 0.0
    margin = max_size * max(_RECT_ASPECT) + wobble + 2.0
    span_y, span_x = h - 2 * margin, w - 2 * margin
    if span_y <= 0 or span_x <= 0:
        raise SceneError(f"canvas {canvas} too small for object size {size:.1f}")
    sy = margin + rng.uniform() * span_y
    sx = margin + rng.uniform() * span_x

    def bounded_velocity(lo, hi, start):
        # aim at a random endpoint inside the margin box; shrinking the speed
        # afterwards can only keep the path further inside
        end = lo + rng.uniform() * (hi - lo)
        return float(np.clip((end - start) / max(clip_len - 1, 1), -1.5, 1.5))

    vy = bounded_velocity(margin, h - margin, sy)
    vx = bounded_velocity(margin, w - margin, sx)

    warm = (0.75 + 0.25 * rng.uniform(), 0.25 + 0.3 * rng.uniform(), 0.08 + 0.2 * rng.uniform())

    distractors = []
    if with_distractors:
        for i in range(int(rng.integers(1, 4))):
            dk = SHAPE_KINDS[rng.integers(0, len(SHAPE_KINDS))]
            dsize = float(3.0 + rng.uniform() * 5.0)
            dy = rng.uniform() * h
            dx = rng.uniform() * w
            dvy = (rng.uniform() * 2 - 1) * 1.0
            dvx = (rng.uniform() * 2 - 1) * 1.0
            cool = (0.1 + 0.15 * rng.uniform(), 0.3 + 0.3 * rng.uniform(), 0.7 + 0.3 * rng.uniform())
            distractors.append(Distractor(dk, (dy, dx), (dvy, dvx), dsize, cool))

    occluder = None
    if rng.uniform() < occluder_prob:
        axis = "vertical" if rng.uniform() < 0.5 else "horizontal"
        # cap the bar at 0.7x the smallest size the drifting object reaches;
        # for every supported shape that keeps coverage under the 60% ceiling
        # even after pixel-grid rounding
        min_size = min(size, size * (1 + drift * (clip_len - 1)))
        width = max(2, int(0.7 * min_size))
        extent = w if axis == "vertical" else h
        speed = (extent + 2.0 * width) / clip_len * (1 if rng.uniform() < 0.5 else -1)
        start = -width if speed > 0 else extent + width
        occluder = OccluderSpec(axis=axis, width=width, speed=float(speed), start=float(start))

    return SceneSpec(
        canvas=(h, w), kind=kind, trajectory=trajectory,
        start=(float(sy), float(sx)), velocity=(vy, vx),
        wobble_amp=wobble, wobble_period=float(8.0 + rng.uniform() * 10.0),
        size=size, scale_drift=drift, color=warm,
        background_seed=rng.u64_scalar() & 0xFFFFFFFF,
        distractors=tuple(distractors), occluder=occluder,
    )


# ---------------------------------------------------------------------------
# teacher soft labels

def _box_sum(a: np.ndarray, radius: int) -> np.ndarray:
    h, w = a.shape
    ii = np.zeros((h + 1, w + 1), dtype=np.float64)
    ii[1:, 1:] = a.cumsum(0).cumsum(1)
    y0 = np.clip(np.arange(h) - radius, 0, h)
    y1 = np.clip(np.arange(h) + radius + 1, 0, h)
    x0 = np.clip(np.arange(w) - radius, 0, w)
    x1 = np.clip(np.arange(w) + radius + 1, 0, w)
    return (ii[np.ix_(y1, x1)] - ii[np.ix_(y0, x1)] - ii[np.ix_(y1, x0)] + ii[np.ix_(y0, x0)])


def teacher_soft_labels(mask: np.ndarray, blur_radius: int) -> np.ndarray:
    """Soft per-pixel (background, object) probabilities from a hard mask.

    A box blur of the one-hot mask, renormalized by the in-image window size
    so each pixel's probabilities sum to one; radius 0 degenerates to the
    clamped one-hot. Stands in for an external teacher network's initial
    pixel probabilities.
    """
    if blur_radius < 0:
        raise ValueError(f"blur radius must be >= 0, got {blur_radius}")
    m = (np.asarray(mask) > 0.5).astype(np.float64)
    if blur_radius == 0:
        p1 = m
    else:
        counts = _box_sum(np.ones_like(m), blur_radius)
        p1 = _box_sum(m, blur_radius) / counts
    probs = np.stack([1.0 - p1, p1], axis=-1)
    return np.clip(probs, PROB_EPS, 1.0 - PROB_EPS).astype(np.float32)
