"""Sliding-window patch attention between the current frame and its nearest
past frame.

A feature map is separated into b overlapping k*k patches at stride d (zero
padding extends the map to the smallest size that the stride tiles exactly,
split symmetrically). Attention is computed independently inside each patch
pair, so cost grows linearly with pixel count. The recovery layer scatters
patch rows back to their source pixels, summing where windows overlap, and a
layer normalization absorbs the overlap-driven magnitude growth.

Patch ordering is row-major over window origins and row-major inside each
window, so separation is a deterministic, provenance-preserving gather.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import ShapeError, Tensor, _im2col_indices


@dataclass(frozen=True)
class PatchGeometry:
    h: int
    w: int
    c: int
    k: int
    d: int
    pad_top: int
    pad_left: int
    h_pad: int
    w_pad: int
    rows: int
    cols: int

    @property
    def b(self) -> int:
        return self.rows * self.cols


def plan_geometry(h: int, w: int, c: int, k: int, d: int) -> PatchGeometry:
    """Padding and patch-count bookkeeping for an h*w*c map.

    Stride may equal the patch size (disjoint tiling); it must not exceed it,
    or coverage would leave gaps.
    """
    if d < 1:
        raise ValueError(f"stride must be >= 1, got {d}")
    if d > k:
        raise ValueError(f"stride {d} exceeds patch size {k}; windows would skip pixels")
    if k > h or k > w:
        raise ValueError(f"patch size {k} does not fit {h}x{w}")

    def pad_for(extent):
        # smallest growth making (extent - k) a multiple of the stride
        rem = (extent - k) % d
        return 0 if rem == 0 else d - rem

    ph, pw = pad_for(h), pad_for(w)
    h_pad, w_pad = h + ph, w + pw
    return PatchGeometry(
        h=h, w=w, c=c, k=k, d=d,
        pad_top=ph // 2, pad_left=pw // 2,
        h_pad=h_pad, w_pad=w_pad,
        rows=(h_pad - k) // d + 1, cols=(w_pad - k) // d + 1,
    )


@dataclass
class PatchGrid:
    patches: Tensor            # (b, k*k, c)
    geometry: PatchGeometry


@dataclass
class PatchSimilarity:
    weights: Tensor            # (b, k*k, k*k); rows sum to 1
    geometry: PatchGeometry


def separate(x: Tensor, k: int, d: int) -> PatchGrid:
    """Split an h*w*c map into overlapping patches over the padded extent."""
    if x.data.ndim != 3:
        raise ShapeError(f"separate expects h*w*c, got {x.data.shape}")
    h, w, c = x.data.shape
    geo = plan_geometry(h, w, c, k, d)
    idx, _, _ = _im2col_indices(geo.h_pad, geo.w_pad, k, d)
    xp = x
    if geo.h_pad != h or geo.w_pad != w:
        xp = T.pad2d(x, geo.pad_top, geo.h_pad - h - geo.pad_top,
                     geo.pad_left, geo.w_pad - w - geo.pad_left)
    flat = T.reshape(xp, (geo.h_pad * geo.w_pad, c))
    return PatchGrid(T.reshape(T.take_rows(flat, idx), (geo.b, k * k, c)), geo)


def recover(grid: PatchGrid) -> Tensor:
    """Inverse scatter of separate: overlap contributions add; padding is dropped."""
    geo = grid.geometry
    if grid.patches.shape != (geo.b, geo.k * geo.k, geo.c):
        raise ShapeError(f"patches {grid.patches.shape} disagree with geometry {geo}")
    idx, _, _ = _im2col_indices(geo.h_pad, geo.w_pad, geo.k, geo.d)
    rows = T.reshape(grid.patches, (geo.b * geo.k * geo.k, geo.c))
    full = T.reshape(T.scatter_rows(rows, idx, geo.h_pad * geo.w_pad),
                     (geo.h_pad, geo.w_pad, geo.c))
    if geo.h_pad == geo.h and geo.w_pad == geo.w:
        return full
    return T.slice_hw(full, geo.pad_top, geo.pad_left, geo.h, geo.w)


def patch_similarity(xq: PatchGrid, yn: PatchGrid) -> PatchSimilarity:
    """Per-patch softmax over sqrt(c)-scaled query/neighbor pixel products."""
    if xq.geometry != yn.geometry:
        raise ShapeError(f"patch geometries differ: {xq.geometry} vs {yn.geometry}")
    geo = xq.geometry
    k2 = geo.k * geo.k
    logits = T.mul(T.bmm(xq.patches, T.transpose(yn.patches, (0, 2, 1))), 1.0 / np.sqrt(geo.c))
    weights = T.reshape(T.softmax_rows(T.reshape(logits, (geo.b * k2, k2))), (geo.b, k2, k2))
    return PatchSimilarity(weights, geo)


def patch_retrieve(sim: PatchSimilarity, yn: PatchGrid) -> PatchGrid:
    """Convex combinations of neighbor patch rows under the similarity weights."""
    if sim.geometry != yn.geometry:
        raise ShapeError(f"similarity geometry {sim.geometry} vs patches {yn.geometry}")
    return PatchGrid(T.bmm(sim.weights, yn.patches), yn.geometry)


@dataclass
class StaParams:
    """1x1 conv embedding theta for the neighbor frame, plus window shape."""

    theta_w: Tensor    # (1, 1, c0, c)
    theta_b: Tensor    # (c,)
    k: int = 8
    d: int = 4


def sta_forward(current_embed: Tensor, neighbor: Tensor, params: StaParams,
                eps: float = 1e-5) -> Tensor:
    """Local feature map from the query embedding and the raw neighbor frame.

    `current_embed` is the (hw, c) query matrix already produced by the
    memory block's query convolution; the neighbor map gets its own theta
    embedding here.
    """
    h, w, _ = neighbor.data.shape
    c = params.theta_w.shape[3]
    if current_embed.shape != (h * w, c):
        raise ShapeError(f"query embedding {current_embed.shape} does not match "
                         f"{h}x{w} neighbor with {c} channels")
    neighbor_map = T.add(T.conv2d(neighbor, params.theta_w), params.theta_b)
    query_map = T.reshape(current_embed, (h, w, c))
    xq = separate(query_map, params.k, params.d)
    yn = separate(neighbor_map, params.k, params.d)
    retrieved = patch_retrieve(patch_similarity(xq, yn), yn)
    return T.layer_norm(recover(retrieved), eps=eps)


@dataclass
class ProbePoint:
    n: int
    seconds: float


@dataclass
class ProbeReport:
    points: list
    slope: float


def fit_loglog_slope(ns, ts) -> float:
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(ts, float)), 1)[0])


def sta_complexity_probe(n_values, k: int = 8, d: int = 4, c: int = 32,
                         repeats: int = 3, seed: int = 0) -> ProbeReport:
    """Time the patch-attention core across pixel counts and fit the log-log
    runtime slope; near-linear behavior shows up as a slope close to 1."""
    if max(n_values) < 16 * min(n_values):
        raise ValueError("n range must span at least 16x for a meaningful slope")
    rng = Rng(seed)
    points = []
    for n in n_values:
        side = int(round(np.sqrt(n)))
        q = Tensor((rng.uniform((side, side, c)) * 2 - 1).astype(np.float32))
        y = Tensor((rng.uniform((side, side, c)) * 2 - 1).astype(np.float32))

        def run():
            xq = separate(q, k, d)
            yn = separate(y, k, d)
            return T.layer_norm(recover(patch_retrieve(patch_similarity(xq, yn), yn)))

        run()  # warmup; also populates index caches
        best = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            run()
            best.append(time.perf_counter() - t0)
        points.append(ProbePoint(side * side, float(np.median(best))))
    slope = fit_loglog_slope([p.n for p in points], [p.seconds for p in points])
    return ProbeReport(points, slope)
