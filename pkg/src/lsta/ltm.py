"""Linearized global attention between a query frame and a multi-frame memory.

Per-frame embeddings of the past frames are stacked row-wise into a feature
memory. Both memory and query rows are lifted through a positive random
feature map phi(x) = exp(u.x - |x|^2/2) / sqrt(r) built on r = floor(c/2)
orthogonalized Gaussian directions; inner products of lifted rows then
estimate exp(q.m), so the softmax-free attention

    G' = (Q' (M'^T M)) / (Q' (M'^T 1))

reproduces exponential-kernel attention while touching each memory row once:
cost is linear in the pixel count instead of quadratic. A quadratic-cost
oracle that materializes the full attention matrix is provided for tests and
benchmarks.

Exponent stabilization subtracts a shared maximum from the memory exponents
and a per-row maximum from the query exponents before exponentiation. Both
are pure rescalings (one scalar on all of M', one scalar per row of Q') under
which G' is exactly invariant, so overflow protection never changes the
output; stabilizers are therefore treated as constants by autodiff.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import ShapeError, Tensor

_DENOM_FLOOR = 1e-30


@dataclass
class FeatureMemory:
    """Row-stacked past-frame embeddings, oldest frame first."""

    matrix: Tensor                      # (frames*h*w, c)
    frames: int
    spatial: tuple = None               # (h, w) when known

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class ProjectionBasis:
    """Orthogonalized Gaussian directions; rows keep their pre-orthogonalization norms."""

    vectors: np.ndarray = field(repr=False)   # (r, c) float32
    seed: int = 0

    @property
    def r(self) -> int:
        return self.vectors.shape[0]

    @property
    def c(self) -> int:
        return self.vectors.shape[1]


@dataclass
class ProjectedFeatures:
    """Positive feature rows; strictly positive up to float32 underflow."""

    matrix: Tensor                      # (rows, r)

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]


def build_memory(past_embeddings: Sequence[Tensor], spatial=None) -> FeatureMemory:
    """Concatenate per-frame (hw, c) embeddings row-wise, oldest first."""
    if not past_embeddings:
        raise ValueError("feature memory needs at least one past frame")
    shape = past_embeddings[0].shape
    for e in past_embeddings[1:]:
        if e.shape != shape:
            raise ShapeError(f"past-frame embeddings disagree: {e.shape} vs {shape}")
    return FeatureMemory(T.concat(list(past_embeddings), axis=0), len(past_embeddings), spatial)


def sample_orthogonal_gaussian(c: int, count: int, rng: Rng) -> np.ndarray:
    """`count` stacks of floor(c/2) Gaussian rows, Gram-Schmidt orthogonalized,
    each row rescaled back to its own pre-orthogonalization norm (a chi-
    distributed draw, so every row is still marginally Gaussian)."""
    if c < 2:
        raise ValueError(f"feature dimension must be >= 2, got {c}")
    r = c // 2
    g = rng.normal((count, r, c))
    norms = np.linalg.norm(g, axis=2)
    q = np.empty_like(g)
    for i in range(r):
        v = g[:, i, :].copy()
        for j in range(i):
            proj = np.einsum("bc,bc->b", v, q[:, j, :])
            v -= proj[:, None] * q[:, j, :]
        q[:, i, :] = v / np.linalg.norm(v, axis=1, keepdims=True)
    return (q * norms[:, :, None]).astype(np.float32)


def make_projection_basis(c: int, seed: int) -> ProjectionBasis:
    return ProjectionBasis(sample_orthogonal_gaussian(c, 1, Rng(seed))[0], seed)


def project_features(x: Tensor, basis: ProjectionBasis, stabilizer: str = "shared") -> ProjectedFeatures:
    """Lift rows of x through the positive feature map.

    stabilizer:
        "shared"  -- subtract one scalar, the max exponent over all rows
                     (used for the memory side);
        "per_row" -- subtract each row's own max exponent (query side);
        "none"    -- raw map; unbiased kernel estimates, may overflow for
                     feature norms beyond ~12.
    """
    if x.shape[1] != basis.c:
        raise ShapeError(f"features have {x.shape[1]} channels, basis expects {basis.c}")
    u = Tensor(basis.vectors)
    scores = T.matmul(x, T.transpose(u))                                  # (rows, r)
    half_sqnorm = T.mul(T.tsum(T.mul(x, x), axis=1, keepdims=True), 0.5)  # (rows, 1)
    expo = T.sub(scores, half_sqnorm)
    if stabilizer == "shared":
        expo = T.sub(expo, float(expo.data.max()))
    elif stabilizer == "per_row":
        expo = T.sub(expo, Tensor(expo.data.max(axis=1, keepdims=True)))
    elif stabilizer != "none":
        raise ValueError(f"unknown stabilizer mode {stabilizer!r}")
    return ProjectedFeatures(T.mul(T.exp(expo), 1.0 / np.sqrt(basis.r)))


def channel_similarity(mp: ProjectedFeatures, memory: FeatureMemory) -> Tensor:
    """r*c channel-wise similarity M'^T M; the quadratic pixel-pair matrix never exists."""
    if mp.rows != memory.rows:
        raise ShapeError(f"projected rows {mp.rows} != memory rows {memory.rows}")
    return T.matmul(T.transpose(mp.matrix), memory.matrix)


def global_feature(qp: ProjectedFeatures, similarity: Tensor) -> Tensor:
    """Q' (M'^T M), algebraically equal to the (Q' M'^T) M ordering."""
    if qp.matrix.shape[1] != similarity.shape[0]:
        raise ShapeError(f"query features {qp.matrix.shape} vs similarity {similarity.shape}")
    return T.matmul(qp.matrix, similarity)


def normalize_global(g: Tensor, qp: ProjectedFeatures, mp: ProjectedFeatures) -> Tensor:
    """Divide each row by Q' (M'^T 1); rows become convex combinations of memory rows.

    All columns of M'^T 1 are identical, so the reduction collapses to one
    r-vector broadcast across channels. Positivity of the features makes the
    denominator positive; a floor guards the impossible case and reports it.
    """
    r = mp.matrix.shape[1]
    colsum = T.reshape(T.tsum(mp.matrix, axis=0), (r, 1))
    denom = T.matmul(qp.matrix, colsum)                                   # (rows, 1)
    if (denom.data < _DENOM_FLOOR).any():
        warnings.warn("attention denominator underflowed; epsilon floor engaged", RuntimeWarning)
        denom = T.clamp(denom, _DENOM_FLOOR, np.inf)
    return T.div(g, denom)


def attend(memory: FeatureMemory, query: Tensor, basis: ProjectionBasis) -> Tensor:
    """Linear-time attention core: (hw, c) global features for the query rows."""
    mp = project_features(memory.matrix, basis, stabilizer="shared")
    qp = project_features(query, basis, stabilizer="per_row")
    return normalize_global(global_feature(qp, channel_similarity(mp, memory)), qp, mp)


@dataclass
class LtmParams:
    """1x1 conv embeddings: phi for past frames, psi for the query frame."""

    phi_w: Tensor   # (1, 1, c0, c)
    phi_b: Tensor   # (c,)
    psi_w: Tensor
    psi_b: Tensor


def embed_past(frame: Tensor, params: LtmParams) -> Tensor:
    h, w, _ = frame.shape
    c = params.phi_w.shape[3]
    return T.reshape(T.add(T.conv2d(frame, params.phi_w), params.phi_b), (h * w, c))


def embed_query(frame: Tensor, params: LtmParams) -> Tensor:
    h, w, _ = frame.shape
    c = params.psi_w.shape[3]
    return T.reshape(T.add(T.conv2d(frame, params.psi_w), params.psi_b), (h * w, c))


def ltm_forward(past: Sequence[Tensor], current: Tensor, params: LtmParams, rng: Rng) -> Tensor:
    """Full block: embed, project, attend, reshape to an h*w*c global feature map.

    The projection basis is drawn from `rng`, so a caller that hands the same
    stream every time (inference) gets one fixed basis, while a per-step
    stream (training) redraws each forward pass.
    """
    if not past:
        raise ValueError("need at least one past frame")
    h, w, _ = current.shape
    c = params.psi_w.shape[3]
    memory = build_memory([embed_past(f, params) for f in past], spatial=(h, w))
    query = embed_query(current, params)
    basis = make_projection_basis(c, rng.u64_scalar())
    return T.reshape(attend(memory, query, basis), (h, w, c))


MAX_ORACLE_ROWS = 1 << 16


def exact_attention_oracle(query: np.ndarray, memory: np.ndarray, basis: ProjectionBasis,
                           chunk: int = 2048) -> np.ndarray:
    """Quadratic-cost reference: materializes the full row-pair attention
    matrix A = Q' M'^T (in row blocks), then forms (A M) / (A 1).

    Test/benchmark aid only; row counts are capped, and cost grows with the
    product of query and memory rows.
    """
    query = np.asarray(query, dtype=np.float32)
    memory = np.asarray(memory, dtype=np.float32)
    if max(query.shape[0], memory.shape[0]) > MAX_ORACLE_ROWS:
        raise ValueError(f"oracle capped at {MAX_ORACLE_ROWS} rows, got {query.shape[0]}x{memory.shape[0]}")
    mp = project_features(Tensor(memory), basis, stabilizer="shared").matrix.data.astype(np.float64)
    qp = project_features(Tensor(query), basis, stabilizer="per_row").matrix.data.astype(np.float64)
    m64 = memory.astype(np.float64)
    out = np.empty((query.shape[0], memory.shape[1]), dtype=np.float32)
    for start in range(0, query.shape[0], chunk):
        block = qp[start:start + chunk] @ mp.T          # (chunk, Nhw): the quadratic object
        denom = np.maximum(block.sum(axis=1, keepdims=True), _DENOM_FLOOR)
        out[start:start + chunk] = (block @ m64) / denom
    return out


def positive_feature_scores(x: np.ndarray, bases: np.ndarray) -> np.ndarray:
    """Unstabilized feature rows of a single vector under many bases: (count, r)."""
    x = np.asarray(x, dtype=np.float64)
    return np.exp(bases.astype(np.float64) @ x - 0.5 * float(x @ x)) / np.sqrt(bases.shape[1])


def kernel_estimates(q: np.ndarray, m: np.ndarray, bases: np.ndarray) -> np.ndarray:
    """Per-basis phi(q).phi(m); their mean estimates exp(q.m)."""
    return np.einsum("br,br->b", positive_feature_scores(q, bases), positive_feature_scores(m, bases))
