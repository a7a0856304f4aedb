"""Dense float32 tensors with reverse-mode automatic differentiation.

Values are contiguous row-major numpy float32 arrays. Every differentiable
operation builds a node in a dynamically grown acyclic graph; `backward`
walks it in reverse topological order and accumulates gradients additively
across fan-out. Matrix products and convolution inner products accumulate in
float64 before rounding back to float32 so that comparisons against naive
(loop) oracles stay tight.

Tensors are treated as immutable once constructed; the single sanctioned
mutation is the optimizer overwriting leaf parameter buffers between steps.
"""

from __future__ import annotations

import struct
from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """An operation was invoked outside its stated contract."""


class TensorFormatError(ValueError):
    """Serialized tensor bytes are malformed; message carries the byte offset."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        # ascontiguousarray promotes 0-d to 1-d; keep scalar rank intact
        self.data = np.ascontiguousarray(arr).reshape(arr.shape)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; the module-level functions are the actual ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def parameter(data) -> Tensor:
    """Leaf tensor that collects gradients."""
    return Tensor(data, requires_grad=True)


def _attach(out: Tensor, parents: Sequence[Tensor], bwd) -> Tensor:
    """Register `out` as a graph node if any parent participates in autodiff."""
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bwd
    return out


def _accum(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=np.float32)
    if g.shape != t.data.shape:
        g = g.reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _toposort(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor) -> None:
    """Fill `grad` of every reachable tensor with d(output)/d(tensor).

    `output` must hold exactly one element. Gradients accumulate on top of
    whatever is already stored, so callers zero leaf grads between steps.
    """
    if output.data.size != 1:
        raise ContractError(f"backward requires a scalar output, got shape {output.data.shape}")
    order = _toposort(output)
    output.grad = np.ones_like(output.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def _coerce(other):
    """Scalar operands stay plain floats; they never enter the graph."""
    if isinstance(other, Tensor):
        return other, True
    return float(other), False


def add(a: Tensor, b) -> Tensor:
    b, is_t = _coerce(b)
    out = Tensor(a.data + (b.data if is_t else np.float32(b)))
    parents = (a, b) if is_t else (a,)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        if is_t:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _attach(out, parents, bwd)


def sub(a: Tensor, b) -> Tensor:
    b, is_t = _coerce(b)
    out = Tensor(a.data - (b.data if is_t else np.float32(b)))
    parents = (a, b) if is_t else (a,)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        if is_t:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _attach(out, parents, bwd)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _attach(out, (a,), lambda g: _accum(a, -g))


def mul(a: Tensor, b) -> Tensor:
    b, is_t = _coerce(b)
    bdata = b.data if is_t else np.float32(b)
    out = Tensor(a.data * bdata)
    parents = (a, b) if is_t else (a,)

    def bwd(g):
        _accum(a, _unbroadcast(g * bdata, a.data.shape))
        if is_t:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _attach(out, parents, bwd)


def div(a: Tensor, b) -> Tensor:
    b, is_t = _coerce(b)
    bdata = b.data if is_t else np.float32(b)
    out = Tensor(a.data / bdata)
    odata = out.data
    parents = (a, b) if is_t else (a,)

    def bwd(g):
        _accum(a, _unbroadcast(g / bdata, a.data.shape))
        if is_t:
            _accum(b, _unbroadcast(-g * odata / bdata, b.data.shape))

    return _attach(out, parents, bwd)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y)
    return _attach(out, (a,), lambda g: _accum(a, g * y))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _attach(out, (a,), lambda g: _accum(a, g / a.data))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0

    return _attach(out, (a,), lambda g: _accum(a, g * mask))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes only inside the unclipped band."""
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data >= lo) & (a.data <= hi)
    return _attach(out, (a,), lambda g: _accum(a, g * mask))


# ---------------------------------------------------------------------------
# reductions and shape surgery

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _attach(out, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _attach(out, (a,), lambda g: _accum(a, g.reshape(a.data.shape)))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))
    return _attach(out, (a,), lambda g: _accum(a, g.transpose(inv)))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _attach(out, tuple(tensors), bwd)


def pad2d(a: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the two leading (spatial) axes of an h*w*c tensor."""
    out = Tensor(np.pad(a.data, ((top, bottom), (left, right), (0, 0))))
    h, w = a.data.shape[:2]
    return _attach(out, (a,), lambda g: _accum(a, g[top:top + h, left:left + w]))


def slice_hw(a: Tensor, top: int, left: int, h: int, w: int) -> Tensor:
    out = Tensor(a.data[top:top + h, left:left + w])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[top:top + h, left:left + w] = g
        _accum(a, full)

    return _attach(out, (a,), bwd)


_SCATTER_CHUNK = 1 << 19


def _scatter_rows_np(values: np.ndarray, idx: np.ndarray, nrows: int) -> np.ndarray:
    """Sum `values[i]` into output row `idx[i]`; float64 accumulation.

    Processed in fixed-size row chunks so float64 temporaries stay small;
    the reduction order is fixed, so results are reproducible run to run.
    """
    c = values.shape[1]
    n = values.shape[0]
    chunk = max(1, _SCATTER_CHUNK // max(c, 1))
    acc = np.zeros(nrows * c, dtype=np.float64)
    col = np.arange(c)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        flat = (idx[s:e, None] * c + col).ravel()
        acc += np.bincount(flat, weights=values[s:e].astype(np.float64).ravel(),
                           minlength=nrows * c)
    return acc.reshape(nrows, c).astype(np.float32)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-d tensor; duplicated indices are allowed."""
    out = Tensor(a.data[idx])
    nrows = a.data.shape[0]
    return _attach(out, (a,), lambda g: _accum(a, _scatter_rows_np(g, idx, nrows)))


def scatter_rows(a: Tensor, idx: np.ndarray, nrows: int) -> Tensor:
    """Transpose of take_rows: additively scatter rows to `nrows` slots."""
    out = Tensor(_scatter_rows_np(a.data, idx, nrows))
    return _attach(out, (a,), lambda g: _accum(a, g[idx]))


# ---------------------------------------------------------------------------
# matrix products

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data.astype(np.float64) @ b.data.astype(np.float64))

    def bwd(g):
        g64 = g.astype(np.float64)
        if a.requires_grad:
            _accum(a, g64 @ b.data.astype(np.float64).T)
        if b.requires_grad:
            _accum(b, a.data.astype(np.float64).T @ g64)

    return _attach(out, (a, b), bwd)


_BMM_CHUNK_ELEMS = 1 << 19


def _batched_matmul_f64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-slice float64 GEMM with the float64 temporaries kept chunk-sized.

    Chunking groups whole slices, so each slice's product is the exact same
    GEMM as in a single call.
    """
    batch, m, p = a.shape
    q = b.shape[2]
    out = np.empty((batch, m, q), dtype=np.float32)
    per_slice = m * p + p * q + m * q
    chunk = max(1, _BMM_CHUNK_ELEMS // max(per_slice, 1))
    for s in range(0, batch, chunk):
        e = min(s + chunk, batch)
        out[s:e] = np.matmul(a[s:e].astype(np.float64), b[s:e].astype(np.float64))
    return out


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over a shared leading axis."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"bmm expects matching 3-d stacks, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(f"inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    out = Tensor(_batched_matmul_f64(a.data, b.data))

    def bwd(g):
        if a.requires_grad:
            _accum(a, _batched_matmul_f64(g, b.data.transpose(0, 2, 1)))
        if b.requires_grad:
            _accum(b, _batched_matmul_f64(a.data.transpose(0, 2, 1), g))

    return _attach(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# normalization

def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of an m*n matrix, stabilized by per-row max subtraction."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-d tensor, got {a.data.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        _accum(a, y * (g - dot))

    return _attach(out, (a,), bwd)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize across the last (channel) axis to zero mean / unit variance.

    No learnable affine transform. With the eps guard a constant channel
    vector maps to zeros.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = a.data.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y)

    def bwd(g):
        g = g.astype(np.float64)
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        _accum(a, inv * (g - gm - y * gym))

    return _attach(out, (a,), bwd)


# ---------------------------------------------------------------------------
# convolution and resampling

_IM2COL_CACHE: dict = {}


def _im2col_indices(hp: int, wp: int, k: int, stride: int):
    key = (hp, wp, k, stride)
    hit = _IM2COL_CACHE.get(key)
    if hit is not None:
        return hit
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    oy = np.arange(ho) * stride
    ox = np.arange(wo) * stride
    ky = np.arange(k)
    kx = np.arange(k)
    rows = oy[:, None, None, None] + ky[None, None, :, None]
    cols = ox[None, :, None, None] + kx[None, None, None, :]
    idx = (rows * wp + cols).reshape(-1)
    _IM2COL_CACHE[key] = (idx, ho, wo)
    return idx, ho, wo


def conv2d(a: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an h*w*cin map with a k*k*cin*cout kernel."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    if a.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects h*w*cin and k*k*cin*cout, got {a.data.shape}, {kernel.data.shape}")
    h, w, cin = a.data.shape
    k, k2, kcin, cout = kernel.data.shape
    if k != k2 or kcin != cin:
        raise ShapeError(f"kernel {kernel.data.shape} does not match input channels {cin}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if k > hp or k > wp:
        raise ShapeError(f"kernel size {k} exceeds padded input {hp}x{wp}")
    idx, ho, wo = _im2col_indices(hp, wp, k, stride)
    xp = pad2d(a, pad, pad, pad, pad) if pad else a
    cols = take_rows(reshape(xp, (hp * wp, cin)), idx)
    cols = reshape(cols, (ho * wo, k * k * cin))
    wmat = reshape(kernel, (k * k * cin, cout))
    return reshape(matmul(cols, wmat), (ho, wo, cout))


_UPSAMPLE_CACHE: dict = {}


def _upsample_taps(h: int, w: int, f: int):
    key = (h, w, f)
    hit = _UPSAMPLE_CACHE.get(key)
    if hit is not None:
        return hit

    def axis(n):
        # output pixel centers mapped back to input coordinates (half-pixel
        # convention, no corner alignment), edge-clamped
        src = (np.arange(n * f, dtype=np.float64) + 0.5) / f - 0.5
        i0 = np.floor(src).astype(np.int64)
        frac = src - i0
        i1 = np.clip(i0 + 1, 0, n - 1)
        i0 = np.clip(i0, 0, n - 1)
        return i0, i1, frac

    y0, y1, fy = axis(h)
    x0, x1, fx = axis(w)
    taps = []
    for yi, wy in ((y0, 1.0 - fy), (y1, fy)):
        for xi, wx in ((x0, 1.0 - fx), (x1, fx)):
            idx = (yi[:, None] * w + xi[None, :]).reshape(-1)
            wgt = (wy[:, None] * wx[None, :]).reshape(-1).astype(np.float32)
            taps.append((idx, wgt))
    _UPSAMPLE_CACHE[key] = taps
    return taps


def bilinear_upsample(a: Tensor, factor: int) -> Tensor:
    """Bilinear interpolation by an integer factor; factor 1 is the identity."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return a
    h, w, c = a.data.shape
    taps = _upsample_taps(h, w, factor)
    flat = a.data.reshape(h * w, c)
    acc = np.zeros((h * factor * w * factor, c), dtype=np.float32)
    for idx, wgt in taps:
        acc += wgt[:, None] * flat[idx]
    out = Tensor(acc.reshape(h * factor, w * factor, c))

    def bwd(g):
        g2 = g.reshape(-1, c)
        dx = np.zeros((h * w, c), dtype=np.float32)
        for idx, wgt in taps:
            dx += _scatter_rows_np(g2 * wgt[:, None], idx, h * w)
        _accum(a, dx.reshape(h, w, c))

    return _attach(out, (a,), bwd)


# ---------------------------------------------------------------------------
# binary serialization: magic "LSTA", version byte, u32 rank, u32 dims, f32 payload

MAGIC = b"LSTA"
FORMAT_VERSION = 1


def _read_exact(f, n: int, what: str) -> bytes:
    offset = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise TensorFormatError(f"truncated {what} at byte {offset}: wanted {n} bytes, got {len(buf)}")
    return buf


def save_tensor(f, array) -> None:
    """Write one tensor record to a binary file object."""
    data = array.data if isinstance(array, Tensor) else np.asarray(array, dtype=np.float32)
    data = np.ascontiguousarray(data).reshape(data.shape)
    f.write(MAGIC)
    f.write(struct.pack("<B", FORMAT_VERSION))
    f.write(struct.pack("<I", data.ndim))
    for dim in data.shape:
        f.write(struct.pack("<I", dim))
    f.write(data.astype("<f4").tobytes())


def load_tensor(f) -> np.ndarray:
    """Read one tensor record written by save_tensor."""
    offset = f.tell()
    magic = _read_exact(f, 4, "magic")
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r} at byte {offset}")
    offset = f.tell()
    version = _read_exact(f, 1, "version")[0]
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"unsupported format version {version} at byte {offset}")
    rank = struct.unpack("<I", _read_exact(f, 4, "rank"))[0]
    if rank > 32:
        raise TensorFormatError(f"implausible rank {rank} at byte {f.tell() - 4}")
    shape = tuple(struct.unpack("<I", _read_exact(f, 4, "shape entry"))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    payload = _read_exact(f, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_tensor_file(path, array) -> None:
    with open(path, "wb") as f:
        save_tensor(f, array)


def load_tensor_file(path) -> np.ndarray:
    with open(path, "rb") as f:
        return load_tensor(f)
