"""End-to-end segmentation pipeline.

A small trainable convolutional encoder (three stages, two of them stride-2,
so maps shrink by exactly 4x) stands in for a pretrained backbone; its
contract is the 4x downsampling and a c0-channel embedding. Global (memory
attention) and local (patch attention) feature maps are fused with the query
embedding by the decoder: a 3x3 conv, a residual pair of 3x3 convs (a named
seam where a fancier refinement block could drop in), a 2-channel head, 4x
bilinear upsampling, and a per-pixel softmax over (background, object).

Frame indices are 1-based throughout, matching the t = 1..T convention of the
windowing logic.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import losses, ltm, sta
from . import tensor as T
from .ioutil import atomic_write_text
from .rng import Rng
from .tensor import ShapeError, Tensor

DOWNSAMPLE = 4
ENCODER_STRIDES = (2, 2, 1)

TRAIN_BINS = "train-bins"
PREV_N = "prev-n"


class TrainingError(RuntimeError):
    """Training produced a non-finite loss; message carries diagnostics."""


@dataclass(frozen=True)
class EncoderConfig:
    """Three conv stages; widths[-1] is the embedding width c0."""

    in_channels: int = 3
    widths: tuple = (16, 32, 32)
    kernel: int = 3
    nonlinearity: str = "relu"

    def __post_init__(self):
        if len(self.widths) != len(ENCODER_STRIDES):
            raise ValueError(f"encoder expects {len(ENCODER_STRIDES)} stages, got {self.widths}")
        if self.kernel % 2 != 1:
            raise ValueError(f"encoder kernel must be odd, got {self.kernel}")
        if self.nonlinearity != "relu":
            raise ValueError(f"only the rectifier nonlinearity is implemented, got {self.nonlinearity!r}")
        if int(np.prod(ENCODER_STRIDES)) != DOWNSAMPLE:
            raise ValueError("encoder strides must downsample by exactly 4")

    @property
    def c0(self) -> int:
        return self.widths[-1]


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    c: int = 16
    n_past: int = 5
    k: int = 8
    d: int = 4
    use_sta: bool = True

    def __post_init__(self):
        if self.c < 2:
            raise ValueError(f"attention width c must be >= 2, got {self.c}")
        if self.n_past < 1:
            raise ValueError(f"need at least one past frame, got {self.n_past}")


def _xavier(rng: Rng, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[:-1]))
    fan_out = int(shape[-1]) * (int(np.prod(shape[:2])) if len(shape) == 4 else 1)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return ((rng.uniform(shape) * 2 - 1) * limit).astype(np.float32)


class ModelParams:
    """Named leaf tensors plus architecture bookkeeping."""

    def __init__(self, config: ModelConfig, tensors: Dict[str, Tensor], init_seed: int = 0):
        self.config = config
        self.tensors = tensors
        self.init_seed = init_seed

    @classmethod
    def initialize(cls, config: ModelConfig, rng: Rng) -> "ModelParams":
        enc = config.encoder
        c0, c = enc.c0, config.c
        k = enc.kernel
        shapes = {}
        cin = enc.in_channels
        for i, width in enumerate(enc.widths):
            shapes[f"enc{i}.w"] = (k, k, cin, width)
            shapes[f"enc{i}.b"] = (width,)
            cin = width
        for name in ("phi", "psi") + (("theta",) if config.use_sta else ()):
            shapes[f"{name}.w"] = (1, 1, c0, c)
            shapes[f"{name}.b"] = (c,)
        fuse_in = 3 * c if config.use_sta else 2 * c
        shapes["fuse.w"] = (3, 3, fuse_in, c)
        shapes["fuse.b"] = (c,)
        shapes["refine1.w"] = (3, 3, c, c)
        shapes["refine1.b"] = (c,)
        shapes["refine2.w"] = (3, 3, c, c)
        shapes["refine2.b"] = (c,)
        shapes["head.w"] = (3, 3, c, 2)
        shapes["head.b"] = (2,)

        tensors = {}
        for name, shape in shapes.items():
            if name.endswith(".b"):
                tensors[name] = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
            else:
                tensors[name] = Tensor(_xavier(rng.split(name), shape), requires_grad=True)
        return cls(config, tensors, init_seed=int(rng.seed))

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self):
        return sorted(self.tensors.items())

    def ltm_view(self) -> ltm.LtmParams:
        return ltm.LtmParams(self["phi.w"], self["phi.b"], self["psi.w"], self["psi.b"])

    def sta_view(self) -> sta.StaParams:
        return sta.StaParams(self["theta.w"], self["theta.b"], self.config.k, self.config.d)


def _conv_block(x: Tensor, w: Tensor, b: Tensor, stride: int, pad: int) -> Tensor:
    return T.relu(T.add(T.conv2d(x, w, stride=stride, pad=pad), b))


def encode(frame: Tensor, params: ModelParams) -> Tensor:
    """(H, W, 3) -> (H/4, W/4, c0); H and W must be divisible by 4."""
    H, W, cin = frame.data.shape
    enc = params.config.encoder
    if cin != enc.in_channels:
        raise ShapeError(f"frame has {cin} channels, encoder expects {enc.in_channels}")
    if H % DOWNSAMPLE or W % DOWNSAMPLE:
        raise ValueError(f"frame size {H}x{W} not divisible by {DOWNSAMPLE}")
    pad = enc.kernel // 2
    out = frame
    for i, stride in enumerate(ENCODER_STRIDES):
        out = _conv_block(out, params[f"enc{i}.w"], params[f"enc{i}.b"], stride, pad)
    return out


@dataclass(frozen=True)
class FrameWindow:
    t: int
    past: tuple            # ascending 1-based indices
    strategy: str

    def nearest_past(self) -> int:
        return min(self.past, key=lambda i: (abs(i - self.t), i))


def select_past_frames(t: int, total: int, n: int, mode: str, rng: Optional[Rng] = None) -> FrameWindow:
    """Pick the memory frames for query frame `t` of a `total`-frame video.

    train-bins: frames 1..t-1 split into n near-equal contiguous bins, one
    uniform draw from each (needs t > n and an rng).
    prev-n: the n nearest previous frames; early queries borrow succeeding
    frames, nearest first, to fill the window.
    """
    if not 1 <= t <= total:
        raise ValueError(f"query index {t} outside 1..{total}")
    if n < 1:
        raise ValueError(f"window size must be >= 1, got {n}")
    if mode == TRAIN_BINS:
        if rng is None:
            raise ValueError("train-bins selection needs an rng")
        past_count = t - 1
        if past_count < n:
            raise ValueError(f"query {t} has only {past_count} past frames, need {n} bins")
        base, extra = divmod(past_count, n)
        picks, lo = [], 1
        for b in range(n):
            size = base + (1 if b < extra else 0)
            picks.append(int(rng.integers(lo, lo + size)))
            lo += size
        return FrameWindow(t, tuple(picks), TRAIN_BINS)
    if mode == PREV_N:
        if total - 1 < n:
            raise ValueError(f"video with {total} frames cannot fill a {n}-frame window")
        picks = list(range(max(1, t - n), t))
        nxt = t + 1
        while len(picks) < n:
            picks.append(nxt)
            nxt += 1
        return FrameWindow(t, tuple(sorted(picks)), PREV_N)
    raise ValueError(f"unknown selection mode {mode!r}")


def _refine(x: Tensor, params: ModelParams) -> Tensor:
    # residual pair of 3x3 convs; substitute seam for an anisotropic block
    h = _conv_block(x, params["refine1.w"], params["refine1.b"], 1, 1)
    h = T.add(T.conv2d(h, params["refine2.w"], stride=1, pad=1), params["refine2.b"])
    return T.relu(T.add(x, h))


def decode(g: Tensor, l: Optional[Tensor], q: Tensor, params: ModelParams) -> Tensor:
    """Fuse feature maps into per-pixel (background, object) probabilities."""
    streams = [g] + ([l] if l is not None else []) + [q]
    if params.config.use_sta and l is None:
        raise ValueError("this model fuses a local feature map; got none")
    shapes = {s.data.shape for s in streams}
    if len(shapes) != 1:
        raise ShapeError(f"feature maps disagree: {sorted(shapes)}")
    fused = _conv_block(T.concat(streams, axis=2), params["fuse.w"], params["fuse.b"], 1, 1)
    fused = _refine(fused, params)
    logits = T.add(T.conv2d(fused, params["head.w"], stride=1, pad=1), params["head.b"])
    logits = T.bilinear_upsample(logits, DOWNSAMPLE)
    H, W, _ = logits.data.shape
    probs = T.softmax_rows(T.reshape(logits, (H * W, 2)))
    return T.reshape(probs, (H, W, 2))


def predict_mask(prob) -> np.ndarray:
    """Binary mask by the larger channel; ties go to background."""
    p = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    return (p[:, :, 1] > p[:, :, 0]).astype(np.float32)


def lsta_forward(window: FrameWindow, frames: Sequence[np.ndarray], params: ModelParams,
                 rng: Rng) -> Tensor:
    """Probability map for the window's query frame.

    `frames` is the clip's full frame list (1-based window indices point into
    it). The projection basis is drawn from `rng`: hand a per-step stream
    during training, a fixed stream during inference.
    """
    cfg = params.config
    query_enc = encode(Tensor(frames[window.t - 1]), params)
    past_encs = {i: encode(Tensor(frames[i - 1]), params) for i in window.past}
    h, w, _ = query_enc.data.shape

    lview = params.ltm_view()
    q_mat = ltm.embed_query(query_enc, lview)
    memory = ltm.build_memory([ltm.embed_past(past_encs[i], lview) for i in window.past],
                              spatial=(h, w))
    basis = ltm.make_projection_basis(cfg.c, rng.u64_scalar())
    g_map = T.reshape(ltm.attend(memory, q_mat, basis), (h, w, cfg.c))

    l_map = None
    if cfg.use_sta:
        l_map = sta.sta_forward(q_mat, past_encs[window.nearest_past()], params.sta_view())

    return decode(g_map, l_map, T.reshape(q_mat, (h, w, cfg.c)), params)


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class Hyper:
    alpha: float = 0.5
    lr: float = 6e-3
    momentum: float = 0.9
    weight_decay: float = 1.5e-4

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_update(params: ModelParams, hyper: Hyper, state: Dict[str, np.ndarray]) -> None:
    """Momentum SGD with decoupled-from-nothing weight decay folded into the
    gradient, the usual heavy-ball form."""
    for name, p in params.named():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        g = g + hyper.weight_decay * p.data
        v = state.get(name)
        v = g if v is None else hyper.momentum * v + g
        state[name] = v
        p.data = p.data - hyper.lr * v


def train_step(windows: Sequence[FrameWindow], clip_frames: Sequence[Sequence[np.ndarray]],
               targets: Sequence[np.ndarray], soft_labels: Sequence[np.ndarray],
               params: ModelParams, hyper: Hyper, rng: Rng,
               opt_state: Optional[Dict[str, np.ndarray]] = None) -> float:
    """One SGD step over a batch of (window, clip, mask, soft-label) samples.

    Returns the batch loss before the parameter update. Raises TrainingError
    with per-sample diagnostics if the loss stops being finite.
    """
    if not (len(windows) == len(clip_frames) == len(targets) == len(soft_labels)):
        raise ValueError("batch lists disagree in length")
    leaves = [p for _, p in params.named()]
    T.zero_grads(leaves)

    per_sample = []
    total = None
    for i, window in enumerate(windows):
        prob = lsta_forward(window, clip_frames[i], params, rng.split(i))
        loss = losses.total_loss(prob, targets[i], soft_labels[i], hyper.alpha)
        per_sample.append(float(loss.data))
        total = loss if total is None else T.add(total, loss)
    batch_loss = T.mul(total, 1.0 / len(windows))

    value = float(batch_loss.data)
    if not np.isfinite(value):
        raise TrainingError(f"non-finite batch loss {value}; per-sample losses {per_sample}")
    T.backward(batch_loss)
    if opt_state is None:
        opt_state = {}
    sgd_update(params, hyper, opt_state)
    return value


# ---------------------------------------------------------------------------
# inference over a clip

def infer_clip(frames: Sequence[np.ndarray], params: ModelParams, seed: int):
    """Masks for every frame using prev-N windows (succeeding-frame
    compensation at the clip start) and one fixed projection basis.

    Frame embeddings are computed once and reused across windows. Returns
    (masks, frames_per_second).
    """
    total = len(frames)
    if total < 2:
        raise ValueError(f"need at least 2 frames, got {total}")
    cfg = params.config
    t0 = time.perf_counter()

    encs = [encode(Tensor(f), params) for f in frames]
    lview = params.ltm_view()
    phi_embeds = [ltm.embed_past(e, lview) for e in encs]
    h, w, _ = encs[0].data.shape
    basis = ltm.make_projection_basis(cfg.c, Rng(seed).split("basis").u64_scalar())

    masks = []
    for t in range(1, total + 1):
        window = select_past_frames(t, total, cfg.n_past, PREV_N)
        memory = ltm.build_memory([phi_embeds[i - 1] for i in window.past], spatial=(h, w))
        q_mat = ltm.embed_query(encs[t - 1], lview)
        g_map = T.reshape(ltm.attend(memory, q_mat, basis), (h, w, cfg.c))
        l_map = None
        if cfg.use_sta:
            l_map = sta.sta_forward(q_mat, encs[window.nearest_past() - 1], params.sta_view())
        prob = decode(g_map, l_map, T.reshape(q_mat, (h, w, cfg.c)), params)
        masks.append(predict_mask(prob))
    elapsed = time.perf_counter() - t0
    return masks, total / elapsed


# ---------------------------------------------------------------------------
# checkpoints: name-framed tensor records plus a text manifest

def _config_lines(cfg: ModelConfig) -> List[str]:
    enc = cfg.encoder
    return [
        f"config.c = {cfg.c}",
        f"config.n_past = {cfg.n_past}",
        f"config.k = {cfg.k}",
        f"config.d = {cfg.d}",
        f"config.use_sta = {str(cfg.use_sta).lower()}",
        f"config.encoder_widths = {','.join(str(x) for x in enc.widths)}",
        f"config.encoder_kernel = {enc.kernel}",
        f"config.encoder_in_channels = {enc.in_channels}",
    ]


def save_checkpoint(path, params: ModelParams, extra: Optional[Dict[str, str]] = None,
                    opt_state: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Binary tensor pack at `path`, manifest at `path + '.manifest.txt'`.

    Optimizer velocity buffers ride along under an "opt:" name prefix so a
    resumed run continues exactly where the original left off. The manifest
    is written last and atomically; its presence marks a complete checkpoint.
    """
    import io
    import os
    import struct

    path = str(path)
    records = [(name, p.data) for name, p in params.named()]
    records += [(f"opt:{name}", buf) for name, buf in sorted((opt_state or {}).items())]

    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        T.save_tensor(buf, arr)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)

    lines = ["# model checkpoint manifest"]
    lines += _config_lines(params.config)
    lines.append(f"init_seed = {params.init_seed}")
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    for name, arr in records:
        shape = "x".join(str(s) for s in arr.shape)
        origin = "sgd-velocity" if name.startswith("opt:") else f"xavier:{params.init_seed}/{name}"
        lines.append(f"tensor {name} {shape} {origin}")
    atomic_write_text(path + ".manifest.txt", "\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple:
    """(ModelParams, manifest key/value dict, optimizer state dict)."""
    import struct

    path = str(path)
    meta: Dict[str, str] = {}
    with open(path + ".manifest.txt", "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("tensor "):
                continue
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()

    widths = tuple(int(x) for x in meta["config.encoder_widths"].split(","))
    cfg = ModelConfig(
        encoder=EncoderConfig(
            in_channels=int(meta.get("config.encoder_in_channels", 3)),
            widths=widths,
            kernel=int(meta["config.encoder_kernel"]),
        ),
        c=int(meta["config.c"]),
        n_past=int(meta["config.n_past"]),
        k=int(meta["config.k"]),
        d=int(meta["config.d"]),
        use_sta=meta["config.use_sta"] == "true",
    )

    tensors: Dict[str, Tensor] = {}
    opt_state: Dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        count = struct.unpack("<I", f.read(4))[0]
        for _ in range(count):
            name_len = struct.unpack("<H", f.read(2))[0]
            name = f.read(name_len).decode("utf-8")
            arr = T.load_tensor(f)
            if name.startswith("opt:"):
                opt_state[name[4:]] = arr
            else:
                tensors[name] = Tensor(arr, requires_grad=True)
    params = ModelParams(cfg, tensors, init_seed=int(meta.get("init_seed", 0)))
    return params, meta, opt_state
