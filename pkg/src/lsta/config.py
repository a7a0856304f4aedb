"""Flat key=value run configuration.

One document carries every tunable: dataset geometry, model widths, window
shape, optimizer settings, and benchmark sweeps. Files hold `key = value`
lines ('#' comments allowed); command-line `--set key=value` overrides apply
afterwards. Unknown keys are rejected, and every value is validated against
the preconditions of the module that consumes it before any work starts.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from . import model, sta


class ConfigError(ValueError):
    """Bad configuration key, value, or combination."""


@dataclass
class RunConfig:
    # reproducibility
    seed: int = 0
    # dataset geometry
    height: int = 64
    width: int = 64
    clip_len: int = 24
    n_clips: int = 40
    occluder_prob: float = 0.5
    # model
    c0: int = 32
    c: int = 16
    n_past: int = 5
    k: int = 8
    d: int = 4
    use_sta: bool = True
    encoder_kernel: int = 3
    # training
    alpha: float = 0.5
    lr: float = 6e-3
    momentum: float = 0.9
    weight_decay: float = 1.5e-4
    iterations: int = 2000
    batch_size: int = 4
    blur_radius: int = 2
    checkpoint_interval: int = 500
    data_dir: str = "data"
    # evaluation
    tol_px: int = 1
    # complexity benchmark
    bench_sizes_linear: str = "4096,16384,65536"
    bench_sizes_exact: str = "512,2048,8192"
    bench_repeats: int = 5
    bench_c: int = 32
    bench_k: int = 8
    bench_d: int = 4


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELDS[name].type
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"key {name!r}: cannot parse {raw!r} as {kind}") from exc


def parse_config_text(text: str, base: RunConfig = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _coerce(key, value))
    return cfg


def load_config(path, base: RunConfig = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_config_text(f.read(), base)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"--set: unknown key {key!r}")
        setattr(cfg, key, _coerce(key, value))
    return cfg


def parse_size_list(raw: str, what: str):
    try:
        sizes = [int(x) for x in raw.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"{what}: cannot parse {raw!r} as comma-separated ints") from exc
    if len(sizes) < 3:
        raise ConfigError(f"{what}: need at least 3 sizes for a slope fit, got {sizes}")
    if max(sizes) < 16 * min(sizes):
        raise ConfigError(f"{what}: sizes must span at least 16x, got {sizes}")
    if sorted(sizes) != sizes:
        raise ConfigError(f"{what}: sizes must be ascending, got {sizes}")
    return sizes


def validate(cfg: RunConfig) -> RunConfig:
    """Check every field against the preconditions of its consumer."""
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.height > 0 and cfg.width > 0, f"canvas {cfg.height}x{cfg.width} must be positive")
    need(cfg.height % 4 == 0 and cfg.width % 4 == 0,
         f"canvas {cfg.height}x{cfg.width} must be divisible by 4 (encoder downsampling)")
    need(cfg.height * cfg.width >= 16,
         f"canvas {cfg.height}x{cfg.width} too small for hard-example mining (needs >= 16 pixels)")
    need(cfg.clip_len >= 2, f"clip_len must be >= 2, got {cfg.clip_len}")
    need(cfg.n_clips >= 1, f"n_clips must be >= 1, got {cfg.n_clips}")
    need(0.0 <= cfg.occluder_prob <= 1.0, f"occluder_prob must lie in [0,1], got {cfg.occluder_prob}")

    need(cfg.c >= 2, f"attention width c must be >= 2, got {cfg.c}")
    need(cfg.c0 >= 1, f"embedding width c0 must be >= 1, got {cfg.c0}")
    need(cfg.n_past >= 1, f"n_past must be >= 1, got {cfg.n_past}")
    need(1 <= cfg.d <= cfg.k, f"need 1 <= stride d <= patch size k, got d={cfg.d} k={cfg.k}")
    need(cfg.encoder_kernel % 2 == 1, f"encoder kernel must be odd, got {cfg.encoder_kernel}")
    try:
        sta.plan_geometry(cfg.height // 4, cfg.width // 4, cfg.c, cfg.k, cfg.d)
    except ValueError as exc:
        raise ConfigError(f"patch window does not fit the encoded map: {exc}") from exc

    need(0.0 <= cfg.alpha <= 1.0, f"alpha must lie in [0,1], got {cfg.alpha}")
    need(cfg.lr >= 0, f"lr must be >= 0, got {cfg.lr}")
    need(0.0 <= cfg.momentum < 1.0, f"momentum must lie in [0,1), got {cfg.momentum}")
    need(cfg.weight_decay >= 0, f"weight_decay must be >= 0, got {cfg.weight_decay}")
    need(cfg.iterations >= 1, f"iterations must be >= 1, got {cfg.iterations}")
    need(cfg.batch_size >= 1, f"batch_size must be >= 1, got {cfg.batch_size}")
    need(cfg.blur_radius >= 0, f"blur_radius must be >= 0, got {cfg.blur_radius}")
    need(cfg.checkpoint_interval >= 1, f"checkpoint_interval must be >= 1, got {cfg.checkpoint_interval}")
    need(cfg.tol_px >= 0, f"tol_px must be >= 0, got {cfg.tol_px}")

    parse_size_list(cfg.bench_sizes_linear, "bench_sizes_linear")
    parse_size_list(cfg.bench_sizes_exact, "bench_sizes_exact")
    need(cfg.bench_repeats >= 1, f"bench_repeats must be >= 1, got {cfg.bench_repeats}")
    need(cfg.bench_c >= 2, f"bench_c must be >= 2, got {cfg.bench_c}")
    need(1 <= cfg.bench_d <= cfg.bench_k,
         f"need 1 <= bench_d <= bench_k, got d={cfg.bench_d} k={cfg.bench_k}")
    return cfg


def model_config(cfg: RunConfig) -> model.ModelConfig:
    return model.ModelConfig(
        encoder=model.EncoderConfig(widths=(16, 32, cfg.c0), kernel=cfg.encoder_kernel),
        c=cfg.c, n_past=cfg.n_past, k=cfg.k, d=cfg.d, use_sta=cfg.use_sta,
    )


def hyper(cfg: RunConfig) -> model.Hyper:
    return model.Hyper(alpha=cfg.alpha, lr=cfg.lr, momentum=cfg.momentum,
                       weight_decay=cfg.weight_decay)
