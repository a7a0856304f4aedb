"""Binary portable pixmap (P6) and graymap (P5) files, 8-bit, maxval 255.

Color frames round-trip through 8-bit quantization (error at most 1/255 per
channel); masks are stored as {0, 255} graymaps and reload exactly (the
loader thresholds at 128). Parse failures report the byte offset.
"""

from __future__ import annotations

import numpy as np

from .ioutil import atomic_write_bytes

_WHITESPACE = b" \t\n\r\x0b\x0c"


class PnmError(ValueError):
    """Malformed portable-anymap bytes; message carries the byte offset."""


def _skip_separators(buf: bytes, pos: int) -> int:
    """Advance past whitespace and '#' comment lines."""
    while pos < len(buf):
        ch = buf[pos]
        if ch == ord("#"):
            nl = buf.find(b"\n", pos)
            if nl == -1:
                raise PnmError(f"unterminated comment at byte {pos}")
            pos = nl + 1
        elif ch in _WHITESPACE:
            pos += 1
        else:
            break
    return pos


def _read_int(buf: bytes, pos: int, what: str) -> tuple:
    pos = _skip_separators(buf, pos)
    start = pos
    while pos < len(buf) and buf[pos:pos + 1].isdigit():
        pos += 1
    if pos == start:
        raise PnmError(f"expected {what} at byte {start}")
    return int(buf[start:pos]), pos


def _parse(buf: bytes):
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"bad magic {magic!r} at byte 0 (want P5 or P6)")
    width, pos = _read_int(buf, 2, "width")
    height, pos = _read_int(buf, pos, "height")
    maxval, pos = _read_int(buf, pos, "maxval")
    if maxval != 255:
        raise PnmError(f"unsupported maxval {maxval} at byte {pos} (only 255)")
    if pos >= len(buf) or buf[pos] not in _WHITESPACE:
        raise PnmError(f"expected single whitespace before payload at byte {pos}")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = buf[pos:pos + need]
    if len(payload) != need:
        raise PnmError(f"truncated payload at byte {pos + len(payload)}: "
                       f"wanted {need} bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8)
    if channels == 3:
        return pixels.reshape(height, width, 3)
    return pixels.reshape(height, width)


def read_pnm(path) -> np.ndarray:
    """uint8 pixels: (H, W, 3) for P6, (H, W) for P5."""
    with open(path, "rb") as f:
        return _parse(f.read())


def _encode(magic: bytes, pixels: np.ndarray) -> bytes:
    h, w = pixels.shape[:2]
    header = magic + b"\n" + f"{w} {h}\n255\n".encode("ascii")
    return header + pixels.astype(np.uint8).tobytes()


def save_frame(path, frame: np.ndarray) -> None:
    """Write an (H, W, 3) float frame in [0, 1] as binary P6."""
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"frame must be H*W*3, got {frame.shape}")
    q = np.clip(np.rint(np.asarray(frame, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    atomic_write_bytes(path, _encode(b"P6", q))


def load_frame(path) -> np.ndarray:
    """(H, W, 3) float32 in [0, 1]."""
    pix = read_pnm(path)
    if pix.ndim != 3:
        raise PnmError(f"{path}: expected a P6 color frame, found P5")
    return (pix.astype(np.float32) / 255.0).astype(np.float32)


def save_mask(path, mask: np.ndarray) -> None:
    """Write a binary {0, 1} mask as a {0, 255} P5 graymap."""
    m = np.asarray(mask)
    q = np.where(m > 0.5, 255, 0).astype(np.uint8)
    atomic_write_bytes(path, _encode(b"P5", q))


def load_mask(path) -> np.ndarray:
    """(H, W) float32 mask in {0, 1}; gray values threshold at 128."""
    pix = read_pnm(path)
    if pix.ndim != 2:
        raise PnmError(f"{path}: expected a P5 graymap, found P6")
    return (pix >= 128).astype(np.float32)
