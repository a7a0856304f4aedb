"""Atomic file writes: temp-then-rename so partial runs never leave corrupt files."""

from __future__ import annotations

import os


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
