"""Portable float map reader and writer.

Header lines are ``Pf`` (one channel) or ``PF`` (three), ``width height`` and
a scale whose sign gives the byte order (negative: little-endian).  Rows are
stored bottom to top.
"""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np


class PFMError(ValueError):
    pass


_TOKEN = re.compile(rb"\S+")


def write_pfm(path: str | os.PathLike, data: np.ndarray) -> None:
    arr = np.asarray(data)
    if arr.ndim == 2:
        tag = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        tag = b"PF"
    else:
        raise PFMError(f"{path}: cannot store array of shape {arr.shape} as PFM")
    h, w = arr.shape[:2]
    payload = np.ascontiguousarray(np.flipud(arr), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        fh.write(payload.tobytes())


def read_pfm(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"PFM file not found: {path}") from None
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.search(raw, pos)
        if m is None:
            raise PFMError(f"{path}: truncated header at byte offset {pos}")
        fields.append((m.group(), m.start()))
        pos = m.end()
    (tag, t0), (ws, w0), (hs, h0), (ss, s0) = fields
    if tag not in (b"Pf", b"PF"):
        raise PFMError(f"{path}: bad magic {tag!r} at byte offset {t0}")
    try:
        w, h = int(ws), int(hs)
    except ValueError:
        raise PFMError(f"{path}: bad dimensions at byte offset {w0}") from None
    if w <= 0 or h <= 0:
        raise PFMError(f"{path}: non-positive dimensions at byte offset {w0 if w <= 0 else h0}")
    try:
        scale = float(ss)
    except ValueError:
        raise PFMError(f"{path}: bad scale {ss!r} at byte offset {s0}") from None
    if scale == 0:
        raise PFMError(f"{path}: zero scale at byte offset {s0}")
    # exactly one whitespace byte separates the scale from the payload
    start = pos + 1
    channels = 3 if tag == b"PF" else 1
    count = w * h * channels
    if len(raw) - start < 4 * count:
        raise PFMError(f"{path}: payload truncated at byte offset {len(raw)} "
                       f"(need {4 * count} bytes from offset {start})")
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=start).astype(np.float32)
    arr = arr.reshape((h, w, 3) if channels == 3 else (h, w))
    return np.ascontiguousarray(np.flipud(arr))
