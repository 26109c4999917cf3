"""Binary PGM (P5) / PPM (P6) read and write, 8-bit only."""
from __future__ import annotations

import numpy as np

from .errors import FormatError


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    img = np.ascontiguousarray(img, dtype=np.uint8)
    H, W = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (W, H))
        fh.write(img.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    H, W, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (W, H))
        fh.write(rgb.tobytes())


def _read_header(data: bytes, path):
    # magic, width, height, maxval separated by whitespace; no comments
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PNM header (offset {pos})")
        fields.append(data[start:pos])
    return fields, pos + 1


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    (magic, w, h, maxval), off = _read_header(data, path)
    if magic not in (b"P5", b"P6") or maxval != b"255":
        raise FormatError(f"{path}: unsupported PNM header {magic!r} maxval {maxval!r}")
    W, H = int(w), int(h)
    ch = 1 if magic == b"P5" else 3
    body = data[off:]
    if len(body) != W * H * ch:
        raise FormatError(f"{path}: expected {W * H * ch} pixel bytes, found {len(body)} (offset {off})")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(H, W) if ch == 1 else arr.reshape(H, W, 3)


def read_mask(path) -> np.ndarray:
    return read_pnm(path) > 127
