"""Bilinear feature sampling at grid nodes, and the CSEF feature-map file format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument
from .grid import GridSpec

FEATURE_MAGIC = b"CSEF"


@dataclass(frozen=True, eq=False)
class SampledGrid:
    values: np.ndarray  # (rows, cols, d_x)
    grid: GridSpec


def check_feature_map(fmap: np.ndarray) -> np.ndarray:
    fmap = np.asarray(fmap)
    if fmap.ndim != 3:
        raise InvalidArgument(f"feature map must be H x W x d_x, got shape {fmap.shape}")
    H, W, dx = fmap.shape
    if H < 2 or W < 2 or dx < 1:
        raise InvalidArgument(f"feature map too small: {fmap.shape}")
    if not np.all(np.isfinite(fmap)):
        raise InvalidArgument("feature map contains non-finite values")
    return fmap


def bilinear_sample(fmap: np.ndarray, grid: GridSpec) -> SampledGrid:
    """Interpolate ``fmap`` at every node; pixel (i, j) sits at x=j, y=i.

    Coordinates outside the image are clamped to the border first.
    """
    fmap = check_feature_map(fmap)
    H, W, _ = fmap.shape
    pts = grid.points()
    x = np.clip(pts[..., 0], 0.0, W - 1.0)
    y = np.clip(pts[..., 1], 0.0, H - 1.0)
    j0 = np.minimum(np.floor(x).astype(np.int64), W - 2)
    i0 = np.minimum(np.floor(y).astype(np.int64), H - 2)
    fx = (x - j0)[..., None]
    fy = (y - i0)[..., None]
    f = fmap.astype(np.float64, copy=False)
    top = f[i0, j0] * (1 - fx) + f[i0, j0 + 1] * fx
    bot = f[i0 + 1, j0] * (1 - fx) + f[i0 + 1, j0 + 1] * fx
    vals = top * (1 - fy) + bot * fy
    return SampledGrid(vals, grid)


def write_features(path, fmap: np.ndarray) -> None:
    fmap = check_feature_map(fmap)
    H, W, dx = fmap.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", H, W, dx))
        fh.write(np.ascontiguousarray(fmap, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a CSEF feature file (offset 0)")
    H, W, dx = struct.unpack_from("<III", data, 4)
    want = 16 + 4 * H * W * dx
    if len(data) != want:
        raise FormatError(f"{path}: expected {want} bytes for {H}x{W}x{dx}, found {len(data)} (offset 16)")
    arr = np.frombuffer(data, dtype="<f4", offset=16).reshape(H, W, dx)
    return arr.astype(np.float32)
