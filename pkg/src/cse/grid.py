"""Sampling grids, seed-centred sections and the 4-neighbour direction algebra."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidArgument


class Direction(enum.IntEnum):
    # class order of the expanding indicator y
    TO_BOTTOM = 0
    TO_RIGHT = 1
    TO_LEFT = 2
    TO_TOP = 3
    NONE = 4

    def opposite(self) -> "Direction":
        if self is Direction.NONE:
            raise InvalidArgument("Direction.NONE has no opposite")
        return Direction(3 - int(self))


MOVES = ((1, 0), (0, 1), (0, -1), (-1, 0))  # (dr, dc) indexed by Direction
OPPOSITE = (3, 2, 1, 0)


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    origin: tuple[float, float]  # (x, y) of node (0, 0), pixels
    step_x: float
    step_y: float
    seed: tuple[int, int]

    def __post_init__(self):
        if self.rows < 3 or self.cols < 3:
            raise InvalidArgument(f"grid must be at least 3x3, got {self.rows}x{self.cols}")
        if not (self.step_x > 0 and self.step_y > 0):
            raise InvalidArgument("grid steps must be positive")
        r, c = self.seed
        if not (0 <= r < self.rows and 0 <= c < self.cols):
            raise InvalidArgument(f"seed {self.seed} outside {self.rows}x{self.cols} grid")

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @property
    def width(self) -> float:
        return (self.cols - 1) * self.step_x

    @property
    def height(self) -> float:
        return (self.rows - 1) * self.step_y

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return self.origin[0] + 0.5 * self.width, self.origin[1] + 0.5 * self.height

    def point(self, r: int, c: int) -> tuple[float, float]:
        return self.origin[0] + c * self.step_x, self.origin[1] + r * self.step_y

    def points(self) -> np.ndarray:
        """Sample locations as a (rows, cols, 2) array of (x, y)."""
        xs = self.origin[0] + np.arange(self.cols) * self.step_x
        ys = self.origin[1] + np.arange(self.rows) * self.step_y
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)

    def with_seed(self, seed) -> "GridSpec":
        return replace(self, seed=(int(seed[0]), int(seed[1])))


def default_seed(S: int) -> tuple[int, int]:
    k = S // 2 if S % 2 else S // 2 - 1
    return k, k


def build_grid_from_box(box, S: int = 25) -> GridSpec:
    """Grid whose corner nodes sit on the corners of ``box = (x, y, w, h)``."""
    x, y, w, h = (float(v) for v in box)
    if not (w > 0 and h > 0):
        raise InvalidArgument(f"degenerate box {box}")
    if S < 3:
        raise InvalidArgument(f"S must be >= 3, got {S}")
    return GridSpec(S, S, (x, y), w / (S - 1), h / (S - 1), default_seed(S))


def neighbor(p, d, grid: GridSpec):
    d = Direction(d)
    if d is Direction.NONE:
        raise InvalidArgument("neighbor() needs a real direction, got NONE")
    dr, dc = MOVES[d]
    r, c = p[0] + dr, p[1] + dc
    if 0 <= r < grid.rows and 0 <= c < grid.cols:
        return r, c
    return None


@dataclass(frozen=True, eq=False)
class SectionPlan:
    """Wavefront decomposition of a grid around its seed.

    ``prev`` is a (rows, cols, 4) boolean array: ``prev[r, c, d]`` is true when
    the neighbour in direction ``d`` belongs to the previous section.
    """

    shape: tuple[int, int]
    seed: tuple[int, int]
    section: np.ndarray
    sections: list[np.ndarray]  # flat row-major node indices per section
    prev: np.ndarray = field(repr=False)

    @property
    def n_rounds(self) -> int:
        return len(self.sections)

    def prev_dirs(self, p) -> tuple[Direction, ...]:
        return tuple(Direction(d) for d in np.flatnonzero(self.prev[p[0], p[1]]))


def compute_sections(grid: GridSpec) -> SectionPlan:
    rows, cols = grid.shape
    sr, sc = grid.seed
    rr, cc = np.mgrid[0:rows, 0:cols]
    section = np.abs(rr - sr) + np.abs(cc - sc)
    flat = section.ravel()
    sections = [np.flatnonzero(flat == k) for k in range(int(flat.max()) + 1)]

    # a move toward the seed along an axis lowers the L1 distance by one
    prev = np.zeros((rows, cols, 4), dtype=bool)
    prev[..., 0] = rr < sr  # bottom neighbour is closer
    prev[..., 1] = cc < sc
    prev[..., 2] = cc > sc
    prev[..., 3] = rr > sr
    return SectionPlan((rows, cols), (sr, sc), section, sections, prev)


def sample_mask(grid: GridSpec, raster: np.ndarray) -> np.ndarray:
    """Node-level mask: the raster pixel nearest to each sample point."""
    raster = np.asarray(raster, dtype=bool)
    H, W = raster.shape
    pts = grid.points()
    j = np.floor(pts[..., 0] + 0.5).astype(np.int64)
    i = np.floor(pts[..., 1] + 0.5).astype(np.int64)
    inside = (i >= 0) & (i < H) & (j >= 0) & (j < W)
    out = np.zeros(grid.shape, dtype=bool)
    out[inside] = raster[i[inside], j[inside]]
    return out


def rescale(grid: GridSpec, delta_s: float, shift=(0.0, 0.0)) -> GridSpec:
    """Scale the grid extent by ``delta_s`` about its centre, then translate."""
    cx, cy = grid.center
    cx += shift[0]
    cy += shift[1]
    sx, sy = grid.step_x * delta_s, grid.step_y * delta_s
    origin = (cx - 0.5 * (grid.cols - 1) * sx, cy - 0.5 * (grid.rows - 1) * sy)
    return replace(grid, origin=origin, step_x=sx, step_y=sy)


def perturb_grid(grid: GridSpec, delta_s: float, delta_c: float, gt_mask: np.ndarray,
                 rng: np.random.Generator, shift=(0.0, 0.0)) -> GridSpec:
    """Rescale a grid and relocate its seed inside the ground-truth region.

    ``gt_mask`` is the instance raster in image space; it is re-sampled at the
    perturbed grid's nodes. The new seed is drawn uniformly among in-mask nodes
    whose distance from the original seed location equals
    ``delta_c * sqrt(area)`` to within half the smaller grid step, falling back
    to the in-mask node closest to that distance.
    """
    if delta_s < 1.0:
        raise InvalidArgument(f"delta_s must be >= 1, got {delta_s}")
    if delta_c < 0.0:
        raise InvalidArgument(f"delta_c must be >= 0, got {delta_c}")
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if not gt_mask.any():
        raise InvalidArgument("ground-truth mask is empty")
    if not sample_mask(grid, gt_mask)[grid.seed]:
        raise InvalidArgument("original seed lies outside the ground-truth mask")

    if delta_s == 1.0 and delta_c == 0.0 and shift[0] == 0 and shift[1] == 0:
        return grid

    seed_xy = np.array(grid.point(*grid.seed))
    target = delta_c * math.sqrt(grid.area)
    out = rescale(grid, delta_s, shift)
    node_in = sample_mask(out, gt_mask).ravel()
    cand = np.flatnonzero(node_in)
    if cand.size == 0:
        raise InvalidArgument("perturbed grid samples no ground-truth node")
    dist = np.linalg.norm(out.points().reshape(-1, 2)[cand] - seed_xy, axis=1)
    err = np.abs(dist - target)
    tol = 0.5 * min(out.step_x, out.step_y)
    band = cand[err <= tol]
    if band.size:
        pick = int(band[rng.integers(band.size)])
    else:
        pick = int(cand[np.argmin(err)])
    return out.with_seed(divmod(pick, out.cols))
