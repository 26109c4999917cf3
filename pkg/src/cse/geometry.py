"""Image-space masks and contours from merged nodes, and detection metrics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument
from .grid import GridSpec

CROSS4 = ndimage.generate_binary_structure(2, 1)
FULL8 = np.ones((3, 3), dtype=bool)


@dataclass
class DetectionResult:
    mask: np.ndarray
    polygon: np.ndarray
    score: float


@dataclass
class EvalReport:
    precision: float
    recall: float
    f_score: float
    matches: list[tuple[int, int, float]] = field(default_factory=list)
    iou_thr: float = 0.5
    n_preds: int = 0
    n_gts: int = 0

    def to_json(self, **extra) -> str:
        doc = {
            **extra,
            "iou_thr": self.iou_thr,
            "precision": self.precision,
            "recall": self.recall,
            "f_score": self.f_score,
            "matches": [{"pred": p, "gt": g, "iou": round(float(v), 6)} for p, g, v in self.matches],
        }
        return json.dumps(doc, indent=1, sort_keys=True)


def f_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def nodes_to_mask(merged: np.ndarray, grid: GridSpec, shape) -> np.ndarray:
    """Paint a step_x x step_y cell centred on every merged node.

    A pixel centre x belongs to column ``floor((x - x0) / step_x + 0.5)``, so
    neighbouring cells tile without gaps or overlap; anything off-grid or
    off-image is dropped.
    """
    merged = np.asarray(merged, dtype=bool)
    H, W = shape
    x0, y0 = grid.origin
    col = np.floor((np.arange(W) - x0) / grid.step_x + 0.5).astype(np.int64)
    row = np.floor((np.arange(H) - y0) / grid.step_y + 0.5).astype(np.int64)
    cok = (col >= 0) & (col < grid.cols)
    rok = (row >= 0) & (row < grid.rows)
    out = np.zeros((H, W), dtype=bool)
    if not cok.any() or not rok.any():
        return out
    sub = merged[np.ix_(row[rok], col[cok])]
    out[np.ix_(rok, cok)] = sub
    return out


# unit steps of the four edge directions in (x, y) vertex space
_EDGE_STEP = {0: (1, 0), 1: (0, 1), 2: (-1, 0), 3: (0, -1)}


def _outer_loop(comp: np.ndarray) -> np.ndarray:
    """Crack-following trace of one 4-connected component's outer boundary.

    Vertex (vx, vy) is the top-left corner of pixel (row=vy, col=vx). Edges
    are oriented so the loop has positive signed area in (x, y); at a saddle
    the walk keeps hugging the pixel it came along, which keeps diagonal
    pixels apart (4-connectivity) and opens pinched cavities to the outside.
    """
    filled = ndimage.binary_fill_holes(comp, structure=FULL8)
    H, W = filled.shape
    pad = np.zeros((H + 2, W + 2), dtype=bool)
    pad[1:-1, 1:-1] = filled
    # edges keyed by start vertex -> list of (kind, pixel)
    out_edges: dict[tuple[int, int], list[tuple[int, tuple[int, int]]]] = {}
    ii, jj = np.nonzero(filled)
    for i, j in zip(ii.tolist(), jj.tolist()):
        pi, pj = i + 1, j + 1
        if not pad[pi - 1, pj]:
            out_edges.setdefault((j, i), []).append((0, (i, j)))
        if not pad[pi, pj + 1]:
            out_edges.setdefault((j + 1, i), []).append((1, (i, j)))
        if not pad[pi + 1, pj]:
            out_edges.setdefault((j + 1, i + 1), []).append((2, (i, j)))
        if not pad[pi, pj - 1]:
            out_edges.setdefault((j, i + 1), []).append((3, (i, j)))

    i0, j0 = int(ii[0]), int(jj[0])  # first pixel in raster order: its top edge is outer
    start = ((j0, i0), 0, (i0, j0))
    verts = []
    v, kind, pix = start
    while True:
        verts.append(v)
        dx, dy = _EDGE_STEP[kind]
        v = (v[0] + dx, v[1] + dy)
        options = out_edges[v]
        if len(options) == 1:
            kind, pix = options[0]
        else:
            kind, pix = next(o for o in options if o[1] == pix)
        if (v, kind, pix) == start:
            break
    pts = np.asarray(verts, dtype=np.float64)
    # drop vertices in the middle of straight runs
    prev = np.roll(pts, 1, axis=0)
    nxt = np.roll(pts, -1, axis=0)
    cross = (pts[:, 0] - prev[:, 0]) * (nxt[:, 1] - pts[:, 1]) - (pts[:, 1] - prev[:, 1]) * (nxt[:, 0] - pts[:, 0])
    pts = pts[cross != 0]
    return pts - 0.5


def trace_contour(mask: np.ndarray) -> list[np.ndarray]:
    """Outer boundary polygon of every 4-connected component, holes ignored.

    Vertices lie on pixel corners in (x, y) pixel coordinates (pixel (i, j)
    spans x in [j - 0.5, j + 0.5]); each loop has positive signed area, i.e. it
    runs counter-clockwise in a y-up frame.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return []
    lab, n = ndimage.label(mask, structure=CROSS4)
    return [_outer_loop(lab == k) for k in range(1, n + 1)]


def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise InvalidArgument(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def evaluate(preds: list[DetectionResult], gt_masks: list[np.ndarray], iou_thr: float = 0.5) -> EvalReport:
    """Greedy matching in descending score order; each GT is matched at most once."""
    gt_masks = [getattr(g, "mask", g) for g in gt_masks]
    order = sorted(range(len(preds)), key=lambda k: -preds[k].score)
    taken = set()
    matches = []
    for k in order:
        best, best_iou = None, -1.0
        for g, gm in enumerate(gt_masks):
            if g in taken:
                continue
            v = mask_iou(preds[k].mask, gm)
            if v > best_iou:
                best, best_iou = g, v
        if best is not None and best_iou >= iou_thr:
            taken.add(best)
            matches.append((k, best, best_iou))
    P = len(matches) / len(preds) if preds else 0.0
    R = len(matches) / len(gt_masks) if gt_masks else 0.0
    return EvalReport(P, R, f_score(P, R), matches, iou_thr, len(preds), len(gt_masks))


def combine_reports(reports: list[EvalReport], iou_thr: float = 0.5) -> EvalReport:
    """Pool per-scene reports (micro-averaged counts)."""
    tp = sum(len(r.matches) for r in reports)
    n_p = sum(r.n_preds for r in reports)
    n_g = sum(r.n_gts for r in reports)
    P = tp / n_p if n_p else 0.0
    R = tp / n_g if n_g else 0.0
    matches = [m for r in reports for m in r.matches]
    return EvalReport(P, R, f_score(P, R), matches, iou_thr, n_p, n_g)


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["delta_s", "delta_c", "precision", "recall", "f_score"])
    for r in rows:
        w.writerow([f"{r['delta_s']:.4f}", f"{r['delta_c']:.4f}", f"{r['precision']:.6f}",
                    f"{r['recall']:.6f}", f"{r['f_score']:.6f}"])
    return buf.getvalue()
