"""End-to-end seeded extraction on scenes: grids from boxes, inference, evaluation, sweeps."""
from __future__ import annotations

import numpy as np

from .cell import CellParams
from .engine import infer_batch, merge_from_y
from .errors import InvalidArgument
from .geometry import (DetectionResult, EvalReport, combine_reports, evaluate, mask_iou,
                       nodes_to_mask, trace_contour)
from .grid import GridSpec, build_grid_from_box, compute_sections, perturb_grid, sample_mask
from .sampling import bilinear_sample
from .supervision import label_nodes


def reachable(node_mask: np.ndarray, plan) -> np.ndarray:
    """Positive nodes joined to the seed by a chain of positive previous-section neighbours."""
    lab = label_nodes(node_mask, plan, np.full(plan.shape + (5,), 0.2))
    return merge_from_y(np.eye(5)[lab.label], plan).merged


def seed_in_mask(grid: GridSpec, node_mask: np.ndarray, n_candidates: int = 25) -> GridSpec:
    """Keep the grid's seed if it is positive; otherwise pick, among the
    ``n_candidates`` positive nodes nearest to it, the one from which the most
    positive nodes are reachable (ties go to the nearer node)."""
    if node_mask[grid.seed]:
        return grid
    idx = np.flatnonzero(node_mask.ravel())
    if idx.size == 0:
        raise InvalidArgument("grid samples no node inside the instance")
    pts = grid.points().reshape(-1, 2)
    d = np.linalg.norm(pts[idx] - pts[grid.seed[0] * grid.cols + grid.seed[1]], axis=1)
    order = idx[np.argsort(d, kind="stable")[:n_candidates]]
    best, best_n = None, -1
    for k in order:
        g = grid.with_seed(divmod(int(k), grid.cols))
        n = int(reachable(node_mask, compute_sections(g)).sum())
        if n > best_n:
            best, best_n = g, n
    return best


def gt_grid(instance, S: int = 25) -> GridSpec:
    """Grid over the instance's ground-truth box, seed moved inside the instance if needed."""
    grid = build_grid_from_box(instance.box, S)
    return seed_in_mask(grid, sample_mask(grid, instance.mask))


def to_detection(y: np.ndarray, merge, grid: GridSpec, shape) -> DetectionResult:
    mask = nodes_to_mask(merge.merged, grid, shape)
    polys = trace_contour(mask)
    poly = max(polys, key=len) if polys else np.zeros((0, 2))
    conf = y.max(axis=-1)[merge.merged]
    return DetectionResult(mask, poly, float(conf.mean()) if conf.size else 0.0)


def detect(params: CellParams, features: np.ndarray, grids: list[GridSpec],
           threads: int = 1) -> list[tuple[DetectionResult, np.ndarray]]:
    """Run extraction for several grids over one feature map.

    Returns ``(DetectionResult, y)`` pairs, ``y`` being the (rows, cols, 5) indicators.
    """
    if not grids:
        return []
    vals = np.stack([bilinear_sample(features, g).values for g in grids])
    plans = [compute_sections(g) for g in grids]
    ys, merges = infer_batch(params, vals, plans, threads=threads)
    shape = features.shape[:2]
    return [(to_detection(ys[k], merges[k], grids[k], shape), ys[k]) for k in range(len(grids))]


def detect_many(params, jobs, threads: int = 1):
    """``jobs`` is a list of (features, grid); grids of one shape are batched together."""
    if not jobs:
        return []
    vals = np.stack([bilinear_sample(f, g).values for f, g in jobs])
    plans = [compute_sections(g) for _, g in jobs]
    ys, merges = infer_batch(params, vals, plans, threads=threads)
    return [(to_detection(ys[k], merges[k], g, f.shape[:2]), ys[k]) for k, (f, g) in enumerate(jobs)]


def evaluate_scenes(params: CellParams, scenes, S: int = 25, iou_thr: float = 0.5,
                    delta_s: float = 1.0, delta_c: float = 0.0, rng=0, threads: int = 1):
    """One seeded extraction per ground-truth instance, optionally perturbed.

    Returns the pooled :class:`EvalReport` and the per-instance IoU list
    (prediction vs its own instance).
    """
    if not scenes:
        raise InvalidArgument("no scenes to evaluate")
    rng = np.random.default_rng(rng)
    jobs, owners = [], []
    for s, sc in enumerate(scenes):
        for q, inst in enumerate(sc.instances):
            g = gt_grid(inst, S)
            if delta_s != 1.0 or delta_c != 0.0:
                g = perturb_grid(g, delta_s, delta_c, inst.mask, rng)
            jobs.append((sc.features, g))
            owners.append((s, q))
    results = detect_many(params, jobs, threads=threads)
    per_scene = [[] for _ in scenes]
    ious = []
    for (s, q), (det, _) in zip(owners, results):
        per_scene[s].append(det)
        ious.append(mask_iou(det.mask, scenes[s].instances[q].mask))
    reports = [evaluate(per_scene[s], [i.mask for i in sc.instances], iou_thr)
               for s, sc in enumerate(scenes)]
    return combine_reports(reports, iou_thr), ious


def robustness_sweep(params: CellParams, scenes, ds_values, dc_values, S: int = 25,
                     iou_thr: float = 0.5, rng: int = 0, threads: int = 1) -> list[dict]:
    """Precision/recall/F for every (delta_s, delta_c) setting."""
    rows = []
    for a, ds in enumerate(ds_values):
        for b, dc in enumerate(dc_values):
            seed = np.random.SeedSequence([rng, a, b])
            rep, _ = evaluate_scenes(params, scenes, S, iou_thr, float(ds), float(dc), seed, threads)
            rows.append({"delta_s": float(ds), "delta_c": float(dc), "precision": rep.precision,
                         "recall": rep.recall, "f_score": rep.f_score})
    return rows


__all__ = ["gt_grid", "seed_in_mask", "reachable", "detect", "detect_many", "evaluate_scenes",
           "robustness_sweep", "EvalReport"]
