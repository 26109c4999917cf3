"""Command-line entry point: ``cse {synth,train,infer,eval,sweep,gradcheck}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
from skimage.draw import polygon_perimeter

from . import __version__
from .detect import detect, evaluate_scenes, robustness_sweep
from .engine import merge_from_y
from .errors import FormatError, InvalidArgument, NumericFailure
from .geometry import sweep_csv
from .grid import build_grid_from_box, compute_sections
from .pnm import write_pgm, write_ppm
from .sampling import read_features
from .supervision import grad_check
from .synth import GENERATOR_VERSION, gen_dataset, read_dataset, write_dataset
from .training import PRESETS, TrainConfig, config_dict, fit, read_checkpoint, save_checkpoint

log = logging.getLogger("cse")

EXIT_OK, EXIT_THRESHOLD, EXIT_USAGE = 0, 1, 2


# --- argument parsing helpers --------------------------------------------------

def parse_range(text: str) -> list[float]:
    """``lo:hi:step`` -> [lo, lo+step, ..., <= hi]."""
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise InvalidArgument(f"malformed range {text!r}, expected lo:hi:step") from None
    if not (np.isfinite([lo, hi, step]).all() and step > 0 and hi >= lo):
        raise InvalidArgument(f"malformed range {text!r}: need step > 0 and hi >= lo")
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return [round(lo + k * step, 10) for k in range(n)]


def parse_instances(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.split(".."))
    except ValueError:
        raise InvalidArgument(f"malformed instance range {text!r}, expected A..B") from None
    if not 1 <= a <= b <= 4:
        raise InvalidArgument(f"instance range {text!r} must lie within 1..4")
    return a, b


def parse_ints(text: str, n: int, what: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        vals = ()
    if len(vals) != n:
        raise InvalidArgument(f"malformed {what} {text!r}")
    return vals


def _threads(v: int | None) -> int:
    return max(1, v if v else (os.cpu_count() or 1))


def _report_header(args, **extra) -> dict:
    # thread count and verbosity never change results, so they stay out of reports
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "threads", "verbose")}
    return {"version": __version__, "config": cfg, **extra}


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _load_model(path):
    try:
        return read_checkpoint(path)
    except OSError as e:
        raise FormatError(f"cannot read model {path}: {e.strerror or e}") from None


def _load_scenes(path):
    scenes = read_dataset(path)
    if not scenes:
        raise InvalidArgument(f"dataset {path} has no scenes")
    return scenes


# --- commands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    lo, hi = parse_instances(args.instances)
    if args.scenes < 0:
        raise InvalidArgument("--scenes must be >= 0")
    if not 0.0 <= args.touching_prob <= 1.0:
        raise InvalidArgument("--touching-prob must lie in [0, 1]")
    out = Path(args.out)
    scenes = gen_dataset(args.scenes, args.rng, (lo, hi), args.touching_prob, threads=_threads(args.threads))
    meta = {"seed": args.rng, "instances": [lo, hi], "touching_prob": args.touching_prob,
            "artifact_version": __version__}
    write_dataset(out, scenes, meta)
    log.info("wrote %d scenes to %s (%s)", len(scenes), out, GENERATOR_VERSION)
    return EXIT_OK


def cmd_train(args) -> int:
    scenes = _load_scenes(args.data)
    fields = dict(PRESETS[args.preset]) if args.preset else {}
    for flag, name in (("dim", "d"), ("grid", "S"), ("iters", "iters"), ("lr", "lr0"),
                       ("batch", "batch"), ("decay", "decay"), ("decay_every", "decay_every")):
        v = getattr(args, flag)
        if v is not None:
            fields[name] = v
    cfg = TrainConfig(seed=args.rng, d_x=scenes[0].features.shape[-1], **fields)
    log.info("resolved config %s", json.dumps(config_dict(cfg), sort_keys=True))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    params, tlog = fit(scenes, cfg)
    save_checkpoint(params, out, S=cfg.S)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    log_path.write_text(tlog.to_csv())
    _write_json(out.with_suffix(".json"), {"version": __version__, "config": config_dict(cfg),
                                           "final_loss": tlog.rows[-1][2] if tlog.rows else None})
    return EXIT_OK


def _overlay(channel0: np.ndarray, poly: np.ndarray) -> np.ndarray:
    g = (np.clip(channel0, 0.0, 1.0) * 255).round().astype(np.uint8)
    rgb = np.repeat(g[..., None], 3, axis=-1)
    if len(poly):
        # vertices sit on pixel corners; draw on the nearest pixel centres
        rr, cc = polygon_perimeter(np.floor(poly[:, 1] + 0.5), np.floor(poly[:, 0] + 0.5), shape=g.shape, clip=True)
        rgb[rr, cc] = (255, 0, 0)
    return rgb


def cmd_infer(args) -> int:
    params, header = _load_model(args.model)
    feats = read_features(args.scene)
    if feats.shape[-1] != params.d_x:
        raise InvalidArgument(f"scene has {feats.shape[-1]} channels, model expects {params.d_x}")
    S = args.grid or int(header.get("S", 25))
    box = parse_ints(args.box, 4, "box")
    grid = build_grid_from_box(box, S)
    if args.seed_node:
        r, c = (int(v) for v in parse_ints(args.seed_node, 2, "seed node"))
        if not (0 <= r < grid.rows and 0 <= c < grid.cols):
            raise InvalidArgument(f"seed node ({r}, {c}) outside the {grid.rows}x{grid.cols} grid")
        grid = grid.with_seed((r, c))
    (det, y), = detect(params, feats, [grid])
    if args.heatmap:
        write_pgm(args.heatmap, (y[..., :4].max(axis=-1) * 255).round().astype(np.uint8))
    if args.overlay:
        write_ppm(args.overlay, _overlay(feats[..., 0], det.polygon))
    merged = merge_from_y(y, compute_sections(grid)).merged
    doc = _report_header(args, score=det.score, vertices=det.polygon.tolist(),
                         seed_node=list(grid.seed), merged_nodes=int(merged.sum()))
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    if args.polygon:
        Path(args.polygon).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    params, header = _load_model(args.model)
    scenes = _load_scenes(args.data)
    S = args.grid or int(header.get("S", 25))
    rep, ious = evaluate_scenes(params, scenes, S, args.iou, args.ds, args.dc, args.rng, _threads(args.threads))
    extra = _report_header(args, S=S, mean_iou=float(np.mean(ious)))
    text = rep.to_json(**extra) + "\n"
    if args.report:
        Path(args.report).write_text(text)
    print(f"precision {rep.precision:.4f} recall {rep.recall:.4f} f {rep.f_score:.4f} "
          f"mean_iou {np.mean(ious):.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    ds = parse_range(args.ds)
    dc = parse_range(args.dc)
    params, header = _load_model(args.model)
    scenes = _load_scenes(args.data)
    S = args.grid or int(header.get("S", 25))
    rows = robustness_sweep(params, scenes, ds, dc, S, args.iou, args.rng, _threads(args.threads))
    csv_text = sweep_csv(rows)
    if args.csv:
        Path(args.csv).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    if args.json:
        _write_json(args.json, _report_header(args, S=S, rows=rows))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    rep = grad_check(d=args.dim, d_x=args.dx, S=args.grid, eps=args.eps, rng=args.rng, n_coords=args.coords)
    dt = time.perf_counter() - t0
    ok = rep.max_rel_error < args.tol
    print(f"coords {rep.n_coords} max_rel_error {rep.max_rel_error:.3e} "
          f"mean_rel_error {rep.mean_rel_error:.3e} seconds {dt:.1f} {'ok' if ok else 'FAIL'}")
    if args.report:
        _write_json(args.report, _report_header(args, **{k: v for k, v in asdict(rep).items() if k != "worst"},
                                                seconds=dt, passed=ok))
    return EXIT_OK if ok else EXIT_THRESHOLD


# --- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cse", description="Seeded curve-region extraction toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def threads(p):
        p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")

    p = sub.add_parser("synth", help="generate a synthetic ribbon dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=100)
    p.add_argument("--instances", default="1..1")
    p.add_argument("--touching-prob", type=float, default=0.0)
    p.add_argument("--rng", type=int, default=0)
    threads(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--decay", type=float)
    p.add_argument("--decay-every", type=int)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--log", help="loss log CSV (default: next to the checkpoint)")
    p.add_argument("--rng", type=int, default=0)
    threads(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="extract one region from a scene")
    p.add_argument("--model", required=True)
    p.add_argument("--scene", required=True, help="feature file (.csef)")
    p.add_argument("--box", required=True, help="x,y,w,h")
    p.add_argument("--seed-node", help="r,c (default: grid centre)")
    p.add_argument("--grid", type=int)
    p.add_argument("--heatmap")
    p.add_argument("--overlay")
    p.add_argument("--polygon")
    p.set_defaults(func=cmd_infer)

    for name, func in (("eval", cmd_eval), ("sweep", cmd_sweep)):
        p = sub.add_parser(name, help=f"{name} a model on a dataset")
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--grid", type=int)
        p.add_argument("--iou", type=float, default=0.5)
        p.add_argument("--rng", type=int, default=0)
        threads(p)
        if name == "eval":
            p.add_argument("--ds", type=float, default=1.0)
            p.add_argument("--dc", type=float, default=0.0)
            p.add_argument("--report")
        else:
            p.add_argument("--ds", default="1.0:2.0:0.1")
            p.add_argument("--dc", default="0.0:1.0:0.1")
            p.add_argument("--csv")
            p.add_argument("--json")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradient")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--dx", type=int, default=6)
    p.add_argument("--grid", type=int, default=7)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--coords", type=int, default=1000)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--rng", type=int, default=42)
    p.add_argument("--report")
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.info("%s %s", args.command, json.dumps(_report_header(args)["config"], sort_keys=True, default=str))
    try:
        return args.func(args)
    except (InvalidArgument, FormatError, OSError, NumericFailure) as e:
        print(f"cse {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
