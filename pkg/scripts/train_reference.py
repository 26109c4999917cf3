"""Train the reference model on the synthetic single-ribbon benchmark.

    python3 scripts/train_reference.py --out models/reference.cse

Data is regenerated from fixed seeds, so the run is reproducible end to end.
"""
import argparse
import json
import logging
import time
from pathlib import Path

from cse.bench import TRAIN_SEED, train_scenes
from cse import __version__
from cse.training import TrainConfig, config_dict, fit, save_checkpoint


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="models/reference.cse")
    ap.add_argument("--iters", type=int, default=20000)
    ap.add_argument("--n-train", type=int, default=500)
    ap.add_argument("--touching-frac", type=float, default=0.0,
                    help="fraction of extra touching two-ribbon training scenes")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    scenes = train_scenes(args.n_train, args.touching_frac)
    cfg = TrainConfig(iters=args.iters, seed=args.seed)
    t0 = time.time()
    params, tlog = fit(scenes, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out, S=cfg.S)
    out.with_suffix(".log.csv").write_text(tlog.to_csv())
    seconds = time.time() - t0
    meta = {"version": __version__, "config": config_dict(cfg), "n_train": args.n_train,
            "touching_frac": args.touching_frac, "train_seed": TRAIN_SEED, "iters": cfg.iters,
            "d": cfg.d, "S": cfg.S, "train_seconds": round(seconds, 1),
            "final_loss": tlog.rows[-1][2] if tlog.rows else None}
    out.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    print(f"saved {out} after {seconds:.0f}s (train seed {TRAIN_SEED})")


if __name__ == "__main__":
    main()
