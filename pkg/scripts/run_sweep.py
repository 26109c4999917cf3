"""Robustness curves of a trained model on the fixed test split.

    python3 scripts/run_sweep.py --model models/reference.cse --out results/

Writes sweep_ds.csv (delta_c = 0) and sweep_dc.csv (delta_s = 1), plus JSON copies.
"""
import argparse
import json
from pathlib import Path

import numpy as np

from cse import __version__
from cse.bench import TEST_SEED, test_scenes
from cse.detect import robustness_sweep
from cse.geometry import sweep_csv
from cse.training import read_checkpoint


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--model", default="models/reference.cse")
    ap.add_argument("--out", default="results")
    ap.add_argument("--scenes", type=int, default=100)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    params, header = read_checkpoint(args.model)
    scenes = test_scenes(args.scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curves = {
        "ds": (np.round(np.arange(1.0, 2.01, 0.1), 2), [0.0]),
        "dc": ([1.0], np.round(np.arange(0.0, 1.01, 0.1), 2)),
    }
    for name, (ds, dc) in curves.items():
        rows = robustness_sweep(params, scenes, ds, dc, S=header["S"], threads=args.threads)
        (out / f"sweep_{name}.csv").write_text(sweep_csv(rows))
        doc = {"version": __version__, "model": str(args.model), "test_seed": TEST_SEED,
               "scenes": args.scenes, "rows": rows}
        (out / f"sweep_{name}.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        for r in rows:
            print(f"{name}  ds={r['delta_s']:.2f} dc={r['delta_c']:.2f}  F={r['f_score']:.4f}")


if __name__ == "__main__":
    main()
