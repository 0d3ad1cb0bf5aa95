"""Dense, sparse and pure-SSM runs of the associative-recall config.

The dense run (every token activated) is the reference that the sparse and
pure-SSM thresholds were frozen against.

    python3 scripts/calibrate_assoc.py [--config configs/assoc_recall.ini] [--out runs/calib]
"""

import argparse
import dataclasses
import logging
import time
from pathlib import Path

from seqboat.config import load_config
from seqboat.training import train

ROOT = Path(__file__).resolve().parent.parent


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "assoc_recall.ini"))
    ap.add_argument("--out", default="runs/calib")
    ap.add_argument("--variants", default="dense,sparse,off")
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    run = load_config(args.config)
    results = []
    for gau in args.variants.split(","):
        model = dataclasses.replace(run.model, gau=gau)
        tc = run.train
        if args.seed is not None:
            model = dataclasses.replace(model, seed=args.seed)
            tc = dataclasses.replace(tc, seed=args.seed)
        start = time.perf_counter()
        report, _ = train(model, tc, run.task, out_dir=Path(args.out) / gau)
        secs = time.perf_counter() - start
        last = report.rows[-1]
        results.append((gau, last.step, last.metric, secs, last.act_rates))
    for gau, step, metric, secs, act in results:
        rates = " ".join(f"{a:.3f}" for a in act)
        print(f"{gau:>6}: metric {metric:.4f} at step {step} in {secs:.0f} s; activation {rates}")


if __name__ == "__main__":
    main()
