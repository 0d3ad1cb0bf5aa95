"""Train on the spread-layout recall task, then measure attention span per layer.

Pairs sit anywhere in the sequence, so reaching them from the final query takes
attention edges longer than the window. The run passes when some layer's mean
span exceeds w.

    python3 scripts/span_experiment.py [--config configs/span.ini] [--out runs/span]
"""

import argparse
import csv
import sys
from pathlib import Path

from seqboat.cli import main as cli
from seqboat.config import load_config

ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "span.ini"))
    ap.add_argument("--out", default="runs/span")
    ap.add_argument("--samples", type=int, default=100)
    args = ap.parse_args()
    out = Path(args.out)
    if cli(["train", "--config", args.config, "--out", str(out)]) != 0:
        return 1
    ckpt = str(out / "checkpoint.bin")
    cli(["span", "--checkpoint", ckpt, "--out", str(out), "--samples", str(args.samples)])
    cli(["trace", "--checkpoint", ckpt, "--out", str(out), "--samples", str(args.samples)])
    w = load_config(args.config).model.w
    with open(out / "span.csv") as f:
        spans = [float(r["mean_span"]) for r in csv.DictReader(f)]
    print(f"window w = {w}; widest layer span {max(spans):.2f}")
    return 0 if max(spans) > w else 1


if __name__ == "__main__":
    sys.exit(main())
