"""``seqboat`` command line: train, eval, trace, span, bench, decode."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from . import analysis
from .checkpoint import CheckpointError, load_model
from .config import ConfigError, load_config
from .tasks import TaskSpec, data_source
from .training import TrainingDiverged, evaluate, train

log = logging.getLogger("seqboat")


class UsageError(Exception):
    """Bad inputs; reported with exit code 2."""


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    """(model, task) from --checkpoint, with --config overriding the stored task."""
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    expect = None
    task = None
    if args.config:
        run = load_config(args.config)
        expect, task = run.model, run.task
    try:
        model, _, meta = load_model(args.checkpoint, expect_config=expect)
    except (OSError, CheckpointError) as exc:
        raise UsageError(f"{args.checkpoint}: {exc}") from exc
    if task is None:
        if "task" not in meta:
            raise UsageError("checkpoint carries no task; pass --config")
        task = TaskSpec(**meta["task"])
    if args.seed is not None:
        task = dataclasses.replace(task, seed=args.seed)
    model.eval()
    return model, task, meta


def cmd_train(args) -> int:
    if not args.config:
        raise UsageError("--config is required")
    run = load_config(args.config)
    tc = run.train if args.seed is None else dataclasses.replace(run.train, seed=args.seed)
    mc = run.model if args.seed is None else dataclasses.replace(run.model, seed=args.seed)
    out = _out_dir(args)
    try:
        report, _ = train(mc, tc, run.task, out_dir=out)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}; last good checkpoint: {exc.last_checkpoint}", file=sys.stderr)
        return 1
    print(f"final metric {report.final_metric:.4f}; report at {out / 'report.csv'}")
    return 0


def cmd_eval(args) -> int:
    model, task, _ = _load(args)
    size = args.samples or task.eval_size
    loss, acc, act = evaluate(model, task, size)
    result = {"loss": loss, "accuracy": acc, "act_rates": act, "samples": size}
    text = json.dumps(result, sort_keys=True, indent=1) + "\n"
    if args.out:
        (_out_dir(args) / "eval.json").write_text(text)
    sys.stdout.write(text)
    return 0


def _trace(args):
    model, task, meta = _load(args)
    k = args.samples or 100
    inputs = analysis.sample_sequences(task, k, args.seed or 0)
    trace = analysis.collect_trace(model, inputs)
    trace = {"config_hash": analysis.config_hash(model.cfg, task), **trace, "samples": k}
    return trace


def cmd_trace(args) -> int:
    trace = _trace(args)
    path = _out_dir(args) / "trace.json"
    path.write_text(json.dumps(trace, sort_keys=True) + "\n")
    print(f"wrote {path}")
    return 0


def cmd_span(args) -> int:
    trace = _trace(args)
    rows = analysis.span_from_trace(trace)
    out = _out_dir(args)
    (out / "span.csv").write_text(analysis.rows_to_csv(rows, analysis.SPAN_COLUMNS))
    for r in rows:
        print(f"layer {r['layer']}: mean span {r['mean_span']:.3f} over {r['sequences']} sequences")
    return 0


def cmd_bench(args) -> int:
    if not args.config:
        raise UsageError("--config is required")
    run = load_config(args.config)
    b = run.bench
    rows = analysis.bench(run.model, b.seq_len, b.rate_list(), b.batch_size, b.steps, b.warmup)
    path = _out_dir(args) / "bench.csv"
    path.write_text(analysis.rows_to_csv(rows, analysis.BENCH_COLUMNS))
    sys.stdout.write(path.read_text())
    return 0


def cmd_decode(args) -> int:
    """Stream eval samples token by token; report predictions at supervised positions."""
    model, task, _ = _load(args)
    if model.cfg.mode != "window_causal" or model.cfg.head != "lm":
        raise UsageError("decode needs a window_causal model with an lm head")
    k = args.samples or 8
    source = data_source(task)
    rows = []
    seen = 0
    for batch in source.eval_batches(k, k):
        for b in range(len(batch)):
            logits = analysis.stream_decode(model, batch.inputs[b])
            pred = logits.argmax(-1)
            for t in torch.nonzero(batch.mask[b]).flatten().tolist():
                rows.append([seen, t, int(batch.targets[b, t]), int(pred[t])])
            seen += 1
    out = _out_dir(args) / "decode.csv"
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample", "position", "target", "predicted"])
        w.writerows(rows)
    correct = sum(r[2] == r[3] for r in rows)
    print(f"streamed {seen} samples: {correct}/{len(rows)} supervised positions correct")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "trace": cmd_trace,
    "span": cmd_span,
    "bench": cmd_bench,
    "decode": cmd_decode,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqboat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", type=str, help="run configuration (INI)")
        p.add_argument("--checkpoint", type=str, help="checkpoint written by train")
        p.add_argument("--out", type=str, help="output directory")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--samples", type=int, help="number of sampled sequences")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.samples is not None and args.samples < 1:
        print("error: --samples must be positive", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
