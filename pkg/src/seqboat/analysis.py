"""Activation traces, attention spans and FLOP/latency benchmarks.

All outputs are plain dicts or CSV text so they can be diffed and plotted
elsewhere. Span distances are absolute: for bidirectional windows a future
key at +d and a past key at -d both contribute d.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import statistics
import time
from dataclasses import asdict, replace

import numpy as np
import torch

from .model import ModelConfig, SeqBoatModel, model_init
from .tasks import TaskSpec, data_source
from .training import Optimizer, TrainConfig, batch_loss
from .numeric import backward

SPAN_DISTANCE = "absolute"


def config_hash(*parts) -> str:
    blob = json.dumps([asdict(p) if hasattr(p, "__dataclass_fields__") else p for p in parts], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def sample_sequences(task: TaskSpec, k: int, seed: int) -> torch.Tensor:
    """``k`` eval inputs chosen by ``seed``; fixed length so they batch cleanly."""
    source = data_source(task)
    pool = torch.cat([b.inputs for b in source.eval_batches(max(k, task.eval_size), 256)])
    if len(pool) < k:
        raise ValueError(f"only {len(pool)} eval sequences available, {k} requested")
    idx = np.random.default_rng(seed).choice(len(pool), size=k, replace=False)
    return pool[np.sort(idx)]


@torch.no_grad()
def collect_trace(model: SeqBoatModel, inputs: torch.Tensor, force=None, chunk: int = 64) -> dict:
    """Per-layer activation counts, confidences and attention edges for each row of ``inputs``."""
    L = model.cfg.n_layers
    layers = [{"layer": i, "counts": [], "confidence": [], "attention_edges": []} for i in range(L)]
    for s in range(0, len(inputs), chunk):
        part = inputs[s : s + chunk]
        f = None
        if force is not None:
            f = [None if x is None else x[s : s + chunk] for x in force] if isinstance(force, list) else force[s : s + chunk]
        _, traces = model(part, force=f, record_edges=True)
        for i, tr in enumerate(traces):
            layers[i]["counts"].extend(int(v) for v in tr.r)
            layers[i]["confidence"].extend(row.tolist() for row in tr.c)
            layers[i]["attention_edges"].extend([[q, list(ks)] for q, ks in edges] for edges in tr.edges)
    for lay in layers:
        counts = lay["counts"]
        lay["mean"] = float(statistics.fmean(counts)) if counts else 0.0
        lay["std"] = float(statistics.pstdev(counts)) if counts else 0.0
    return {
        "layers": [
            {k: lay[k] for k in ("layer", "counts", "mean", "std", "confidence", "attention_edges")} for lay in layers
        ],
        "span_distance": SPAN_DISTANCE,
    }


def sequence_span(edges) -> float | None:
    """Mean over activated queries of the mean |q - k|; None when nothing activated."""
    if not edges:
        return None
    per_query = [sum(abs(q - k) for k in ks) / len(ks) for q, ks in edges]
    return sum(per_query) / len(per_query)


def span_from_trace(trace: dict) -> list[dict]:
    rows = []
    for lay in trace["layers"]:
        spans = [s for s in (sequence_span(e) for e in lay["attention_edges"]) if s is not None]
        rows.append(
            {
                "layer": lay["layer"],
                "mean_span": sum(spans) / len(spans) if spans else 0.0,
                "sequences": len(spans),
                "distance": trace.get("span_distance", SPAN_DISTANCE),
            }
        )
    return rows


def rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


# ---------------------------------------------------------------- bench


def even_mask(n: int, p: float, batch: int = 1) -> torch.Tensor:
    """Activation mask with round(p*n) ones spread evenly over n positions."""
    t = torch.arange(n, dtype=torch.float64)
    row = (torch.floor((t + 1) * p + 1e-9) - torch.floor(t * p + 1e-9)).clamp(0, 1)
    return row.expand(batch, n).clone()


def count_attn_flops(model: SeqBoatModel, n: int, p: float, batch: int = 1) -> int:
    x = torch.zeros(batch, n, dtype=torch.long)
    model.reset_flops()
    with torch.no_grad():
        model(x, force=even_mask(n, p, batch))
    return model.attn_flops()


def time_train_steps(model: SeqBoatModel, n: int, p: float, batch: int, steps: int, warmup: int) -> float:
    """Mean wall milliseconds per forward+backward+update, after ``warmup`` untimed steps."""
    opt = Optimizer(dict(model.named_parameters()), TrainConfig(steps=steps + warmup))
    gen = torch.Generator().manual_seed(0)
    x = torch.randint(0, model.cfg.vocab, (batch, n), generator=gen)
    y_shape = (batch,) if model.cfg.head == "cls" else (batch, n)
    y = torch.randint(0, model.cfg.out_dim, y_shape, generator=gen)
    force = even_mask(n, p, batch)
    times = []
    for i in range(warmup + steps):
        t0 = time.perf_counter()
        logits, _ = model(x, force=force)
        loss = torch.nn.functional.cross_entropy(logits.reshape(-1, logits.shape[-1]), y.reshape(-1))
        opt.zero_grad()
        backward(loss)
        opt.step()
        if i >= warmup:
            times.append(time.perf_counter() - t0)
    return 1000.0 * sum(times) / len(times)


def time_stream_tokens(model: SeqBoatModel, n: int, p: float) -> float:
    """Mean microseconds per streamed token with the same forced activation pattern."""
    mask = even_mask(n, p)[0].tolist()
    states = model.init_stream()
    t0 = time.perf_counter()
    for t in range(n):
        model.step(states, t % model.cfg.vocab, force=mask[t])
    return 1e6 * (time.perf_counter() - t0) / n


def bench(
    cfg: ModelConfig,
    n: int,
    rates=(0.0, 0.25, 0.5, 1.0),
    batch: int = 4,
    steps: int = 50,
    warmup: int = 5,
    timing: bool = True,
) -> list[dict]:
    if steps < 1:
        raise ValueError("steps must be positive")
    cfg = replace(cfg, max_len=max(cfg.max_len, n))
    model = model_init(cfg)
    rows = []
    for p in rates:
        row = {"p": float(p), "attn_flops": count_attn_flops(model, n, p, batch)}
        if timing:
            row["step_ms"] = time_train_steps(model_init(cfg), n, p, batch, steps, warmup)
            row["token_us"] = time_stream_tokens(model, n, p) if cfg.mode == "window_causal" and cfg.head == "lm" else float("nan")
        else:
            row["step_ms"] = row["token_us"] = float("nan")
        rows.append(row)
    return rows


BENCH_COLUMNS = ["p", "attn_flops", "step_ms", "token_us"]
SPAN_COLUMNS = ["layer", "mean_span", "sequences", "distance"]


@torch.no_grad()
def stream_decode(model: SeqBoatModel, tokens: torch.Tensor) -> torch.Tensor:
    """Logits from feeding ``tokens`` [n] one step at a time."""
    states = model.init_stream()
    return torch.stack([model.step(states, int(t)) for t in tokens])
