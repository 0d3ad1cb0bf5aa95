"""Optimizer, losses, finite-difference gradient checks and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import checkpoint as ckpt
from .model import ModelConfig, SeqBoatModel, model_init
from .numeric import NonFiniteError, backward
from .tasks import Batch, TaskSpec, data_source

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    warmup_frac: float = 0.05
    schedule: str = "linear"  # linear | cosine | none
    batch_size: int = 32
    steps: int = 2000
    steps_per_epoch: int = 100
    eval_size: int = 512
    target_metric: float | None = None
    max_seconds: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.schedule not in ("linear", "cosine", "none"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.steps <= 0 or self.steps_per_epoch <= 0 or self.batch_size <= 0:
            raise ValueError("steps, steps_per_epoch and batch_size must be positive")


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate for the update that takes the step counter from ``step`` to ``step + 1``."""
    warmup = int(cfg.warmup_frac * cfg.steps)
    if warmup and step < warmup:
        return cfg.lr * (step + 1) / warmup
    if cfg.schedule == "none":
        return cfg.lr
    frac = (step - warmup) / max(1, cfg.steps - warmup)
    frac = min(max(frac, 0.0), 1.0)
    if cfg.schedule == "linear":
        return cfg.lr * (1.0 - frac)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class Optimizer:
    """AdamW with global-norm clipping, schedule and non-finite gradient guard."""

    def __init__(self, named_params: dict[str, torch.nn.Parameter], cfg: TrainConfig):
        self.cfg = cfg
        self.named = dict(named_params)
        self.inner = torch.optim.AdamW(
            list(self.named.values()),
            lr=cfg.lr,
            betas=(cfg.beta1, cfg.beta2),
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )
        self.step_count = 0

    def zero_grad(self) -> None:
        self.inner.zero_grad(set_to_none=True)

    def step(self) -> float:
        grads = [p.grad for p in self.named.values() if p.grad is not None]
        for name, p in self.named.items():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise FloatingPointError(f"non-finite gradient in parameter group {name!r}")
        norm = torch.nn.utils.clip_grad_norm_(list(self.named.values()), self.cfg.clip_norm) if grads else 0.0
        for group in self.inner.param_groups:
            group["lr"] = lr_at(self.cfg, self.step_count)
        self.inner.step()
        self.step_count += 1
        return float(norm)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {"optim.step_count": torch.tensor(float(self.step_count))}
        for name, p in self.named.items():
            st = self.inner.state.get(p)
            if st:
                out[f"optim.exp_avg.{name}"] = st["exp_avg"]
                out[f"optim.exp_avg_sq.{name}"] = st["exp_avg_sq"]
                out[f"optim.step.{name}"] = torch.as_tensor(st["step"], dtype=torch.float64)
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        self.step_count = int(tensors["optim.step_count"])
        for name, p in self.named.items():
            key = f"optim.exp_avg.{name}"
            if key in tensors:
                self.inner.state[p] = {
                    "step": tensors[f"optim.step.{name}"].clone().reshape(()),
                    "exp_avg": tensors[key].clone().reshape(p.shape),
                    "exp_avg_sq": tensors[f"optim.exp_avg_sq.{name}"].clone().reshape(p.shape),
                }


def optimizer_step(params: dict[str, torch.nn.Parameter], grads: dict[str, torch.Tensor], state: Optimizer) -> None:
    """Functional form: install ``grads`` on ``params`` and take one update."""
    for name, p in params.items():
        g = grads.get(name)
        p.grad = None if g is None else g.detach().clone()
    state.step()


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean negative log-likelihood over supervised positions."""
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets[..., None])[..., 0]
    if mask is None:
        return nll.mean()
    mask = mask.to(nll.dtype)
    return (nll * mask).sum() / mask.sum().clamp(min=1.0)


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    errors: dict[str, float]  # max relative error per group
    inconclusive: list[str] = field(default_factory=list)
    margin: float | None = None

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def grad_check(
    model_fn: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor],
    epsilon: float = 1e-5,
    max_coords: int = 64,
    seed: int = 0,
    margin_fn: Callable[[], float] | None = None,
    min_margin: float | None = None,
    resample: Callable[[int], None] | None = None,
    max_resamples: int = 100,
) -> GradCheckReport:
    """Compare autograd against central differences on up to ``max_coords`` entries per group.

    ``margin_fn`` reports the smallest configurator distance |p - 0.5|; while it
    is at most ``min_margin`` (default 10*epsilon), ``resample(attempt)`` is
    asked for a new evaluation point. Groups are marked inconclusive if no safe
    point turns up.
    """
    min_margin = 10 * epsilon if min_margin is None else min_margin
    margin = None
    if margin_fn is not None:
        attempt = 0
        margin = margin_fn()
        while margin <= min_margin:
            if resample is None or attempt >= max_resamples:
                return GradCheckReport({}, inconclusive=sorted(params), margin=margin)
            resample(attempt)
            attempt += 1
            margin = margin_fn()

    for p in params.values():
        p.grad = None
    loss = model_fn()
    backward(loss)
    analytic = {k: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for k, p in params.items()}

    rng = np.random.default_rng(seed)
    errors = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            n = flat.numel()
            coords = rng.choice(n, size=min(n, max_coords), replace=False)
            worst = 0.0
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = model_fn().item()
                flat[i] = orig - epsilon
                down = model_fn().item()
                flat[i] = orig
                fd = (up - down) / (2 * epsilon)
                ad = analytic[name].view(-1)[i].item()
                err = abs(fd - ad) / max(abs(fd), abs(ad), 1e-8)
                worst = max(worst, err)
            errors[name] = worst
    return GradCheckReport(errors, margin=margin)


# ---------------------------------------------------------------- training


@dataclass
class ReportRow:
    step: int
    epoch: int
    loss: float
    metric: float
    wall_ms: float
    act_rates: list[float]


@dataclass
class TrainReport:
    rows: list[ReportRow] = field(default_factory=list)
    n_layers: int = 0

    def to_csv(self, include_wall_time: bool = False) -> str:
        """CSV text; wall time is zeroed unless requested so reruns compare byte-for-byte."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "epoch", "loss", "metric", "wall_ms"] + [f"act_rate_layer_{i}" for i in range(self.n_layers)])
        for r in self.rows:
            wall = f"{r.wall_ms:.3f}" if include_wall_time else "0"
            writer.writerow([r.step, r.epoch, repr(r.loss), repr(r.metric), wall] + [repr(a) for a in r.act_rates])
        return buf.getvalue()

    def write_csv(self, path, include_wall_time: bool = False) -> None:
        Path(path).write_text(self.to_csv(include_wall_time))

    @property
    def final_metric(self) -> float:
        return self.rows[-1].metric if self.rows else float("nan")


def batch_loss(model: SeqBoatModel, batch: Batch):
    logits, traces = model(batch.inputs)
    if model.cfg.head == "cls":
        loss = cross_entropy(logits, batch.targets[:, -1])
    else:
        loss = cross_entropy(logits, batch.targets, batch.mask)
    return loss, logits, traces


@torch.no_grad()
def evaluate(model: SeqBoatModel, task: TaskSpec, size: int, batch_size: int = 128, source=None):
    """(mean loss, accuracy over supervised positions, activation rate per layer)."""
    source = source or data_source(task)
    total_loss = correct = count = 0.0
    act = np.zeros(model.cfg.n_layers)
    seen = 0
    for batch in source.eval_batches(size, batch_size):
        loss, logits, traces = batch_loss(model, batch)
        m, targets = batch.mask, batch.targets
        if model.cfg.head == "cls":
            m, targets = m[:, -1], targets[:, -1]
        total_loss += loss.item() * m.sum().item()
        pred = logits.argmax(-1)
        correct += ((pred == targets) & m).sum().item()
        count += m.sum().item()
        for i, tr in enumerate(traces):
            act[i] += tr.a.sum().item()
        seen += batch.inputs.numel()
    if count == 0:
        raise ValueError("evaluation set has no supervised positions")
    return total_loss / count, correct / count, (act / seen).tolist()


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    task: TaskSpec,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    stop_at_step: int | None = None,
) -> tuple[TrainReport, SeqBoatModel]:
    """Train on a synthetic task; deterministic given the configs.

    Batches are indexed by global step, so resuming from a checkpoint replays
    the same stream an uninterrupted run would have seen.
    """
    torch.manual_seed(train_cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    report = TrainReport(n_layers=model_cfg.n_layers)
    source = data_source(task)
    if resume is not None:
        model, extra, meta = ckpt.load_model(resume)
        opt = Optimizer(dict(model.named_parameters()), train_cfg)
        opt.load_state_tensors(extra)
        report.rows = [ReportRow(**r) for r in meta.get("report", [])]
    else:
        model = model_init(model_cfg)
        opt = Optimizer(dict(model.named_parameters()), train_cfg)
    last_good = None
    start_time = time.perf_counter()
    epoch_loss = 0.0
    epoch_batches = 0
    end = train_cfg.steps if stop_at_step is None else min(stop_at_step, train_cfg.steps)
    while opt.step_count < end:
        step = opt.step_count
        batch = source.train_batch(step, train_cfg.batch_size)
        model.train()
        try:
            loss, _, _ = batch_loss(model, batch)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"step {step}: {exc}", last_good) from exc
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss.item()} at step {step}", last_good)
        opt.zero_grad()
        backward(loss)
        try:
            opt.step()
        except FloatingPointError as exc:
            raise TrainingDiverged(f"step {step}: {exc}", last_good) from exc
        epoch_loss += loss.item()
        epoch_batches += 1
        if opt.step_count % train_cfg.steps_per_epoch == 0 or opt.step_count == train_cfg.steps:
            _, metric, act = evaluate(model, task, train_cfg.eval_size, source=source)
            wall = (time.perf_counter() - start_time) * 1000.0
            report.rows.append(
                ReportRow(
                    step=opt.step_count,
                    epoch=(opt.step_count - 1) // train_cfg.steps_per_epoch,
                    loss=epoch_loss / epoch_batches,
                    metric=metric,
                    wall_ms=wall,
                    act_rates=act,
                )
            )
            log.info("step %d loss %.4f metric %.4f act %s", opt.step_count, epoch_loss / epoch_batches, metric, act)
            epoch_loss = 0.0
            epoch_batches = 0
            if out is not None:
                last_good = str(out / "checkpoint.bin")
                save_training_checkpoint(last_good, model, opt, report, train_cfg, task)
            if train_cfg.target_metric is not None and metric >= train_cfg.target_metric:
                break
            if train_cfg.max_seconds is not None and wall / 1000.0 > train_cfg.max_seconds:
                break
    if out is not None:
        report.write_csv(out / "report.csv")
        report.write_csv(out / "timing.csv", include_wall_time=True)
    return report, model


def save_training_checkpoint(path, model, opt: Optimizer, report: TrainReport, train_cfg: TrainConfig, task: TaskSpec):
    meta = {
        "report": [asdict(r) for r in report.rows],
        "train": asdict(train_cfg),
        "task": asdict(task),
    }
    ckpt.save_model(path, model, extra=opt.state_tensors(), meta=meta)
