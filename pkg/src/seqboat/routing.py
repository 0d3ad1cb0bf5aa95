"""Sparse modular activation: latent configurator, compress/extract, aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .numeric import DTYPE, check_finite, softmax_lastdim


@dataclass
class DecisionMask:
    """Per-timestep activation decisions.

    ``a`` is a 0/1 float tensor (no gradient), ``c`` the confidence of the chosen
    branch (carries gradient), ``p`` the two-way probabilities with the last
    dimension indexing (skip, activate).
    """

    a: torch.Tensor
    c: torch.Tensor
    p: torch.Tensor


@dataclass
class RoutingPlan:
    index_q: torch.Tensor  # [B, n] long, a * cumsum(a)
    r: torch.Tensor  # [B] long, activations per row
    pad_len: int

    @property
    def mask(self) -> torch.Tensor:
        return self.index_q > 0

    def positions(self) -> torch.Tensor:
        """Original-sequence position of each compressed slot, -1 for padding."""
        B, n = self.index_q.shape
        t = torch.arange(n).expand(B, n)
        out = torch.full((B, self.pad_len + 1), -1, dtype=torch.long)
        out.scatter_(1, self.index_q, t)
        out = out[:, 1:]
        valid = torch.arange(self.pad_len).expand(B, -1) < self.r[:, None]
        return torch.where(valid, out, torch.full_like(out, -1))


class Configurator(nn.Module):
    """Two-way tempered softmax over a linear projection of the hidden state."""

    def __init__(self, d_m: int, alpha_init: float = 1.0, init_scale: float = 1.0):
        super().__init__()
        if alpha_init <= 0:
            raise ValueError("alpha_init must be positive")
        self.d_m = d_m
        self.alpha_init = alpha_init
        self.w = nn.Parameter(torch.randn(2, d_m, dtype=DTYPE) * (init_scale / math.sqrt(d_m)))
        self.b = nn.Parameter(torch.zeros(2, dtype=DTYPE))
        # tau stored in log space so gradient steps cannot make it non-positive
        self.log_tau = nn.Parameter(torch.tensor(math.log(alpha_init * math.sqrt(d_m)), dtype=DTYPE))

    @property
    def tau(self) -> torch.Tensor:
        return torch.exp(self.log_tau)

    def logits(self, H: torch.Tensor) -> torch.Tensor:
        return (H @ self.w.T + self.b) / self.tau

    def forward(self, H: torch.Tensor, force: torch.Tensor | None = None) -> DecisionMask:
        logits = self.logits(H)
        check_finite(logits, "configurator logits")
        p = softmax_lastdim(logits)
        if force is None:
            # ties go to activation
            a = (p[..., 1] >= p[..., 0]).to(DTYPE)
        else:
            a = force.to(DTYPE)
        a = a.detach()
        c = torch.where(a > 0, p[..., 1], p[..., 0])
        return DecisionMask(a=a, c=c, p=p)


def _check_binary(a: torch.Tensor) -> None:
    if not torch.all((a == 0) | (a == 1)):
        raise ValueError("activation mask must be exactly binary")


def make_plan(a: torch.Tensor) -> RoutingPlan:
    _check_binary(a)
    a_long = a.to(torch.long)
    index_q = a_long * torch.cumsum(a_long, dim=-1)
    r = a_long.sum(-1)
    pad_len = int(r.max()) if r.numel() else 0
    return RoutingPlan(index_q=index_q, r=r, pad_len=pad_len)


def compress(H: torch.Tensor, a: torch.Tensor) -> tuple[torch.Tensor, RoutingPlan]:
    """Gather activated rows of ``H`` [B, n, d] to the front, zero-padded to the batch max."""
    plan = make_plan(a)
    B, n, d = H.shape
    index = plan.index_q[..., None].expand(B, n, d)
    buf = torch.zeros(B, plan.pad_len + 1, d, dtype=H.dtype)
    # slot 0 collects inactive rows and is dropped
    Hc = buf.scatter(1, index, H)[:, 1:, :]
    return Hc, plan


def extract(Yc: torch.Tensor, plan: RoutingPlan) -> torch.Tensor:
    B, n = plan.index_q.shape
    if Yc.shape[0] != B or Yc.shape[1] != plan.pad_len:
        raise ValueError(f"compressed tensor {tuple(Yc.shape)} does not match plan (B={B}, pad_len={plan.pad_len})")
    d = Yc.shape[-1]
    padded = torch.nn.functional.pad(Yc, (0, 0, 1, 0))
    return torch.gather(padded, 1, plan.index_q[..., None].expand(B, n, d))


def aggregate(outputs: Sequence[torch.Tensor], masks: Sequence[DecisionMask]) -> torch.Tensor:
    if len(outputs) != len(masks) or not outputs:
        raise ValueError("need one mask per module output")
    shape = outputs[0].shape
    total = torch.zeros(shape, dtype=outputs[0].dtype)
    for out, m in zip(outputs, masks):
        if out.shape != shape:
            raise ValueError("module outputs must share a shape")
        total = total + m.c[..., None] * out
    return total


def coverage_witness(coefficients: Sequence[float]) -> tuple[list[int], list[float]]:
    """Decision/confidence pair whose SMA span contains ``sum_i beta_i f_i``.

    Module i is switched on with confidence one exactly when its coefficient is
    nonzero; the coefficients themselves then serve as the free scalars.
    """
    a = [1 if b != 0 else 0 for b in coefficients]
    c = [1.0 if b != 0 else 0.0 for b in coefficients]
    return a, c
