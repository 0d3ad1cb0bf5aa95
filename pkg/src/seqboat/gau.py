"""Gated attention unit over compressed sequences, parallel and streaming."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import torch
from torch import nn

from .numeric import DTYPE, silu

MODES = ("full", "window_bi", "window_causal")
ATTN_FNS = ("softmax", "squared_relu")


def window_extent(mode: str, w: int) -> tuple[int, int]:
    """Number of (past, future) compressed neighbours a query may see besides itself."""
    if w <= 0:
        raise ValueError(f"window must be positive, got {w}")
    if mode == "window_causal":
        return w - 1, 0
    if mode == "window_bi":
        return math.ceil(w / 2), w // 2
    raise ValueError(f"not a windowed mode: {mode}")


class _TableLookup(torch.autograd.Function):
    """``table[index]`` whose backward is a bincount instead of a sorted scatter."""

    @staticmethod
    def forward(ctx, table, index):
        ctx.save_for_backward(index)
        ctx.size = table.shape[0]
        return table[index]

    @staticmethod
    def backward(ctx, grad):
        (index,) = ctx.saved_tensors
        g = torch.bincount(index.reshape(-1), weights=grad.reshape(-1), minlength=ctx.size)
        return g, None


def attn_fn_apply(logits: torch.Tensor, fn: str, allowed: torch.Tensor) -> torch.Tensor:
    """Attention weights from logits; disallowed entries get weight zero.

    Softmax rows with no allowed key come out all-zero instead of NaN.
    """
    if fn == "softmax":
        masked = torch.where(allowed, logits, torch.full_like(logits, -math.inf))
        m = masked.amax(dim=-1, keepdim=True).detach()
        m = torch.where(torch.isfinite(m), m, torch.zeros_like(m))
        e = torch.exp(masked - m)
        denom = e.sum(dim=-1, keepdim=True)
        return e / torch.where(denom > 0, denom, torch.ones_like(denom))
    if fn == "squared_relu":
        return torch.relu(logits) ** 2 * allowed
    raise ValueError(f"unknown attention function {fn!r}")


@dataclass
class WorkingMemory:
    """FIFO of the most recent ``w`` (key, value, position) entries."""

    w: int
    keys: deque = field(default_factory=deque)
    values: deque = field(default_factory=deque)
    positions: deque = field(default_factory=deque)
    count: int = 0  # activations seen so far, the compressed index of the next entry

    def push(self, k: torch.Tensor, v: torch.Tensor, pos: int) -> None:
        if self.positions and pos <= self.positions[-1]:
            raise ValueError(f"position {pos} does not follow {self.positions[-1]}")
        self.keys.append(k)
        self.values.append(v)
        self.positions.append(pos)
        if len(self.keys) > self.w:
            self.keys.popleft()
            self.values.popleft()
            self.positions.popleft()
        self.count += 1

    def __len__(self) -> int:
        return len(self.keys)


class GAU(nn.Module):
    """Single-head gated attention with elementwise query/key maps.

    ``attn_flops`` accumulates multiply-adds spent on query-key scores and the
    weighted value sum, counted over true (unpadded) queries only.
    """

    def __init__(
        self,
        d_m: int,
        d_z: int | None = None,
        d_v: int | None = None,
        attn_fn: str = "softmax",
        max_offset: int = 64,
        position_basis: str = "original",
    ):
        super().__init__()
        d_z = d_m if d_z is None else d_z
        d_v = 2 * d_m if d_v is None else d_v
        if d_z != d_m:
            raise ValueError("elementwise query/key maps require d_z == d_m")
        if attn_fn not in ATTN_FNS:
            raise ValueError(f"unknown attention function {attn_fn!r}")
        if position_basis not in ("original", "compressed"):
            raise ValueError(f"unknown position basis {position_basis!r}")
        self.d_m, self.d_z, self.d_v = d_m, d_z, d_v
        self.attn_fn = attn_fn
        self.max_offset = max_offset
        self.position_basis = position_basis

        self.wq = nn.Parameter(1.0 + 0.1 * torch.randn(d_z, dtype=DTYPE))
        self.bq = nn.Parameter(torch.zeros(d_z, dtype=DTYPE))
        self.wk = nn.Parameter(1.0 + 0.1 * torch.randn(d_z, dtype=DTYPE))
        self.bk = nn.Parameter(torch.zeros(d_z, dtype=DTYPE))
        self.Wv = nn.Parameter(torch.randn(d_m, d_v, dtype=DTYPE) / math.sqrt(d_m))
        self.bv = nn.Parameter(torch.zeros(d_v, dtype=DTYPE))
        self.Wg = nn.Parameter(torch.randn(d_m, d_v, dtype=DTYPE) / math.sqrt(d_m))
        self.bg = nn.Parameter(torch.zeros(d_v, dtype=DTYPE))
        self.Wh = nn.Parameter(torch.randn(d_v, d_m, dtype=DTYPE) / math.sqrt(d_v))
        self.bh = nn.Parameter(torch.zeros(d_m, dtype=DTYPE))
        self.rel_bias = nn.Parameter(torch.zeros(2 * max_offset + 1, dtype=DTYPE))
        self.attn_flops = 0

    def relative_bias(self, q_pos: torch.Tensor | int, k_pos: torch.Tensor | int) -> torch.Tensor:
        offset = torch.as_tensor(q_pos) - torch.as_tensor(k_pos)
        L = self.max_offset
        return _TableLookup.apply(self.rel_bias, offset.clamp(-L, L) + L)

    def _project(self, Hc: torch.Tensor):
        Q = self.wq * Hc + self.bq
        K = self.wk * Hc + self.bk
        V = silu(Hc @ self.Wv + self.bv)
        G = silu(Hc @ self.Wg + self.bg)
        return Q, K, V, G

    def _pair_flops(self) -> int:
        return 2 * (self.d_z + self.d_v)

    def forward(
        self,
        Hc: torch.Tensor,
        positions: torch.Tensor,
        lengths: torch.Tensor,
        mode: str = "window_causal",
        w: int = 16,
        causal: bool = False,
    ) -> torch.Tensor:
        """Attend within each row of ``Hc`` [B, R, d_m].

        ``positions`` [B, R] are original-sequence positions of the compressed
        slots and ``lengths`` [B] the true compressed length per row. ``causal``
        only affects ``mode="full"``.
        """
        B, R, _ = Hc.shape
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if w <= 0:
            raise ValueError(f"window must be positive, got {w}")
        if R == 0:
            return Hc.new_zeros(B, 0, self.d_m)
        Q, K, V, G = self._project(Hc)
        if self.position_basis == "compressed":
            pos = torch.arange(R).expand(B, R)
        else:
            pos = positions
        qi = torch.arange(R)
        lengths = lengths.to(torch.long)

        if mode == "full":
            s = lengths.clamp(min=1).to(DTYPE)[:, None, None]
            logits = Q @ K.transpose(-1, -2) / s
            logits = logits + self.relative_bias(pos[:, :, None], pos[:, None, :])
            allowed = qi[None, None, :] < lengths[:, None, None]
            if causal:
                allowed = allowed & (qi[None, None, :] <= qi[None, :, None])
            allowed = allowed.expand(B, R, R)
            weights = attn_fn_apply(logits, self.attn_fn, allowed)
            O = weights @ V
            self.attn_flops += int((lengths * lengths).sum()) * self._pair_flops()
        else:
            O = self._window_attention(Q, K, V, pos, lengths, mode, w)
        return (G * O) @ self.Wh + self.bh

    def _window_attention(self, Q, K, V, pos, lengths, mode, w):
        # Queries are cut into blocks of w; each block scores against its own
        # block plus the neighbouring blocks its window can reach, so work is
        # O(R * w) with dense batched matmuls.
        B, R, _ = Q.shape
        past, future = window_extent(mode, w)
        nb = -(-R // w)
        pad = nb * w - R
        reach_back = 1 if past else 0
        reach_fwd = 1 if future else 0

        def blocks(x, fill=0):
            x = torch.nn.functional.pad(x, (0, 0, w * reach_back, w * reach_fwd + pad), value=fill)
            views = [x[:, j * w : (j + nb) * w] for j in range(reach_back + reach_fwd + 1)]
            views = [v.reshape(B, nb, w, -1) for v in views]
            return torch.cat(views, dim=2)  # [B, nb, span*w, d]

        span = (reach_back + reach_fwd + 1) * w
        Qb = torch.nn.functional.pad(Q, (0, 0, 0, pad)).reshape(B, nb, w, -1)
        Kb = blocks(K)
        Vb = blocks(V)
        qi = torch.arange(nb * w).reshape(nb, w)
        ki = (torch.arange(nb)[:, None] * w - reach_back * w + torch.arange(span)[None, :])  # [nb, span]
        rel = qi[:, :, None] - ki[:, None, :]  # [nb, w, span]
        allowed = (rel <= past) & (rel >= -future) & (ki[:, None, :] >= 0)
        allowed = allowed[None] & (ki[None, :, None, :] < lengths[:, None, None, None])
        logits = Qb @ Kb.transpose(-1, -2) / w
        if self.position_basis == "compressed":
            logits = logits + self.relative_bias(rel, 0)
        else:
            posq = torch.nn.functional.pad(pos, (0, pad)).reshape(B, nb, w)
            posk = blocks(pos[..., None].to(DTYPE))[..., 0].to(torch.long)
            logits = logits + self.relative_bias(posq[..., None], posk[:, :, None, :])
        weights = attn_fn_apply(logits, self.attn_fn, allowed)
        O = (weights @ Vb).reshape(B, nb * w, -1)[:, :R]
        self.attn_flops += int(lengths.sum()) * span * self._pair_flops()
        return O

    def init_memory(self, w: int) -> WorkingMemory:
        if w <= 0:
            raise ValueError(f"window must be positive, got {w}")
        return WorkingMemory(w)

    def step(self, mem: WorkingMemory, h_t: torch.Tensor, pos_t: int) -> torch.Tensor:
        """Consume one activated token; mutates ``mem`` and returns its output row."""
        q, k, v, g = self._project(h_t)
        pos = pos_t if self.position_basis == "original" else mem.count
        mem.push(k, v, pos)
        keys = torch.stack(list(mem.keys))
        values = torch.stack(list(mem.values))
        key_pos = torch.tensor(list(mem.positions))
        logits = keys @ q / mem.w + self.relative_bias(pos, key_pos)
        allowed = torch.ones_like(logits, dtype=torch.bool)
        weights = attn_fn_apply(logits, self.attn_fn, allowed)
        o = weights @ values
        self.attn_flops += len(mem) * self._pair_flops()
        return (g * o) @ self.Wh + self.bh


def attention_edges(
    positions: list[int], mode: str, w: int, causal: bool = False
) -> list[tuple[int, list[int]]]:
    """Attended original positions for every activated query of one sequence."""
    r = len(positions)
    edges = []
    for i, q in enumerate(positions):
        if mode == "full":
            lo, hi = 0, (i if causal else r - 1)
        else:
            past, future = window_extent(mode, w)
            lo, hi = max(0, i - past), min(r - 1, i + future)
        edges.append((q, [positions[j] for j in range(lo, hi + 1)]))
    return edges
