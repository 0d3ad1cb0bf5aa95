"""SeqBoat layers and stacked models, parallel and streaming."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .gau import GAU, MODES, WorkingMemory, attention_edges
from .numeric import DTYPE, silu
from .routing import Configurator, compress, extract
from .ssm import EmaState, MdEma


@dataclass
class ModelConfig:
    vocab: int = 32
    n_layers: int = 2
    d_m: int = 64
    d_z: int | None = None
    d_v: int | None = None
    h: int = 8
    w: int = 16
    alpha: float = 1.0
    # configurator weight std times sqrt(d_m); 0 starts every token at the p=0.5 tie (active)
    conf_init: float = 0.0
    attn_fn: str = "softmax"
    mode: str = "window_causal"
    causal: bool = True
    norm: str = "layer"
    norm_placement: str = "pre"
    position_basis: str = "original"
    head: str = "lm"  # lm | cls
    n_classes: int = 0
    max_len: int = 64
    rel_clip: int | None = None
    gau: str = "sparse"  # sparse | off | dense
    seed: int = 0

    def __post_init__(self):
        if self.d_z is None:
            self.d_z = self.d_m
        if self.d_v is None:
            self.d_v = 2 * self.d_m
        if self.rel_clip is None:
            self.rel_clip = self.max_len if self.mode == "full" else self.w
        for name in ("vocab", "n_layers", "d_m", "d_z", "d_v", "h", "w", "max_len", "rel_clip"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.conf_init < 0:
            raise ValueError("conf_init must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.norm not in ("layer", "scale"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.norm_placement not in ("pre", "post"):
            raise ValueError(f"unknown norm placement {self.norm_placement!r}")
        if self.head not in ("lm", "cls"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == "cls" and self.n_classes <= 0:
            raise ValueError("classification head needs n_classes > 0")
        if self.gau not in ("sparse", "off", "dense"):
            raise ValueError(f"unknown gau setting {self.gau!r}")

    @property
    def out_dim(self) -> int:
        return self.vocab if self.head == "lm" else self.n_classes

    def to_dict(self) -> dict:
        return asdict(self)


class ScaleNorm(nn.Module):
    def __init__(self, d_m: int, eps: float = 1e-5):
        super().__init__()
        self.g = nn.Parameter(torch.tensor(math.sqrt(d_m), dtype=DTYPE))
        self.eps = eps

    def forward(self, x):
        return self.g * x / torch.sqrt((x * x).sum(-1, keepdim=True) + self.eps)


def make_norm(kind: str, d_m: int) -> nn.Module:
    if kind == "layer":
        return nn.LayerNorm(d_m, dtype=DTYPE)
    return ScaleNorm(d_m)


@dataclass
class LayerTrace:
    a: torch.Tensor  # [B, n]
    c: torch.Tensor  # [B, n]
    r: torch.Tensor  # [B]
    attn_flops: int
    edges: list | None = None  # per batch row: [(q, [k, ...]), ...]


@dataclass
class LayerStreamState:
    ema: EmaState
    memory: WorkingMemory
    position: int = 0


class SeqBoatLayer(nn.Module):
    """SSM -> SiLU -> configurator -> sparse GAU -> linear aggregation.

    There is deliberately no feed-forward block.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_m
        self.ema = MdEma(d, cfg.h)
        self.configurator = Configurator(d, cfg.alpha, cfg.conf_init)
        self.gau = GAU(d, cfg.d_z, cfg.d_v, cfg.attn_fn, cfg.rel_clip, cfg.position_basis)
        self.W = nn.Parameter(torch.randn(d, d, dtype=DTYPE) / math.sqrt(d))
        self.b = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.norm = make_norm(cfg.norm, d)

    def _force(self, shape, force):
        if force is not None:
            return force
        if self.cfg.gau == "off":
            return torch.zeros(shape, dtype=DTYPE)
        if self.cfg.gau == "dense":
            return torch.ones(shape, dtype=DTYPE)
        return None

    def forward(self, S: torch.Tensor, force: torch.Tensor | None = None, record_edges: bool = False):
        cfg = self.cfg
        x = self.norm(S) if cfg.norm_placement == "pre" else S
        H = silu(self.ema(x))
        mask = self.configurator(H, force=self._force(H.shape[:-1], force))
        flops_before = self.gau.attn_flops
        Hc, plan = compress(H, mask.a)
        Yc = self.gau(Hc, plan.positions(), plan.r, mode=cfg.mode, w=cfg.w, causal=cfg.causal)
        Y = extract(Yc, plan)
        out = silu(mask.c[..., None] * Y + H @ self.W + self.b + S)
        if cfg.norm_placement == "post":
            out = self.norm(out)
        edges = None
        if record_edges:
            pos = plan.positions()
            edges = [
                attention_edges(pos[i, : int(plan.r[i])].tolist(), cfg.mode, cfg.w, cfg.causal)
                for i in range(pos.shape[0])
            ]
        trace = LayerTrace(mask.a, mask.c.detach(), plan.r, self.gau.attn_flops - flops_before, edges)
        return out, trace

    def init_state(self) -> LayerStreamState:
        return LayerStreamState(self.ema.init_state(), self.gau.init_memory(self.cfg.w))

    def step(self, state: LayerStreamState, s_t: torch.Tensor, force: float | None = None):
        """One timestep for a single sequence; ``state`` is updated in place."""
        cfg = self.cfg
        if cfg.mode != "window_causal":
            raise ValueError("streaming requires window_causal mode")
        x = self.norm(s_t) if cfg.norm_placement == "pre" else s_t
        state.ema, y = self.ema.step(state.ema, x)
        H = silu(y)
        if force is None and cfg.gau != "sparse":
            force = 1.0 if cfg.gau == "dense" else 0.0
        mask = self.configurator(H, force=None if force is None else torch.tensor(float(force)))
        active = bool(mask.a > 0)
        if active:
            Y = self.gau.step(state.memory, H, state.position)
            agg = mask.c * Y
        else:
            agg = torch.zeros_like(H)
        out = silu(agg + H @ self.W + self.b + s_t)
        if cfg.norm_placement == "post":
            out = self.norm(out)
        state.position += 1
        return out, active, mask.c


class SeqBoatModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab, cfg.d_m, dtype=DTYPE)
        nn.init.normal_(self.embed.weight, std=1.0)
        self.layers = nn.ModuleList(SeqBoatLayer(cfg) for _ in range(cfg.n_layers))
        self.head = nn.Linear(cfg.d_m, cfg.out_dim, dtype=DTYPE)
        nn.init.normal_(self.head.weight, std=1.0 / math.sqrt(cfg.d_m))
        nn.init.zeros_(self.head.bias)

    def _embed(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dtype.is_floating_point:
            raise TypeError("token ids must be integers")
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab):
            raise ValueError(f"token id out of range for vocab {self.cfg.vocab}")
        return self.embed(tokens)

    def forward(self, tokens: torch.Tensor, force=None, record_edges: bool = False):
        """Logits for ``tokens`` [B, n] plus one :class:`LayerTrace` per layer.

        ``force`` optionally pins activation decisions, either one [B, n] mask
        shared by all layers or a list with one entry (or None) per layer.
        """
        S = self._embed(tokens)
        traces = []
        for i, layer in enumerate(self.layers):
            f = force[i] if isinstance(force, (list, tuple)) else force
            S, tr = layer(S, force=f, record_edges=record_edges)
            traces.append(tr)
        if self.cfg.head == "cls":
            S = S.mean(dim=-2)
        return self.head(S), traces

    def init_stream(self) -> list[LayerStreamState]:
        return [layer.init_state() for layer in self.layers]

    @torch.no_grad()
    def step(self, states: list[LayerStreamState], token: int, force=None) -> torch.Tensor:
        if self.cfg.head != "lm":
            raise ValueError("streaming decode needs an lm head")
        s = self._embed(torch.tensor([token]))[0]
        for i, (layer, st) in enumerate(zip(self.layers, states)):
            f = force[i] if isinstance(force, (list, tuple)) else force
            s, _, _ = layer.step(st, s, force=f)
        return self.head(s)

    def attn_flops(self) -> int:
        return sum(layer.gau.attn_flops for layer in self.layers)

    def reset_flops(self) -> None:
        for layer in self.layers:
            layer.gau.attn_flops = 0


def model_init(cfg: ModelConfig) -> SeqBoatModel:
    """Build a model whose parameters depend only on ``cfg`` (including its seed)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return SeqBoatModel(cfg)
