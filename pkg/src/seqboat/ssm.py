"""Multi-dimensional damped EMA: kernel form for training, recurrence for decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .numeric import DTYPE, causal_convolve


@dataclass
class MdEmaParams:
    """Constrained EMA parameters, each ``[h, d_m]`` except ``D`` which is ``[d_m]``."""

    eta: torch.Tensor
    alpha: torch.Tensor
    delta: torch.Tensor
    beta: torch.Tensor
    D: torch.Tensor

    @property
    def phi(self) -> torch.Tensor:
        return 1.0 - self.alpha * self.delta

    @property
    def h(self) -> int:
        return self.eta.shape[0]


@dataclass
class EmaState:
    z: torch.Tensor  # [h, d_m]

    @classmethod
    def zeros(cls, h: int, d_m: int) -> "EmaState":
        return cls(torch.zeros(h, d_m, dtype=DTYPE))


def materialize_kernel(params: MdEmaParams, n: int) -> torch.Tensor:
    """``K[t, j] = sum_i eta[i,j] * phi[i,j]**t * alpha[i,j] * beta[i,j]`` for t < n."""
    if n < 1:
        raise ValueError("kernel length must be at least 1")
    phi = params.phi
    # running product phi^0, phi^1, ...; row 0 is exactly one
    steps = torch.cat([torch.ones_like(phi)[None], phi[None].expand(n - 1, *phi.shape)], dim=0)
    powers = torch.cumprod(steps, dim=0)  # [n, h, d_m]
    weight = params.eta * params.alpha * params.beta
    return (powers * weight).sum(dim=1)


def ssm_parallel(S: torch.Tensor, params: MdEmaParams) -> torch.Tensor:
    """Apply the EMA to ``S`` of shape ``[..., n, d_m]`` via FFT convolution."""
    K = materialize_kernel(params, S.shape[-2])
    return causal_convolve(K, S) + params.D * S


def ssm_step(state: EmaState, s_t: torch.Tensor, params: MdEmaParams) -> tuple[EmaState, torch.Tensor]:
    u = params.beta * s_t
    z = params.alpha * u + params.phi * state.z
    y = (params.eta * z).sum(0) + params.D * s_t
    return EmaState(z), y


class MdEma(nn.Module):
    """Learnable MD-EMA; damping and decay live in [0, 1] through a sigmoid."""

    def __init__(self, d_m: int, h: int):
        super().__init__()
        self.d_m = d_m
        self.h = h
        self.eta = nn.Parameter(torch.randn(h, d_m, dtype=DTYPE) / math.sqrt(h))
        self.beta = nn.Parameter(torch.randn(h, d_m, dtype=DTYPE) / math.sqrt(h))
        self.alpha_raw = nn.Parameter(torch.randn(h, d_m, dtype=DTYPE))
        self.delta_raw = nn.Parameter(torch.randn(h, d_m, dtype=DTYPE))
        self.D = nn.Parameter(torch.ones(d_m, dtype=DTYPE))

    def params(self) -> MdEmaParams:
        return MdEmaParams(
            eta=self.eta,
            alpha=torch.sigmoid(self.alpha_raw),
            delta=torch.sigmoid(self.delta_raw),
            beta=self.beta,
            D=self.D,
        )

    def forward(self, S: torch.Tensor) -> torch.Tensor:
        return ssm_parallel(S, self.params())

    def step(self, state: EmaState, s_t: torch.Tensor) -> tuple[EmaState, torch.Tensor]:
        return ssm_step(state, s_t, self.params())

    def init_state(self) -> EmaState:
        return EmaState.zeros(self.h, self.d_m)
