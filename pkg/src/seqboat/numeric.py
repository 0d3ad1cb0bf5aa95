"""Dense float64 tensor primitives with reverse-mode gradients.

Tensors are plain ``torch.Tensor`` objects in double precision; the tape is
torch's define-by-run autograd graph. The one primitive that carries a
hand-written backward rule is :func:`causal_convolve`, whose adjoint is a
cross-correlation evaluated through the same zero-padded FFT.
"""

from __future__ import annotations

import torch

DTYPE = torch.float64

# Fault injection for the gradient-check negative control. When nonzero, the
# kernel gradient of causal_convolve is scaled by (1 + value).
_CORRUPT_CONV_BACKWARD = 0.0


def set_conv_backward_corruption(value: float) -> None:
    global _CORRUPT_CONV_BACKWARD
    _CORRUPT_CONV_BACKWARD = float(value)


class NonFiniteError(ValueError):
    """A NaN or infinity reached an op that rejects them."""


def check_finite(x: torch.Tensor, name: str = "tensor") -> None:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"{name} contains non-finite values")


def fft_length(n: int) -> int:
    """Smallest power of two that is at least 2n."""
    size = 1
    while size < 2 * n:
        size *= 2
    return size


def _fft_conv(a: torch.Tensor, b: torch.Tensor, n: int, conj_a: bool = False) -> torch.Tensor:
    size = fft_length(n)
    fa = torch.fft.rfft(a, n=size, dim=-2)
    if conj_a:
        fa = fa.conj()
    fb = torch.fft.rfft(b, n=size, dim=-2)
    return torch.fft.irfft(fa * fb, n=size, dim=-2)[..., :n, :]


class _CausalConvolve(torch.autograd.Function):
    @staticmethod
    def forward(ctx, kernel, signal):
        ctx.save_for_backward(kernel, signal)
        return _fft_conv(kernel, signal, signal.shape[-2])

    @staticmethod
    def backward(ctx, grad_out):
        kernel, signal = ctx.saved_tensors
        n = signal.shape[-2]
        grad_kernel = grad_signal = None
        if ctx.needs_input_grad[0]:
            # d out[t] / d kernel[m] = signal[t - m]  ->  correlate grad with signal
            grad_kernel = _fft_conv(signal, grad_out, n, conj_a=True)
            # broadcasting: kernel may be shared across leading (batch) dims
            while grad_kernel.dim() > kernel.dim():
                grad_kernel = grad_kernel.sum(0)
            if _CORRUPT_CONV_BACKWARD:
                grad_kernel = grad_kernel * (1.0 + _CORRUPT_CONV_BACKWARD)
        if ctx.needs_input_grad[1]:
            grad_signal = _fft_conv(kernel.expand_as(signal), grad_out, n, conj_a=True)
        return grad_kernel, grad_signal


def causal_convolve(kernel: torch.Tensor, signal: torch.Tensor) -> torch.Tensor:
    """Per-channel causal convolution ``out[t] = sum_{k<=t} kernel[k] * signal[t-k]``.

    ``kernel`` has shape ``[n, d]``; ``signal`` has shape ``[..., n, d]`` and the
    kernel is shared across any leading batch dimensions.
    """
    if kernel.shape != signal.shape[-2:]:
        raise ValueError(f"kernel shape {tuple(kernel.shape)} does not match signal {tuple(signal.shape)}")
    check_finite(kernel, "kernel")
    check_finite(signal, "signal")
    return _CausalConvolve.apply(kernel, signal)


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def softmax_lastdim(x: torch.Tensor) -> torch.Tensor:
    z = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def backward(loss: torch.Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it.

    A given loss node may be differentiated once; a second call raises.
    """
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("loss is detached from the graph")
    if getattr(loss, "_seqboat_consumed", False):
        raise RuntimeError("backward already called on this loss; rebuild the graph first")
    loss._seqboat_consumed = True
    loss.backward()
