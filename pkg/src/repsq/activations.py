"""Softmax, sparsemax and straight-through Gumbel-softmax.

All functions act along ``dim`` (default 0), so passing a matrix applies the
map to every column.
"""

import numpy as np
import torch


def softmax(z, temperature: float = 1.0, dim: int = 0) -> torch.Tensor:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = torch.as_tensor(z) / temperature
    z = z - z.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def _sparsemax_forward(z: torch.Tensor, dim: int) -> torch.Tensor:
    srt, _ = torch.sort(z, dim=dim, descending=True)
    cumsum = srt.cumsum(dim) - 1
    shape = [1] * z.dim()
    shape[dim] = z.shape[dim]
    k = torch.arange(1, z.shape[dim] + 1, dtype=z.dtype, device=z.device).view(shape)
    support = (k * srt > cumsum).to(z.dtype)
    k_max = support.sum(dim=dim, keepdim=True)
    tau = cumsum.gather(dim, k_max.long() - 1) / k_max
    return torch.clamp(z - tau, min=0)


class _Sparsemax(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z, dim):
        out = _sparsemax_forward(z, dim)
        ctx.save_for_backward(out)
        ctx.dim = dim
        return out

    @staticmethod
    def backward(ctx, grad):
        (out,) = ctx.saved_tensors
        dim = ctx.dim
        # entries exactly at the threshold count as off-support
        support = (out > 0).to(grad.dtype)
        n_support = support.sum(dim=dim, keepdim=True)
        mean = (grad * support).sum(dim=dim, keepdim=True) / n_support
        return support * (grad - mean), None


def sparsemax(z, dim: int = 0) -> torch.Tensor:
    """Euclidean projection onto the probability simplex (sort-and-threshold)."""
    z = torch.as_tensor(z)
    if not torch.isfinite(z).all():
        raise ValueError("sparsemax input must be finite")
    return _Sparsemax.apply(z, dim)


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-20, 1.0 - 1e-12)))


def gumbel_onehot(logits, temperature: float, rng: np.random.Generator = None, dim: int = -1, hard: bool = True, noise=None) -> torch.Tensor:
    """Gumbel-softmax sample along ``dim``.

    With ``hard`` the forward value is the one-hot argmax while the gradient is
    that of the relaxed sample (straight-through). ``noise`` overrides the draw
    from ``rng`` so a caller can replay a sample.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = torch.as_tensor(logits)
    if noise is None:
        noise = gumbel_noise(tuple(logits.shape), rng)
    g = torch.as_tensor(noise, dtype=logits.dtype)
    soft = softmax(logits + g, temperature, dim=dim)
    if not hard:
        return soft
    index = soft.argmax(dim=dim, keepdim=True)
    onehot = torch.zeros_like(soft).scatter_(dim, index, 1.0)
    return onehot - soft.detach() + soft
