"""Dense tensor kernels used by every layer of the grounding network.

Tensors are ``torch.Tensor`` (float32 by default) and the computation tape is
torch's autograd graph: it is built during one forward pass and consumed by a
single :func:`backward` call (``retain_graph=False``).  The finite-difference
helpers at the bottom never touch autograd, so they can serve as an
independent check of it.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

DTYPE = torch.float32
LN_EPS = 1e-5


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise DimensionError(
            f"matmul: inner dimensions disagree for shapes {tuple(a.shape)} and {tuple(b.shape)}"
        )
    return a @ b


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if not -x.dim() <= axis < x.dim():
        raise DimensionError(f"softmax: axis {axis} invalid for shape {tuple(x.shape)}")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = shifted.exp()
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    if x.shape[-1] != gain.shape[-1] or gain.shape != bias.shape:
        raise DimensionError(
            f"layer_norm: last dim of {tuple(x.shape)} vs gain {tuple(gain.shape)} / bias {tuple(bias.shape)}"
        )
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


def conv1d(x: torch.Tensor, kernel: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Same-length temporal convolution.

    ``x`` is ``[..., L, D]`` and ``kernel`` is ``[w, D, D_out]`` with odd ``w``;
    the sequence is zero padded by ``w // 2`` on both sides.
    """
    w, d_in, d_out = kernel.shape
    if w % 2 == 0:
        raise ConfigError(f"conv1d: kernel width must be odd, got {w}")
    if x.shape[-1] != d_in:
        raise DimensionError(f"conv1d: input {tuple(x.shape)} vs kernel {tuple(kernel.shape)}")
    lead = x.shape[:-2]
    length = x.shape[-2]
    xb = x.reshape(-1, length, d_in).transpose(1, 2)  # [B, D, L]
    weight = kernel.permute(2, 1, 0)  # [D_out, D, w]
    out = F.conv1d(xb, weight, bias, padding=w // 2)
    return out.transpose(1, 2).reshape(*lead, length, d_out)


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
    heads: int = 4,
    proj: Optional["MultiHeadAttention"] = None,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product attention.

    ``mask`` is boolean ``[Lq, Lk]`` (or broadcastable with leading batch
    dims) where True marks an allowed key.  When ``proj`` is given, its
    input/output projections are applied; otherwise the raw ``q, k, v`` are
    split into heads directly.
    """
    d = q.shape[-1]
    if d % heads != 0:
        raise ConfigError(f"attention: model dim {d} not divisible by {heads} heads")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: key {tuple(k.shape)} and value {tuple(v.shape)} lengths differ")
    if mask is not None:
        if not bool(mask.any(dim=-1).all()):
            raise ContractError("attention: a query row has every key masked")
    if proj is not None:
        q, k, v = proj.wq(q), proj.wk(k), proj.wv(v)
    dh = d // heads
    lq, lk = q.shape[-2], k.shape[-2]
    lead = q.shape[:-2]

    def split(t, n):
        return t.reshape(*t.shape[:-2], n, heads, dh).transpose(-3, -2)  # [..., H, n, dh]

    qh, kh, vh = split(q, lq), split(k, lk), split(v, lk)
    scores = (qh @ kh.transpose(-1, -2)) / math.sqrt(dh)
    if mask is not None:
        m = mask.unsqueeze(-3) if mask.dim() >= 2 else mask
        scores = scores.masked_fill(~m, float("-inf"))
    weights = softmax(scores, axis=-1)
    out = (weights @ vh).transpose(-3, -2).reshape(*lead, lq, d)
    if proj is not None:
        out = proj.wo(out)
    if return_weights:
        return out, weights
    return out


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not connected to any parameter")
    loss.reshape(()).backward()


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.wo = nn.Linear(dim, dim)

    def forward(self, q, k, v, mask=None, return_weights=False):
        return attention(q, k, v, mask=mask, heads=self.heads, proj=self, return_weights=return_weights)


class MLP(nn.Module):
    """Stack of linear layers with ReLU between them (none after the last)."""

    def __init__(self, dims: Sequence[int]):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    @property
    def output_layer(self) -> nn.Linear:
        return self.layers[-1]

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class Conv1d(nn.Module):
    def __init__(self, dim_in: int, dim_out: int, width: int = 3):
        super().__init__()
        if width % 2 == 0:
            raise ConfigError(f"kernel width must be odd, got {width}")
        self.kernel = nn.Parameter(torch.randn(width, dim_in, dim_out) / math.sqrt(width * dim_in))
        self.bias = nn.Parameter(torch.zeros(dim_out))

    def forward(self, x):
        return conv1d(x, self.kernel, self.bias)


def sinusoidal_encoding(length: int, dim: int, dtype=DTYPE) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe.to(dtype)


# --- finite differences -----------------------------------------------------

@torch.no_grad()
def finite_difference_grad(fn: Callable[[], torch.Tensor], x: torch.Tensor, step: float = 1e-3,
                           indices: Optional[Iterable[int]] = None) -> torch.Tensor:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``x`` (modified in place, then restored)."""
    flat = x.data.view(-1)
    grad = torch.zeros_like(flat)
    idx = range(flat.numel()) if indices is None else indices
    for i in idx:
        orig = flat[i].item()
        flat[i] = orig + step
        fp = float(fn())
        flat[i] = orig - step
        fm = float(fn())
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * step)
    return grad.view_as(x)


@torch.no_grad()
def directional_derivative(fn: Callable[[], torch.Tensor], x: torch.Tensor, direction: torch.Tensor,
                           step: float = 1e-3) -> float:
    orig = x.data.clone()
    x.data.add_(direction, alpha=step)
    fp = float(fn())
    x.data.copy_(orig).add_(direction, alpha=-step)
    fm = float(fn())
    x.data.copy_(orig)
    return (fp - fm) / (2 * step)


def grad_close(analytic: torch.Tensor, numeric: torch.Tensor, rtol: float) -> bool:
    return bool(((analytic - numeric).abs() <= rtol * (1 + numeric.abs())).all())
