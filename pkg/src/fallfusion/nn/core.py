"""Shape-checked tensor operations on top of torch autograd.

All ops accept arbitrary leading batch dimensions: sequences are ``(..., T, C)``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import torch
import torch.nn.functional as F

from ..errors import NumericFault, ShapeMismatch


def _check(cond: bool, msg: str):
    if not cond:
        raise ShapeMismatch(msg)


def check_finite(x: torch.Tensor, where: str = "") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericFault(f"non-finite values in {where or 'tensor'}")
    return x


# ---------------------------------------------------------------- MAC accounting

class MacCounter:
    def __init__(self):
        self.total = 0


_COUNTERS: list = []


def add_macs(n: int):
    for c in _COUNTERS:
        c.total += int(n)


@contextmanager
def count_macs():
    """Counts multiply-accumulates of every op executed inside the block, from tensor shapes."""
    c = MacCounter()
    _COUNTERS.append(c)
    try:
        yield c
    finally:
        _COUNTERS.remove(c)


# ---------------------------------------------------------------- activations

def silu(x):
    return F.silu(x)


def sigmoid(x):
    return torch.sigmoid(x)


def tanh(x):
    return torch.tanh(x)


def softmax(x, axis: int = -1):
    return torch.softmax(x, dim=axis)


# ---------------------------------------------------------------- linear maps

def pw_linear(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """Affine map along the channel axis; ``W`` is ``(Cin, Cout)``."""
    _check(W.dim() == 2 and x.shape[-1] == W.shape[0], f"pw_linear: x {tuple(x.shape)} vs W {tuple(W.shape)}")
    y = x @ W
    if _COUNTERS:
        add_macs(x.numel() // W.shape[0] * W.shape[0] * W.shape[1])
    if b is not None:
        _check(b.shape == (W.shape[1],), f"pw_linear: bias {tuple(b.shape)}")
        y = y + b
    return y


def dw_conv1d(x: torch.Tensor, kernel: torch.Tensor, dilation: int = 1, stride: int = 1,
              padding_mode: str = "same") -> torch.Tensor:
    """Depthwise convolution over time. ``x`` is ``(..., T, C)``, ``kernel`` is ``(C, k)``.

    Output length is ``ceil(T / stride)``; ``causal`` pads only the past.
    """
    _check(kernel.dim() == 2 and x.shape[-1] == kernel.shape[0],
           f"dw_conv1d: x {tuple(x.shape)} vs kernel {tuple(kernel.shape)}")
    _check(stride in (1, 2), f"dw_conv1d: stride {stride}")
    C, k = kernel.shape
    span = dilation * (k - 1)
    if padding_mode == "same":
        _check(k % 2 == 1, "dw_conv1d: same padding needs an odd kernel")
        pad = (span // 2, span // 2)
    elif padding_mode == "causal":
        pad = (span, 0)
    else:
        raise ValueError(f"padding_mode {padding_mode!r}")
    T = x.shape[-2]
    t_out = -(-T // stride)
    xp = F.pad(x, (0, 0, *pad))
    # y[t] = sum_j kernel[:, j] * x[t*stride + j*d - pad_left], summed tap by tap
    if _COUNTERS:
        add_macs(x.numel() // (T * C) * t_out * C * k)
    y = 0
    for j in range(k):
        s0 = j * dilation
        y = y + xp[..., s0:s0 + stride * (t_out - 1) + 1:stride, :] * kernel[:, k - 1 - j]
    return y


def layer_norm(x: torch.Tensor, gain: torch.Tensor | None = None, bias: torch.Tensor | None = None,
               eps: float = 1e-5) -> torch.Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


# ---------------------------------------------------------------- attention

def attention(q: torch.Tensor, K: torch.Tensor, Vv: torch.Tensor, mask: torch.Tensor | None = None,
              return_weights: bool = False):
    """``softmax(q Kᵀ / sqrt(C) + mask) Vv``; rows with no allowed key return zeros.

    ``mask`` is boolean (True = attend) broadcastable to ``(..., Tq, Tk)``.
    """
    _check(q.shape[-1] == K.shape[-1], f"attention: q {tuple(q.shape)} vs K {tuple(K.shape)}")
    _check(K.shape[-2] == Vv.shape[-2], f"attention: K {tuple(K.shape)} vs V {tuple(Vv.shape)}")
    logits = q @ K.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if _COUNTERS:
        add_macs(2 * logits.numel() * q.shape[-1])
    if mask is not None:
        _check(mask.shape[-1] == K.shape[-2], "attention: mask key length")
        mask = mask.to(torch.bool)
        logits = logits.masked_fill(~mask, torch.finfo(logits.dtype).min / 2)
        w = torch.softmax(logits, dim=-1) * mask
        w = w * mask.any(dim=-1, keepdim=True)
    else:
        w = torch.softmax(logits, dim=-1)
    out = w @ Vv
    return (out, w) if return_weights else out


def window_mask(T: int, radius: int, device=None) -> torch.Tensor:
    """``(T, 2r+1)`` validity of each offset in ``[-r, r]`` around each position."""
    idx = torch.arange(T, device=device)[:, None] + torch.arange(-radius, radius + 1, device=device)[None, :]
    return (idx >= 0) & (idx < T)


def _shift(x: torch.Tensor, o: int) -> torch.Tensor:
    """``y[t] = x[t + o]`` along dim -2, zero outside the sequence."""
    if o == 0:
        return x
    T = x.shape[-2]
    if abs(o) >= T:
        return torch.zeros_like(x)
    if o > 0:
        return F.pad(x[..., o:, :], (0, 0, 0, o))
    return F.pad(x[..., :T + o, :], (0, 0, -o, 0))


def windowed_attention(q: torch.Tensor, K: torch.Tensor, Vv: torch.Tensor, radius: int,
                       return_weights: bool = False):
    """Each position attends to keys within ``±radius``; cost is linear in T.

    Weights come back as ``(..., T, 2r+1)`` indexed by offset ``-r..r``.
    """
    _check(q.shape[:-1] == K.shape[:-1] and K.shape[:-1] == Vv.shape[:-1],
           f"windowed_attention: {tuple(q.shape)}, {tuple(K.shape)}, {tuple(Vv.shape)}")
    T = q.shape[-2]
    scale = 1.0 / math.sqrt(q.shape[-1])
    offsets = range(-radius, radius + 1)
    if _COUNTERS:
        add_macs(2 * q.numel() * len(offsets))
    logits = torch.stack([(q * _shift(K, o)).sum(-1) for o in offsets], dim=-1) * scale
    mask = window_mask(T, radius, q.device)
    logits = logits.masked_fill(~mask, torch.finfo(logits.dtype).min / 2)
    w = torch.softmax(logits, dim=-1) * mask
    out = 0
    for j, o in enumerate(offsets):
        out = out + w[..., j:j + 1] * _shift(Vv, o)
    return (out, w) if return_weights else out


def dense_window_mask(T: int, radius: int) -> torch.Tensor:
    """Full ``(T, T)`` band mask; used by oracles and analysis, not the model."""
    i = torch.arange(T)
    return (i[:, None] - i[None, :]).abs() <= radius


# ---------------------------------------------------------------- autograd helpers

def backward(loss: torch.Tensor, params=None):
    """Reverse-mode pass; unused parameters end with zero (not missing) gradients."""
    if loss.dim() != 0 and loss.numel() != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    check_finite(loss.detach(), "loss")
    loss.reshape(()).backward()
    for p in params or ():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
