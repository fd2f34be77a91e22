"""Small parameterized building blocks shared by both encoders and the fusion head."""

from __future__ import annotations

import math

import torch
from torch import nn

from . import core


def fan_in_uniform(shape, fan_in: int, generator=None) -> torch.Tensor:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return (torch.rand(shape, generator=generator) * 2 - 1) * bound


class Linear(nn.Module):
    """``y = x W + b`` with ``W`` stored as ``(Cin, Cout)``."""

    def __init__(self, cin: int, cout: int, bias: bool = True):
        super().__init__()
        self.W = nn.Parameter(fan_in_uniform((cin, cout), cin))
        self.b = nn.Parameter(fan_in_uniform((cout,), cin)) if bias else None

    def forward(self, x):
        return core.pw_linear(x, self.W, self.b)


class LayerNorm(nn.Module):
    def __init__(self, c: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(c))
        self.bias = nn.Parameter(torch.zeros(c))
        self.eps = eps

    def forward(self, x):
        return core.layer_norm(x, self.gain, self.bias, self.eps)


class AttnPool(nn.Module):
    """Single learned query over time; returns a convex combination of value projections."""

    def __init__(self, c: int, out_proj: bool = False):
        super().__init__()
        self.q = nn.Parameter(fan_in_uniform((c,), c))
        self.key = Linear(c, c, bias=False)
        self.value = Linear(c, c, bias=False)
        self.out = Linear(c, c) if out_proj else None

    def forward(self, x, return_weights: bool = False):
        q = self.q.expand(*x.shape[:-2], 1, x.shape[-1])
        tok, w = core.attention(q, self.key(x), self.value(x), return_weights=True)
        tok = tok.squeeze(-2)
        if self.out is not None:
            tok = self.out(tok)
        return (tok, w.squeeze(-2)) if return_weights else tok


class WindowedSelfAttention(nn.Module):
    """Single-head self-attention restricted to a centered window, with residual."""

    def __init__(self, c: int, radius: int):
        super().__init__()
        self.radius = radius
        self.q = Linear(c, c, bias=False)
        self.k = Linear(c, c, bias=False)
        self.v = Linear(c, c, bias=False)

    def forward(self, x):
        return x + core.windowed_attention(self.q(x), self.k(x), self.v(x), self.radius)


class FFN(nn.Module):
    def __init__(self, c: int, hidden: int):
        super().__init__()
        self.fc1 = Linear(c, hidden)
        self.fc2 = Linear(hidden, c)

    def forward(self, x):
        return self.fc2(core.silu(self.fc1(x)))

    def zero_(self):
        with torch.no_grad():
            self.fc2.W.zero_()
            self.fc2.b.zero_()
        return self


def switch_aux_loss(probs: torch.Tensor, choice: torch.Tensor) -> torch.Tensor:
    """``E * sum_e f_e * pbar_e`` over all routed items (leading dims flattened)."""
    E = probs.shape[-1]
    p = probs.reshape(-1, E)
    f = torch.nn.functional.one_hot(choice.reshape(-1), E).to(p.dtype).mean(0)
    return E * (f * p.mean(0)).sum()


def top1_dispatch(probs: torch.Tensor, expert_out: torch.Tensor):
    """Select each item's argmax expert (lowest index on ties) scaled by its probability.

    ``expert_out`` is ``(..., E, C)``; returns (output, choice).
    """
    choice = probs.argmax(dim=-1)
    onehot = torch.nn.functional.one_hot(choice, probs.shape[-1]).to(probs.dtype)
    gate = (probs * onehot).unsqueeze(-1)
    return (gate * expert_out).sum(dim=-2), choice
