"""Cross-stream conditioning, token pooling, low-rank bilinear coupling, fusion MoE, loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import InvalidLabel, ShapeMismatch
from . import core
from .layers import AttnPool, FFN, Linear, fan_in_uniform, switch_aux_loss, top1_dispatch


def cross_condition(Y, H, Wq_r, Wk_v, Wq_v, Wk_r, radius: int = 6, return_weights: bool = False):
    """Each stream attends to the other's raw features within ``±radius`` frames.

    ``Y*_t = sum_τ softmax_τ(Y_t Wq_r · H_τ Wk_v / sqrt C) H_τ`` and symmetrically for ``H*``.
    """
    if Y.shape != H.shape:
        raise ShapeMismatch(f"cross_condition: {tuple(Y.shape)} vs {tuple(H.shape)}")
    Ys, a = core.windowed_attention(core.pw_linear(Y, Wq_r), core.pw_linear(H, Wk_v), H, radius, True)
    Hs, b = core.windowed_attention(core.pw_linear(H, Wq_v), core.pw_linear(Y, Wk_r), Y, radius, True)
    return (Ys, Hs, a, b) if return_weights else (Ys, Hs)


class CrossCondition(nn.Module):
    def __init__(self, c: int, radius: int = 6):
        super().__init__()
        self.radius = radius
        self.Wq_r = nn.Parameter(fan_in_uniform((c, c), c))
        self.Wk_v = nn.Parameter(fan_in_uniform((c, c), c))
        self.Wq_v = nn.Parameter(fan_in_uniform((c, c), c))
        self.Wk_r = nn.Parameter(fan_in_uniform((c, c), c))

    def forward(self, Y, H):
        return cross_condition(Y, H, self.Wq_r, self.Wk_v, self.Wq_v, self.Wk_r, self.radius)


def low_rank_bilinear(m, i, U, V, Dk, W_o):
    """``z = SiLU(sum_k D_k (Uᵀm * Vᵀi)) W_o``; bias-free, so z = 0 when m = 0 or i = 0.

    U, V: (C, d); Dk: (K, d) diagonal gates; W_o: (d, C).
    """
    p = core.pw_linear(m, U) * core.pw_linear(i, V)
    return core.pw_linear(core.silu((p.unsqueeze(-2) * Dk).sum(-2)), W_o)


class LowRankBilinear(nn.Module):
    def __init__(self, c: int, d: int = 32, k: int = 4):
        super().__init__()
        self.U = nn.Parameter(fan_in_uniform((c, d), c))
        self.V = nn.Parameter(fan_in_uniform((c, d), c))
        self.Dk = nn.Parameter(torch.ones(k, d) / k + 0.1 * fan_in_uniform((k, d), 1))
        self.W_o = nn.Parameter(fan_in_uniform((d, c), d))

    def forward(self, m, i):
        return low_rank_bilinear(m, i, self.U, self.V, self.Dk, self.W_o)


class FusionMoE(nn.Module):
    """Per-window top-1 expert on z, routed by an MLP over [m, i, z]; residual on z."""

    def __init__(self, c: int, experts: int = 4):
        super().__init__()
        self.r1 = Linear(3 * c, c)
        self.r2 = Linear(c, experts)
        self.experts = nn.ModuleList([FFN(c, 2 * c) for _ in range(experts)])

    def forward(self, m, i, z, router_logits: torch.Tensor | None = None):
        logits = self.r2(core.silu(self.r1(torch.cat([m, i, z], dim=-1)))) if router_logits is None else router_logits
        probs = torch.softmax(logits, dim=-1)
        out = torch.stack([e(z) for e in self.experts], dim=-2)
        mixed, choice = top1_dispatch(probs, out)
        return {"token": z + mixed, "aux_loss": switch_aux_loss(probs, choice), "expert_id": choice}


@dataclass
class LossConfig:
    lambda_lb: float = 0.01
    lambda_orth: float = 1e-4
    gamma_min: float = 0.1


def weighted_bce(logits, labels, weights, gamma_min: float = 0.1):
    labels = torch.as_tensor(labels, dtype=logits.dtype)
    if not torch.all((labels == 0) | (labels == 1)):
        raise InvalidLabel("labels must be 0 or 1")
    w = torch.clamp(torch.as_tensor(weights, dtype=logits.dtype), min=gamma_min)
    # stable form: max(x,0) - x*y + log(1 + exp(-|x|))
    bce = F.binary_cross_entropy_with_logits(logits, labels, reduction="none")
    return (w * bce).sum() / w.sum()


def orth_penalty(*mats):
    total = 0
    for M in mats:
        G = M.transpose(-1, -2) @ M
        total = total + ((G - torch.eye(G.shape[-1], dtype=G.dtype)) ** 2).sum()
    return total


def total_loss(logits, labels, weights, aux_losses=(), U=None, V=None, cfg: LossConfig | None = None):
    cfg = cfg or LossConfig()
    if logits.shape[0] != len(labels) or len(labels) != len(weights):
        raise ShapeMismatch("logits, labels and weights differ in length")
    loss = weighted_bce(logits, labels, weights, cfg.gamma_min)
    for a in aux_losses:
        loss = loss + cfg.lambda_lb * a
    mats = [M for M in (U, V) if M is not None]
    if mats:
        loss = loss + cfg.lambda_orth * orth_penalty(*mats)
    return loss


class TokenPool(nn.Module):
    """Distinct single-query pools for the motion and impact streams."""

    def __init__(self, c: int):
        super().__init__()
        self.motion = AttnPool(c)
        self.impact = AttnPool(c, out_proj=True)

    def forward(self, Ys, Hs):
        return self.motion(Ys), self.impact(Hs)
