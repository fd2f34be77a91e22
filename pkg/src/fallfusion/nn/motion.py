"""Radar-stream encoder: selective-kernel front end, gated SSM blocks, temporal Switch-MoE."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from . import core
from .layers import FFN, LayerNorm, Linear, WindowedSelfAttention, fan_in_uniform, switch_aux_loss, top1_dispatch

RADAR_BRANCHES = ((3, 1), (7, 2), (11, 3))
VIB_BRANCHES = ((3, 1), (5, 2), (7, 3))


@dataclass
class LskConfig:
    branches: tuple = RADAR_BRANCHES
    channels: int = 64
    stride: int = 1


@dataclass
class SsmConfig:
    d_state: int = 64
    expansion: int = 2
    conv_kernel: int = 5
    layers: int = 2


@dataclass
class MoeConfig:
    experts: int = 4
    top_k: int = 1
    window: int = 7


class LSK1D(nn.Module):
    """Parallel dilated depthwise branches, a shared pointwise map, softmax branch gating."""

    def __init__(self, cin: int, cout: int, branches=RADAR_BRANCHES, stride: int = 1):
        super().__init__()
        self.branches = tuple(branches)
        self.stride = stride
        self.kernels = nn.ParameterList([nn.Parameter(fan_in_uniform((cin, k), k)) for k, _ in self.branches])
        self.proj = Linear(cin, cout, bias=False)
        hidden = max(cout // 4, 1)
        self.gate1 = Linear(cin, hidden)
        self.gate2 = Linear(hidden, len(self.branches))

    def gate(self, x):
        return torch.softmax(self.gate2(core.silu(self.gate1(x.mean(dim=-2)))), dim=-1)

    def forward(self, x, gate_override: torch.Tensor | None = None):
        w = self.gate(x) if gate_override is None else gate_override.expand(*x.shape[:-2], len(self.branches))
        out = 0
        for b, ((_, d), ker) in enumerate(zip(self.branches, self.kernels)):
            y = self.proj(core.dw_conv1d(x, ker, dilation=d, stride=self.stride))
            out = out + w[..., b, None, None] * y
        return core.silu(out)


def ssm_scan(x, A, B, C, D, W_g, b_g, h0=None, return_state: bool = False):
    """Gated diagonal state-space recurrence.

    ``h_t = g_t*(A*h_{t-1}) + (1-g_t)*(x_t B)``, ``y_t = h_t C + D*x_t``, ``g_t = sigmoid(x_t W_g + b_g)``.
    Shapes: x (..., T, Cd), A (N,), B (Cd, N), C (N, Cd), D (Cd,), W_g (Cd, N), b_g (N,).
    """
    g = torch.sigmoid(core.pw_linear(x, W_g, b_g))
    a = g * A
    u = (1 - g) * core.pw_linear(x, B)
    h = torch.zeros_like(u[..., 0, :]) if h0 is None else h0
    hs = []
    # unbind once: per-step indexing would allocate a full-size gradient buffer per step
    for a_t, u_t in zip(a.unbind(-2), u.unbind(-2)):
        h = a_t * h + u_t
        hs.append(h)
    H = torch.stack(hs, dim=-2)
    if core._COUNTERS:
        core.add_macs(a.numel() + x.numel())
    y = core.pw_linear(H, C) + D * x
    return (y, h) if return_state else y


def ssm_step(x_t, state, A, B, C, D, W_g, b_g):
    """One streaming step of :func:`ssm_scan`: (x_t, h) -> (y_t, h)."""
    g = torch.sigmoid(core.pw_linear(x_t, W_g, b_g))
    h = g * (A * state) + (1 - g) * core.pw_linear(x_t, B)
    return core.pw_linear(h, C) + D * x_t, h


class SSM(nn.Module):
    def __init__(self, width: int, d_state: int = 64, generator=None):
        super().__init__()
        # sigmoid(raw) lands in [0.9, 0.999]
        a0 = torch.empty(d_state).uniform_(0.9, 0.999, generator=generator)
        self.A_raw = nn.Parameter(torch.log(a0 / (1 - a0)))
        self.B = nn.Parameter(fan_in_uniform((width, d_state), width))
        self.C = nn.Parameter(fan_in_uniform((d_state, width), d_state))
        self.D = nn.Parameter(torch.ones(width))
        self.W_g = nn.Parameter(fan_in_uniform((width, d_state), width))
        self.b_g = nn.Parameter(torch.zeros(d_state))

    @property
    def A(self):
        return torch.sigmoid(self.A_raw)

    def params(self):
        return self.A, self.B, self.C, self.D, self.W_g, self.b_g

    def forward(self, x, h0=None, return_state: bool = False):
        return ssm_scan(x, *self.params(), h0=h0, return_state=return_state)

    def step(self, x_t, state):
        return ssm_step(x_t, state, *self.params())


class Mamba2Block(nn.Module):
    """Pre-norm gated SSM block with causal depthwise conv and residual."""

    def __init__(self, c: int, cfg: SsmConfig | None = None):
        super().__init__()
        cfg = cfg or SsmConfig()
        w = cfg.expansion * c
        self.norm = LayerNorm(c)
        self.in_x = Linear(c, w, bias=False)
        self.in_z = Linear(c, w, bias=False)
        self.conv = nn.Parameter(fan_in_uniform((w, cfg.conv_kernel), cfg.conv_kernel))
        self.ssm = SSM(w, cfg.d_state)
        self.out = Linear(w, c, bias=False)

    def forward(self, x):
        u = self.norm(x)
        v = core.silu(core.dw_conv1d(self.in_x(u), self.conv, padding_mode="causal"))
        y = self.ssm(v) * torch.sigmoid(self.in_z(u))
        return x + self.out(y)


class SwitchMoETemporal(nn.Module):
    """Windowed self-attention, then per-step top-1 expert FFN with residual."""

    def __init__(self, c: int, cfg: MoeConfig | None = None):
        super().__init__()
        cfg = cfg or MoeConfig()
        if cfg.experts < 2 or cfg.top_k != 1:
            raise ValueError("switch routing needs >= 2 experts and top_k = 1")
        self.attn = WindowedSelfAttention(c, cfg.window // 2)
        self.router = Linear(c, cfg.experts)
        self.experts = nn.ModuleList([FFN(c, 2 * c) for _ in range(cfg.experts)])

    def forward(self, x, router_logits: torch.Tensor | None = None):
        x1 = self.attn(x)
        logits = self.router(x1) if router_logits is None else router_logits
        probs = torch.softmax(logits, dim=-1)
        out = torch.stack([e(x1) for e in self.experts], dim=-2)
        mixed, choice = top1_dispatch(probs, out)
        counts = torch.bincount(choice.reshape(-1), minlength=probs.shape[-1])
        return {"y": x1 + mixed, "aux_loss": switch_aux_loss(probs, choice), "expert_counts": counts}


class MotionEncoder(nn.Module):
    """Radar φ sequence (..., 256, 5) -> features (..., 128, C) plus routing aux loss."""

    def __init__(self, c: int = 64, cin: int = 5, ssm: SsmConfig | None = None, moe: MoeConfig | None = None,
                 use_lsk: bool = True, use_temporal: bool = True, use_moe: bool = True):
        super().__init__()
        ssm = ssm or SsmConfig()
        self.front = LskStack(cin, c, RADAR_BRANCHES, use_lsk)
        self.blocks = nn.ModuleList([Mamba2Block(c, ssm) for _ in range(ssm.layers)]) if use_temporal else None
        self.moe = SwitchMoETemporal(c, moe) if use_moe else None

    def forward(self, x):
        h = self.front(x)
        for blk in self.blocks or ():
            h = blk(h)
        if self.moe is None:
            return h, h.new_zeros(()), None
        r = self.moe(h)
        return r["y"], r["aux_loss"], r["expert_counts"]


class LskStack(nn.Module):
    """Two selective-kernel blocks (the second with stride 2), or a pointwise/mean-pool stand-in."""

    def __init__(self, cin: int, c: int, branches, enabled: bool = True):
        super().__init__()
        self.enabled = enabled
        if enabled:
            self.b1 = LSK1D(cin, c, branches, stride=1)
            self.b2 = LSK1D(c, c, branches, stride=2)
        else:
            self.proj = Linear(cin, c)

    def forward(self, x):
        if self.enabled:
            return self.b2(self.b1(x))
        h = core.silu(self.proj(x))
        if h.shape[-2] % 2:
            h = torch.cat([h, h[..., -1:, :]], dim=-2)
        return 0.5 * (h[..., 0::2, :] + h[..., 1::2, :])
