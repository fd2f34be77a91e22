"""Vibration-stream encoder: selective-kernel front end, gated linear recurrence with local
attention, covariance-based channel reweighting."""

from __future__ import annotations

import torch
from torch import nn

from ..errors import DegenerateInput
from . import core
from .layers import AttnPool, LayerNorm, Linear, WindowedSelfAttention, fan_in_uniform
from .motion import VIB_BRANCHES, LskStack


def glru_scan(v, W_h, U_h, W_g, U_g, W_a, b_a, h0=None, return_state: bool = False):
    """Gated linear recurrent unit over ``v`` (..., T, C); state stays in [-1, 1].

    g = σ(v W_g + h U_g), h̃ = tanh(v W_h + (g*h) U_h), α = σ(v W_a + b_a),
    h <- (1-α) h + α h̃.
    """
    xg = core.pw_linear(v, W_g)
    xh = core.pw_linear(v, W_h)
    alpha = torch.sigmoid(core.pw_linear(v, W_a, b_a))
    h = torch.zeros_like(xh[..., 0, :]) if h0 is None else h0
    hs = []
    for xg_t, xh_t, a in zip(xg.unbind(-2), xh.unbind(-2), alpha.unbind(-2)):
        g = torch.sigmoid(xg_t + h @ U_g)
        cand = torch.tanh(xh_t + (g * h) @ U_h)
        h = h + a * (cand - h)
        hs.append(h)
    H = torch.stack(hs, dim=-2)
    if core._COUNTERS:
        core.add_macs(2 * H.numel() * U_g.shape[0])
    return (H, h) if return_state else H


class GLRU(nn.Module):
    def __init__(self, c: int, alpha_bias: float = -2.0):
        super().__init__()
        self.W_h = nn.Parameter(fan_in_uniform((c, c), c))
        self.U_h = nn.Parameter(fan_in_uniform((c, c), c))
        self.W_g = nn.Parameter(fan_in_uniform((c, c), c))
        self.U_g = nn.Parameter(fan_in_uniform((c, c), c))
        self.W_a = nn.Parameter(fan_in_uniform((c, c), c))
        self.b_a = nn.Parameter(torch.full((c,), alpha_bias))

    def forward(self, v, h0=None, return_state: bool = False):
        return glru_scan(v, self.W_h, self.U_h, self.W_g, self.U_g, self.W_a, self.b_a, h0, return_state)


class GriffinBlock(nn.Module):
    def __init__(self, c: int, conv_kernel: int = 9, attn_window: int = 11):
        super().__init__()
        self.conv = nn.Parameter(fan_in_uniform((c, conv_kernel), conv_kernel))
        self.pw = Linear(c, c)
        self.glru = GLRU(c)
        self.norm = LayerNorm(c)
        self.proj = Linear(c, c)
        self.attn = WindowedSelfAttention(c, attn_window // 2)

    def forward(self, V):
        v = self.pw(core.dw_conv1d(V, self.conv))
        h = self.glru(v)
        x1 = V + self.proj(self.norm(h))
        return self.attn(x1)


# ---------------------------------------------------------------- channel reweighting

def _spectral_weights(lam: torch.Tensor, r: int, rel_tol: float) -> torch.Tensor:
    """Per-eigenvalue inclusion weights for a top-r selection (eigenvalues ascending).

    A cluster of (numerically) equal eigenvalues straddling the cut is included
    fractionally, which keeps the result independent of the basis chosen inside it.
    """
    n = lam.shape[-1]
    lam_d = lam.detach().reshape(-1, n)
    w = torch.zeros_like(lam_d)
    w[:, n - r:] = 1.0
    if r >= n:
        return w.reshape(lam.shape)
    tol = rel_tol * lam_d.abs().amax(-1).clamp_min(1e-300)
    tied = (lam_d[:, n - r] - lam_d[:, n - r - 1]) <= tol
    for b in torch.nonzero(tied).flatten().tolist():
        l, t = lam_d[b], float(tol[b])
        lo = hi = n - r
        while lo > 0 and float(l[lo] - l[lo - 1]) <= t:
            lo -= 1
        while hi < n - 1 and float(l[hi + 1] - l[hi]) <= t:
            hi += 1
        # cluster occupies ascending positions lo..hi; r - (n-1-hi) of its slots are inside the top r
        w[b, lo:hi + 1] = (r - (n - 1 - hi)) / (hi - lo + 1)
    return w.reshape(lam.shape)


class _LowRankDiag(torch.autograd.Function):
    """``diag(P Pᵀ)`` where ``P Pᵀ`` keeps the top-r spectral part of a symmetric matrix."""

    @staticmethod
    def forward(ctx, sigma, r: int, rel_tol: float):
        work = sigma.double()
        lam, V = torch.linalg.eigh(work)
        w = _spectral_weights(lam, r, rel_tol)
        d = ((V * V) * (w * lam).unsqueeze(-2)).sum(-1)
        ctx.save_for_backward(lam, V, w)
        ctx.rel_tol = rel_tol
        return d.to(sigma.dtype)

    @staticmethod
    def backward(ctx, g):
        lam, V, w = ctx.saved_tensors
        phi = w * lam
        dl = lam.unsqueeze(-1) - lam.unsqueeze(-2)
        dphi = phi.unsqueeze(-1) - phi.unsqueeze(-2)
        tol = ctx.rel_tol * lam.abs().amax(-1, keepdim=True).unsqueeze(-1).clamp_min(1e-300)
        close = dl.abs() <= tol
        # divided differences of the spectral map; inside a cluster the slope is the cluster weight
        wmat = 0.5 * (w.unsqueeze(-1) + w.unsqueeze(-2))
        Phi = torch.where(close, wmat, dphi / torch.where(close, torch.ones_like(dl), dl))
        M = V.transpose(-1, -2) @ (g.double().unsqueeze(-1) * V)
        grad = V @ (Phi * M) @ V.transpose(-1, -2)
        grad = 0.5 * (grad + grad.transpose(-1, -2))
        return grad.to(g.dtype), None, None


def low_rank_diag(sigma: torch.Tensor, r: int, rel_tol: float = 1e-9) -> torch.Tensor:
    return _LowRankDiag.apply(sigma, r, rel_tol)


def shrunk_covariance(H: torch.Tensor, eps_rel: float = 1e-3, eps_min: float = 1e-6):
    T = H.shape[-2]
    if T < 2:
        raise DegenerateInput("channel reweighting needs at least 2 frames")
    Hc = H - H.mean(dim=-2, keepdim=True)
    S = Hc.transpose(-1, -2) @ Hc / T
    eps = (eps_rel * torch.diagonal(S, dim1=-2, dim2=-1).mean(-1)).clamp_min(eps_min)
    eye = torch.eye(S.shape[-1], dtype=S.dtype)
    return S + eps[..., None, None] * eye, eps


def channel_reweight(H, W_1, b_1, W_2, b_2, rank: int = 8, eps_rel: float = 1e-3):
    """Returns (H̃, s): H scaled per channel by a gate computed from the low-rank covariance diagonal."""
    sigma, _ = shrunk_covariance(H, eps_rel)
    if core._COUNTERS:
        C = H.shape[-1]
        # covariance plus a nominal C^3 for the symmetric eigensolver
        core.add_macs(H.numel() // (H.shape[-2] * C) * (H.shape[-2] * C * C + C ** 3))
    d = low_rank_diag(sigma, rank)
    s = torch.sigmoid(core.pw_linear(core.silu(core.pw_linear(d, W_1, b_1)), W_2, b_2))
    return H * s.unsqueeze(-2), s


class ChannelReweight(nn.Module):
    def __init__(self, c: int, rank: int = 8, eps_rel: float = 1e-3):
        super().__init__()
        if not 1 <= rank <= c:
            raise ValueError("rank must lie in [1, C]")
        self.rank, self.eps_rel = rank, eps_rel
        self.fc1 = Linear(c, max(c // 4, 1))
        self.fc2 = Linear(max(c // 4, 1), c)

    def forward(self, H):
        return channel_reweight(H, self.fc1.W, self.fc1.b, self.fc2.W, self.fc2.b, self.rank, self.eps_rel)


class ImpactEncoder(nn.Module):
    """Vibration (..., 256, 3) -> reweighted features (..., 128, C)."""

    def __init__(self, c: int = 64, cin: int = 3, rank: int = 8, use_lsk: bool = True,
                 use_temporal: bool = True, use_reweight: bool = True):
        super().__init__()
        self.front = LskStack(cin, c, VIB_BRANCHES, use_lsk)
        self.griffin = GriffinBlock(c) if use_temporal else None
        self.reweight = ChannelReweight(c, rank) if use_reweight else None

    def forward(self, x):
        h = self.front(x)
        if self.griffin is not None:
            h = self.griffin(h)
        if self.reweight is not None:
            h, _ = self.reweight(h)
        return h


class ImpactToken(nn.Module):
    """Single-query pooling followed by a final linear projection."""

    def __init__(self, c: int):
        super().__init__()
        self.pool = AttnPool(c, out_proj=True)

    def forward(self, H, return_weights: bool = False):
        return self.pool(H, return_weights)
