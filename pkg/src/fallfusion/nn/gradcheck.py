"""Central finite-difference gradient checks in float64."""

from __future__ import annotations

import numpy as np
import torch


def numeric_grad(f, x: torch.Tensor, step: float = 1e-4, n_probe: int | None = None, rng=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (modified in place, then restored).

    With ``n_probe`` only a random subset of entries is probed; returns (indices, values).
    """
    flat = x.data.view(-1)
    idx = np.arange(flat.numel())
    if n_probe is not None and n_probe < idx.size:
        idx = np.sort((rng or np.random.default_rng(0)).choice(idx, n_probe, replace=False))
    out = np.empty(idx.size)
    with torch.no_grad():
        for j, i in enumerate(idx):
            orig = flat[i].item()
            flat[i] = orig + step
            fp = float(f())
            flat[i] = orig - step
            fm = float(f())
            flat[i] = orig
            out[j] = (fp - fm) / (2 * step)
    return idx, out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``max|a-n| / max(max|a|, max|n|, floor)``: a scale-aware error over the probed set."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(f, tensors: dict, step: float = 1e-4, n_probe: int | None = 24, seed: int = 0) -> dict:
    """Compare autograd with finite differences for each named float64 tensor; returns name -> rel error."""
    for t in tensors.values():
        if t.dtype != torch.float64:
            raise TypeError("gradient checks run in float64")
        t.grad = None
    loss = f()
    grads = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
    rng = np.random.default_rng(seed)
    errs = {}
    for (name, t), g in zip(tensors.items(), grads):
        g = torch.zeros_like(t) if g is None else g
        idx, num = numeric_grad(f, t, step, n_probe, rng)
        errs[name] = relative_error(g.detach().reshape(-1).numpy()[idx], num)
    return errs


def check_directional(f, tensors: dict, n_dirs: int = 4, step: float = 1e-5, seed: int = 0) -> float:
    """Worst relative error of ``<grad f, v>`` against central differences along random directions ``v``.

    Probing the whole gradient at once stays well above float64 resolution even when some
    entries (e.g. attention queries at init) are many orders below the loss scale.
    """
    params = list(tensors.values())
    if any(t.dtype != torch.float64 for t in params):
        raise TypeError("gradient checks run in float64")
    grads = torch.autograd.grad(f(), params, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g.detach() for t, g in zip(params, grads)]
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(t.shape, dtype=torch.float64, generator=gen) for t in params]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        with torch.no_grad():
            for t, d in zip(params, dirs):
                t.add_(step * d)
            fp = float(f())
            for t, d in zip(params, dirs):
                t.sub_(2 * step * d)
            fm = float(f())
            for t, d in zip(params, dirs):
                t.add_(step * d)
        worst = max(worst, relative_error(np.array([analytic]), np.array([(fp - fm) / (2 * step)])))
    return worst
