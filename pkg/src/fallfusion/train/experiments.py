"""Ablation matrix, robustness table and latency benchmark."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from ..data.windows import L, perturb_windows
from ..nn import core
from ..nn.model import AblationSpec, FallFusionNet, ModelConfig, build_model, count_params
from ..signal.pipeline import PreprocessConfig, prepare_window
from .metrics import MetricsReport, compute_metrics
from .trainer import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

SEEDS = (1, 2, 3)
SUMMARY_KEYS = ("accuracy", "balanced_accuracy", "macro_f1", "fall_precision", "fall_recall", "auc")


@dataclass
class AblationResult:
    name: str
    spec: AblationSpec
    per_seed: dict = field(default_factory=dict)     # seed -> MetricsReport
    seconds: float = 0.0

    def mean(self) -> dict:
        out = {}
        for k in SUMMARY_KEYS:
            vals = [getattr(r, k) for r in self.per_seed.values() if getattr(r, k) is not None]
            out[k] = float(np.mean(vals)) if vals else None
            out[k + "_std"] = float(np.std(vals)) if vals else None
        return out

    def to_dict(self) -> dict:
        return {"name": self.name, "spec": self.spec.to_dict(), "mean": self.mean(), "seconds": self.seconds,
                "per_seed": {str(s): r.to_dict() for s, r in self.per_seed.items()}}


def run_ablation(spec: AblationSpec, train_set, val_set, test_set, cfg: TrainConfig | None = None,
                 seeds=SEEDS, model_cfg: ModelConfig | None = None, name: str = "") -> AblationResult:
    """Trains the variant once per seed with an otherwise identical schedule and scores the test split."""
    spec.validate()
    cfg = cfg or TrainConfig()
    res = AblationResult(name or "variant", spec)
    t0 = time.perf_counter()
    for seed in seeds:
        model = build_model(spec, model_cfg, seed=seed)
        train(model, train_set, val_set, replace(cfg, seed=seed))
        res.per_seed[seed] = evaluate(model, test_set, cfg)["report"]
        log.info("%s seed %d macro F1 %.2f", res.name, seed, res.per_seed[seed].macro_f1)
    res.seconds = time.perf_counter() - t0
    return res


ROBUSTNESS_CONDITIONS = (
    ("clean", None, 0.0),
    ("time_shift_150ms", "time_shift_ms", 150.0),
    ("radar_dropout_30", "radar_dropout_frac", 0.3),
    ("vibration_dropout_30", "vib_dropout_frac", 0.3),
)


def robustness_suite(model: FallFusionNet, test_set, rng_seed: int = 0, conditions=ROBUSTNESS_CONDITIONS) -> list:
    """Rows of (condition, MetricsReport) with perturbations applied to the test windows."""
    rows = []
    for name, kind, mag in conditions:
        data = test_set if kind is None else perturb_windows(test_set, kind, mag, rng_seed)
        rows.append((name, evaluate(model, data)["report"]))
    return rows


def count_model_macs(model: FallFusionNet, length: int = L) -> int:
    """Multiply-accumulates of one window's forward pass, counted from the executed op shapes."""
    model.eval()
    with torch.no_grad(), core.count_macs() as c:
        model(torch.zeros(1, length, 3), torch.zeros(1, length, 5))
    total = c.total
    if getattr(model, "cnn", None) is not None:
        # the early-concat baseline runs torch convolutions, which bypass the counter
        t = length
        for conv in model.cnn:
            t = (t + 2 * conv.padding[0] - conv.kernel_size[0]) // conv.stride[0] + 1
            total += t * conv.in_channels * conv.out_channels * conv.kernel_size[0]
    return int(total)


def _stats(x) -> dict:
    x = np.asarray(x)
    return {"median": float(np.median(x)), "p95": float(np.percentile(x, 95)), "mean": float(x.mean())}


def latency_bench(model: FallFusionNet, n_windows: int, windows, pre_cfg: PreprocessConfig | None = None,
                  warmup: int = 5) -> dict:
    """Per-window wall-clock cost of gateway preprocessing and single-window inference.

    ``windows`` yields ``(vib_raw (256,3), phi (256,5))`` pairs; they are cycled to reach ``n_windows``.
    """
    if n_windows < 50:
        raise ValueError("latency_bench needs at least 50 windows")
    torch.set_num_threads(1)
    windows = list(windows)
    model.eval()
    pre, inf = [], []
    with torch.no_grad():
        for k in range(n_windows + warmup):
            vib_raw, phi = windows[k % len(windows)]
            t0 = time.perf_counter()
            pw = prepare_window(vib_raw, phi, pre_cfg)
            t1 = time.perf_counter()
            model(torch.from_numpy(pw.vib[None].astype(np.float32)), torch.from_numpy(pw.radar[None].astype(np.float32)))
            t2 = time.perf_counter()
            if k >= warmup:
                pre.append(1e3 * (t1 - t0))
                inf.append(1e3 * (t2 - t1))
    end = np.add(pre, inf)
    return {"n_windows": n_windows, "pre_ms": _stats(pre), "inf_ms": _stats(inf), "end_ms": _stats(end),
            "macs": count_model_macs(model), "params": count_params(model)}
