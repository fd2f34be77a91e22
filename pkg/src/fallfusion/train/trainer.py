"""Training loop: weighted BCE + routing/orthogonality terms, AdamW with cosine decay."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..data.windows import AugmentConfig, augment
from ..errors import DivergenceError, InsufficientData
from ..nn.checkpoint import save_checkpoint
from ..nn.fusion import LossConfig, total_loss
from ..nn.model import FallFusionNet
from ..signal.features import NormStats
from .metrics import compute_metrics

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    lambda_lb: float = 0.01
    lambda_orth: float = 1e-4
    gamma_min: float = 0.1
    augment: bool = True
    p_noise: float = 0.5
    p_stretch: float = 0.5
    p_notch: float = 0.3
    vib_drop_prob: float = 0.1       # whole-window vibration dropout during training
    radar_drop_prob: float = 0.1     # chance a window gets radar slice dropout
    radar_drop_frac: float = 0.3
    grad_clip: float = 1.0
    max_minutes: float | None = None
    num_threads: int = 1

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lambda_lb, self.lambda_orth, self.gamma_min)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.p_noise, self.p_stretch, self.p_notch)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainResult:
    model: FallFusionNet
    history: list = field(default_factory=list)
    best_epoch: int = -1
    checkpoint: Path | None = None
    seconds: float = 0.0


def stack_windows(records):
    vib = np.stack([r.vib for r in records]).astype(np.float32)
    radar = np.stack([r.radar for r in records]).astype(np.float32)
    labels = np.array([r.label for r in records], dtype=np.float32)
    weights = np.array([r.weight for r in records], dtype=np.float32)
    return vib, radar, labels, weights


def fit_normalization(model: FallFusionNet, records):
    vib_stats = NormStats.fit([r.vib for r in records])
    radar_stats = NormStats.fit([r.radar for r in records])
    model.set_normalization(vib_stats, radar_stats)
    return vib_stats, radar_stats


def model_loss(model: FallFusionNet, out: dict, labels, weights, cfg: LossConfig):
    U, V = model.bilinear_factors()
    if "branch_logits" in out:
        # late fusion: every branch is trained as a detector in its own right
        parts = [total_loss(l, labels, weights, out["aux"], U, V, cfg) for l in out["branch_logits"]]
        return sum(parts) / len(parts)
    return total_loss(out["logits"], labels, weights, out["aux"], U, V, cfg)


def _training_batch(records, idx, epoch: int, cfg: TrainConfig):
    aug_cfg = cfg.augment_config()
    vib, radar = [], []
    for i in idx:
        w = records[i]
        rng = np.random.default_rng([cfg.seed, epoch, int(i)])
        if cfg.augment:
            w = augment(w, rng.integers(2**63), aug_cfg)
        v, r = w.vib, w.radar
        if cfg.augment and rng.random() < cfg.vib_drop_prob:
            v = np.zeros_like(v)
        if cfg.augment and rng.random() < cfg.radar_drop_prob:
            r = r * (rng.random(r.shape[0]) >= cfg.radar_drop_frac)[:, None]
        vib.append(v)
        radar.append(r)
    labels = np.array([records[i].label for i in idx], dtype=np.float32)
    weights = np.array([records[i].weight for i in idx], dtype=np.float32)
    return (torch.from_numpy(np.stack(vib).astype(np.float32)), torch.from_numpy(np.stack(radar).astype(np.float32)),
            torch.from_numpy(labels), torch.from_numpy(weights))


@torch.no_grad()
def evaluate(model: FallFusionNet, records, cfg: TrainConfig | None = None, batch_size: int = 128) -> dict:
    cfg = cfg or TrainConfig()
    model.eval()
    vib, radar, labels, weights = stack_windows(records)
    losses, probs, n = 0.0, [], 0
    for s in range(0, len(records), batch_size):
        sl = slice(s, s + batch_size)
        out = model(torch.from_numpy(vib[sl]), torch.from_numpy(radar[sl]))
        lt = model_loss(model, out, torch.from_numpy(labels[sl]), torch.from_numpy(weights[sl]), cfg.loss_config())
        losses += float(lt) * len(labels[sl])
        n += len(labels[sl])
        probs.append(torch.sigmoid(out["logits"]).double().numpy())
    probs = np.concatenate(probs) if probs else np.zeros(0)
    rep = compute_metrics(probs, labels.astype(int), [r.scenario for r in records])
    return {"loss": losses / max(n, 1), "probs": probs, "report": rep}


def train(model: FallFusionNet, train_records, val_records=None, cfg: TrainConfig | None = None,
          out_dir=None) -> TrainResult:
    """Optimizes ``model`` in place; the best validation epoch (macro F1, then loss) is restored at the end."""
    cfg = cfg or TrainConfig()
    if not train_records:
        raise InsufficientData("empty training split")
    torch.set_num_threads(cfg.num_threads)
    torch.manual_seed(cfg.seed)
    fit_normalization(model, train_records)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
    n = len(train_records)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, total_steps) / total_steps)))
    rng = np.random.default_rng(cfg.seed)
    loss_cfg = cfg.loss_config()

    result = TrainResult(model)
    best_key, best_state = None, None
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(n)
        run = 0.0
        for s in range(0, n, cfg.batch_size):
            vib, radar, labels, weights = _training_batch(train_records, order[s:s + cfg.batch_size], epoch, cfg)
            out = model(vib, radar)
            loss = model_loss(model, out, labels, weights, loss_cfg)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {s // cfg.batch_size}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            sched.step()
            run += float(loss.detach()) * len(labels)
        entry = {"epoch": epoch, "train_loss": run / n, "lr": sched.get_last_lr()[0],
                 "elapsed_s": time.perf_counter() - t0}
        if val_records:
            ev = evaluate(model, val_records, cfg)
            entry.update(val_loss=ev["loss"], val_macro_f1=ev["report"].macro_f1, val_accuracy=ev["report"].accuracy)
            key = (ev["report"].macro_f1, -ev["loss"])
        else:
            key = (epoch, 0.0)
        if best_key is None or key > best_key:
            best_key, best_state, result.best_epoch = key, copy.deepcopy(model.state_dict()), epoch
        result.history.append(entry)
        log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in entry.items() if isinstance(v, float)})
        if cfg.max_minutes is not None and time.perf_counter() - t0 > 60 * cfg.max_minutes:
            log.info("time budget reached after epoch %d", epoch)
            break
    model.load_state_dict(best_state)
    result.seconds = time.perf_counter() - t0
    if out_dir is not None:
        result.checkpoint = save_checkpoint(model, Path(out_dir) / "model.fmdl", {
            "spec": model.spec.to_dict(), "model_config": asdict(model.cfg), "train_config": cfg.to_dict(),
            "best_epoch": result.best_epoch, "history": result.history})
    return result
