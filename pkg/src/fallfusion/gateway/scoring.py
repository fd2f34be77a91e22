"""Node-side window slicing and the per-window scoring path shared by the gateway and offline evaluation."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from ..data.windows import HOP, L
from ..nn.model import FallFusionNet
from ..signal.pipeline import FS, PreprocessConfig, node_radar_features, node_vibration, prepare_window
from ..signal.recording import Recording
from .protocol import RADAR, VIBRATION, WireFrame

STRIDE_S = HOP / FS
FUSED, VIB_ONLY, RADAR_ONLY = "fused", "vibration_only", "radar_only"


def node_windows(rec: Recording, node_type: int, cfg: PreprocessConfig | None = None) -> list[tuple[int, np.ndarray]]:
    """What a node transmits: ``(t0_us, window)`` on the node's own clock, 2.56 s windows at 1.28 s stride."""
    vib = node_vibration(rec)
    series = vib if node_type == VIBRATION else node_radar_features(rec, vib.n, cfg)
    out = []
    for k, s in enumerate(range(0, series.n - L + 1, HOP)):
        t0_us = int(round((series.t0_s + s / series.rate_hz) * 1e6))
        out.append((t0_us, np.ascontiguousarray(series.data[s:s + L], dtype="<f4")))
    return out


def node_frames(rec: Recording, node_type: int, node_id: int = 0, cfg: PreprocessConfig | None = None) -> list[WireFrame]:
    return [WireFrame(node_type, node_id, seq, t0, w) for seq, (t0, w) in enumerate(node_windows(rec, node_type, cfg))]


@dataclass
class Detection:
    t0_us: int
    p_fall: float
    decision: int
    latency_ms: float
    expert_id: int | None
    gamma_mean: float
    mode: str
    shift_ms: float = 0.0

    def to_dict(self) -> dict:
        return {"t0_us": self.t0_us, "p_fall": self.p_fall, "decision": self.decision,
                "latency_ms": self.latency_ms, "expert_id": self.expert_id, "gamma_mean": self.gamma_mean,
                "mode": self.mode, "shift_ms": self.shift_ms}


class WindowScorer:
    """Preprocess one window pair and run the model on it (batch of one)."""

    def __init__(self, model: FallFusionNet, cfg: PreprocessConfig | None = None, threshold: float = 0.5):
        self.model = model.eval()
        self.cfg = cfg or PreprocessConfig()
        self.threshold = threshold

    @torch.no_grad()
    def score(self, vib_raw: np.ndarray | None, phi: np.ndarray | None, t0_us: int = 0,
              started: float | None = None) -> Detection:
        started = time.perf_counter() if started is None else started
        mode = FUSED if vib_raw is not None and phi is not None else (VIB_ONLY if phi is None else RADAR_ONLY)
        # a missing modality is zero-filled, the same as whole-window dropout
        vib_raw = np.zeros((L, 3), np.float32) if vib_raw is None else vib_raw
        phi = np.zeros((L, 5), np.float32) if phi is None else phi
        pw = prepare_window(np.asarray(vib_raw, dtype=np.float64), np.asarray(phi, dtype=np.float64), self.cfg)
        out = self.model(torch.from_numpy(pw.vib[None].astype(np.float32)),
                         torch.from_numpy(pw.radar[None].astype(np.float32)))
        p = float(torch.sigmoid(out["logits"])[0])
        expert = out.get("expert_id")
        return Detection(int(t0_us), p, int(p >= self.threshold), 1e3 * (time.perf_counter() - started),
                         None if expert is None else int(expert[0]), float(pw.gamma_mean), mode,
                         1e3 * pw.shift_s)


def score_offline(model: FallFusionNet, rec: Recording, cfg: PreprocessConfig | None = None) -> list[Detection]:
    """Offline scoring of the exact windows the two nodes would transmit for ``rec``."""
    scorer = WindowScorer(model, cfg)
    vib = node_windows(rec, VIBRATION, cfg)
    rad = node_windows(rec, RADAR, cfg)
    return [scorer.score(v, r, t0) for (t0, v), (_, r) in zip(vib, rad)]
