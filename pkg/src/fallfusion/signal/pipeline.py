"""Session- and window-level preprocessing built from the signal primitives."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateInput, NoSignal
from .align import affine_warp, estimate_alignment, gcc_phat_delay, resample_linear
from .denoise import denoise_vibration, energy_envelope
from .features import consistency_weight
from .radar import frames_to_kinematics, kinematics_to_series, radar_envelope
from .recording import Recording
from .series import DriftModel, Envelope, SampleSeries

FS = 100.0


@dataclass
class PreprocessConfig:
    rate_hz: float = FS
    bg_history: int = 8
    k_sigma: float = 3.0
    eps_r: float = 0.3
    eps_v: float = 0.3
    min_pts: int = 3
    hampel_half_window: int = 3
    hampel_k: float = 3.0
    align_max_lag_s: float = 1.0
    align_segment_s: float = 10.0
    align_min_coherence: float = 0.2
    align_max_freq_hz: float | None = 3.0
    micro_shift_max_s: float = 0.15
    micro_shift_min_coherence: float = 0.3


@dataclass
class PreparedSession:
    """Aligned, denoised 100 Hz streams of one recording plus derived envelopes."""

    meta: dict
    vib: SampleSeries            # denoised triaxial vibration
    vib_raw: SampleSeries        # resampled, not denoised (what a node transmits)
    phi: SampleSeries            # aligned kinematic features
    phi_node: SampleSeries       # kinematic features on the radar clock (what a node transmits)
    e_v: Envelope
    e_r: Envelope
    gamma: np.ndarray
    drift: DriftModel
    labels: list = field(default_factory=list)

    def fall_intervals(self) -> list[tuple[float, float]]:
        return [(l["start_s"], l["end_s"]) for l in self.labels if l["class"] == "fall"]


def node_vibration(rec: Recording, rate_hz: float = FS) -> SampleSeries:
    return resample_linear(SampleSeries(rec.fs_vibration_hz, 0.0, rec.vibration), rate_hz)


def node_radar_features(rec: Recording, n: int, cfg: PreprocessConfig | None = None) -> SampleSeries:
    """Radar chain evaluated on the radar node's clock, interpolated onto the common grid."""
    cfg = cfg or PreprocessConfig()
    phis = frames_to_kinematics(rec.radar, cfg.bg_history, cfg.k_sigma, cfg.eps_r, cfg.eps_v, cfg.min_pts)
    return kinematics_to_series(phis, cfg.rate_hz, 0.0, n)


def preprocess_recording(rec: Recording, cfg: PreprocessConfig | None = None) -> PreparedSession:
    cfg = cfg or PreprocessConfig()
    vib_raw = node_vibration(rec, cfg.rate_hz)
    phi_node = node_radar_features(rec, vib_raw.n, cfg)

    e_v_raw = energy_envelope(vib_raw)
    e_r_raw = radar_envelope(phi_node)
    drift = estimate_alignment(e_v_raw, e_r_raw, cfg.align_max_lag_s, cfg.align_segment_s,
                               cfg.align_min_coherence, cfg.align_max_freq_hz)
    phi = affine_warp(phi_node, drift)

    vib = denoise_vibration(vib_raw, cfg.hampel_half_window, cfg.hampel_k)
    e_v = energy_envelope(vib)
    e_r = radar_envelope(phi)
    gamma = consistency_weight(e_v, e_r)
    return PreparedSession(dict(rec.meta), vib, vib_raw, phi, phi_node, e_v, e_r, gamma, drift,
                           list(rec.labels))


@dataclass
class PreparedWindow:
    vib: np.ndarray      # (L, 3) denoised
    radar: np.ndarray    # (L, 5) micro-aligned
    shift_s: float
    gamma_mean: float


def prepare_window(vib_raw: np.ndarray, phi: np.ndarray, cfg: PreprocessConfig | None = None) -> PreparedWindow:
    """Gateway-side processing of one transmitted window pair.

    Denoises the vibration and corrects a residual radar offset when the
    window's envelopes agree on one confidently.
    """
    cfg = cfg or PreprocessConfig()
    vib = denoise_vibration(SampleSeries(cfg.rate_hz, 0.0, vib_raw), cfg.hampel_half_window, cfg.hampel_k)
    phi_s = SampleSeries(cfg.rate_hz, 0.0, phi)
    e_v = energy_envelope(vib)
    e_r = radar_envelope(phi_s)
    shift = 0.0
    try:
        est = gcc_phat_delay(e_v, e_r, min(cfg.micro_shift_max_s, vib.n / (2 * cfg.rate_hz)),
                             cfg.align_max_freq_hz)
        if est.peak_coherence > cfg.micro_shift_min_coherence:
            shift = est.delay_s
    except (NoSignal, DegenerateInput):
        pass
    if shift:
        phi_s = affine_warp(phi_s, DriftModel(0.0, shift))
        e_r = radar_envelope(phi_s)
    gamma = consistency_weight(e_v, e_r)
    return PreparedWindow(vib.data, phi_s.data, shift, float(gamma.mean()))
