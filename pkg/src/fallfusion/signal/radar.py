"""Radar detection-frame processing: clutter removal, noise floor, clustering, kinematics."""

from __future__ import annotations

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .series import Envelope, KinematicVector, RadarFrame, RadarFrameSet, SampleSeries
from .align import _interp_rows

MAD_TO_SIGMA = 1.4826
RANGE_BIN_M = 0.1
STATIC_VEL_MPS = 0.1


def radar_background_subtract(frames: RadarFrameSet, history: int = 8,
                              range_bin_m: float = RANGE_BIN_M,
                              static_vel_mps: float = STATIC_VEL_MPS) -> RadarFrameSet:
    """Remove static clutter with a per-range-bin moving average of zero-Doppler intensity.

    Static returns (``|v| < static_vel_mps``) have the running background of
    their range bin subtracted, clamped at zero; a bin's background starts at
    its first observation and then follows an EMA with rate ``1 / history``.
    Unobserved bins decay toward zero.  Moving returns pass untouched.
    """
    if history < 1:
        raise ValueError("history must be >= 1")
    rate = 1.0 / history
    background: dict[int, float] = {}
    out = []
    for frame in frames.frames:
        pts = frame.points
        static = np.abs(pts[:, 1]) < static_vel_mps
        bins = np.round(pts[:, 0] / range_bin_m).astype(np.int64)
        resid = pts[:, 2].copy()
        for j in np.flatnonzero(static):
            resid[j] = max(resid[j] - background.get(int(bins[j]), 0.0), 0.0)
        observed: dict[int, float] = {}
        for j in np.flatnonzero(static):
            b = int(bins[j])
            observed[b] = max(observed.get(b, 0.0), pts[j, 2])
        for b in list(background):
            if b not in observed:
                background[b] *= 1.0 - rate
        for b, level in observed.items():
            if b in background:
                background[b] += rate * (level - background[b])
            else:
                background[b] = level
        keep = resid > 0
        kept = pts[keep].copy()
        kept[:, 2] = resid[keep]
        out.append(RadarFrame(frame.t_s, kept))
    return RadarFrameSet(out)


def adaptive_threshold(points, k_sigma: float = 3.0) -> np.ndarray:
    """Keep points whose intensity exceeds a robust noise floor ``median + k * 1.4826 * MAD``.

    Frames with fewer than 3 points pass through.  If the spread is zero and
    nothing exceeds the floor (all intensities equal) every point is kept.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not k_sigma > 0:
        raise ValueError("k_sigma must be positive")
    if len(pts) < 3:
        return pts
    inten = pts[:, 2]
    mu = np.median(inten)
    sigma = MAD_TO_SIGMA * np.median(np.abs(inten - mu))
    keep = inten > mu + k_sigma * sigma
    if sigma == 0 and not keep.any():
        return pts
    return pts[keep]


def cluster_range_doppler(points, eps_r: float = 0.3, eps_v: float = 0.3, min_pts: int = 3) -> list:
    """DBSCAN in the ``(r / eps_r, v / eps_v)`` plane with unit radius.

    Returns point arrays per cluster, ordered by descending summed intensity.
    Border points join the cluster of their nearest core point.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n < min_pts or n == 0:
        return []
    z = pts[:, :2] / np.array([eps_r, eps_v])
    d2 = np.sum((z[:, None, :] - z[None, :, :]) ** 2, axis=-1)
    nbr = d2 <= 1.0
    core = nbr.sum(axis=1) >= min_pts
    if not core.any():
        return []
    core_idx = np.flatnonzero(core)
    sub = nbr[np.ix_(core_idx, core_idx)]
    _, comp = connected_components(csr_matrix(sub), directed=False)
    label = np.full(n, -1)
    label[core_idx] = comp
    for j in np.flatnonzero(~core):
        cand = core_idx[nbr[j, core_idx]]
        if cand.size:
            label[j] = label[cand[np.argmin(d2[j, cand])]]
    clusters = [pts[label == c] for c in range(comp.max() + 1)]
    clusters.sort(key=lambda c: -c[:, 2].sum())
    return clusters


def kinematic_descriptor(clusters: list, t_s: float) -> KinematicVector:
    """Kinematic summary of the highest-energy cluster (all zeros if there is none)."""
    if not clusters:
        return KinematicVector(t_s)
    c = max(clusters, key=lambda c: c[:, 2].sum())
    r, v, w = c[:, 0], c[:, 1], c[:, 2]
    energy = float(w.sum())
    r_mean = float(np.dot(w, r) / energy) if energy > 0 else float(r.mean())
    return KinematicVector(t_s, r_mean, float(np.abs(v).mean()), float(r.std()), float(v.std()), energy)


def frames_to_kinematics(frames: RadarFrameSet, history: int = 8, k_sigma: float = 3.0,
                         eps_r: float = 0.3, eps_v: float = 0.3, min_pts: int = 3) -> list:
    """Full per-frame chain: background subtraction, noise floor, clustering, descriptor."""
    cleaned = radar_background_subtract(frames, history)
    return [kinematic_descriptor(cluster_range_doppler(adaptive_threshold(f.points, k_sigma),
                                                       eps_r, eps_v, min_pts), f.t_s)
            for f in cleaned.frames]


def kinematics_to_series(phis: list, rate_hz: float, t0_s: float, n: int) -> SampleSeries:
    """Linearly interpolate per-frame kinematic vectors onto a uniform grid (ends clamp)."""
    grid = t0_s + np.arange(n) / rate_hz
    if not phis:
        return SampleSeries(rate_hz, t0_s, np.zeros((n, 5)))
    t = np.array([p.t_s for p in phis])
    vals = np.stack([p.as_array() for p in phis])
    if len(phis) == 1:
        return SampleSeries(rate_hz, t0_s, np.repeat(vals, n, axis=0))
    # fractional frame index for each grid time
    pos = np.interp(grid, t, np.arange(len(t)))
    return SampleSeries(rate_hz, t0_s, _interp_rows(vals, pos))


def moving_average(x: np.ndarray, width: int) -> np.ndarray:
    """Centered moving average with edge-truncated windows."""
    width = max(1, int(width))
    lo = width // 2
    hi = width - lo - 1
    c = np.concatenate([[0.0], np.cumsum(x, dtype=np.float64)])
    idx = np.arange(x.size)
    a = np.clip(idx - lo, 0, x.size)
    b = np.clip(idx + hi + 1, 0, x.size)
    return (c[b] - c[a]) / (b - a)


def radar_envelope(phi: SampleSeries, window_s: float = 0.25) -> Envelope:
    """Smoothed ``energy * mean|v|`` motion envelope, rescaled to unit maximum."""
    if phi.channels != 5:
        raise ValueError(f"expected 5 kinematic channels, got {phi.channels}")
    drive = np.abs(phi.data[:, 4] * phi.data[:, 1])
    width = int(round(window_s * phi.rate_hz)) | 1
    env = np.maximum(moving_average(drive, width), 0.0)
    peak = env.max()
    if peak > 0:
        env = env / peak
    return Envelope(phi.rate_hz, env)
