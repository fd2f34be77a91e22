"""Rate conversion, GCC-PHAT delay estimation, clock-drift fitting and affine warping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateInput, InsufficientData, NoSignal
from .series import DriftModel, Envelope, SampleSeries

EPS_PHAT = 1e-12


def _interp_rows(data: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Linear interpolation of ``data`` rows at fractional indices ``pos`` (clamped)."""
    n = data.shape[0]
    pos = np.clip(pos, 0.0, n - 1)
    if n == 1:
        return np.repeat(data[:1], pos.size, axis=0)
    i = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    f = (pos - i)[:, None]
    return data[i] * (1.0 - f) + data[i + 1] * f


def resample_linear(series: SampleSeries, target_hz: float) -> SampleSeries:
    """Resample onto a ``target_hz`` grid starting at ``series.t0_s``.

    The output grid covers ``[t0, t0 + duration]``; the last output sample is the
    last grid point not beyond the input's final timestamp.
    """
    if series.n < 2:
        raise DegenerateInput("resampling needs at least 2 samples")
    if not target_hz > 0:
        raise DegenerateInput(f"target_hz must be positive, got {target_hz}")
    n_out = int(np.floor((series.n - 1) * target_hz / series.rate_hz + 1e-9)) + 1
    # index-space positions keep integer rate ratios exact
    pos = np.arange(n_out) * float(series.rate_hz) / float(target_hz)
    return SampleSeries(target_hz, series.t0_s, _interp_rows(series.data, pos))


@dataclass(frozen=True)
class DelayEstimate:
    delay_s: float
    peak_coherence: float


def phat_correlation(a: np.ndarray, b: np.ndarray, n_fft: int | None = None,
                     band: float | None = None) -> np.ndarray:
    """Circular PHAT-weighted cross-correlation; index k holds the score for ``b`` lagging ``a`` by k.

    ``band`` optionally keeps only bins below that fraction of the Nyquist frequency.
    """
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    if n_fft is None:
        n_fft = 1 << int(np.ceil(np.log2(a.size + b.size)))
    fa = np.fft.rfft(a, n_fft)
    fb = np.fft.rfft(b, n_fft)
    cross = fb * np.conj(fa)
    mag = np.abs(cross)
    weighted = np.zeros_like(cross)
    keep = mag >= EPS_PHAT
    if band is not None:
        keep &= np.arange(cross.size) <= band * (cross.size - 1)
    weighted[keep] = cross[keep] / mag[keep]
    cc = np.fft.irfft(weighted, n_fft)
    # score of a perfectly coherent pair over the same bins, so peaks read in [-1, 1]
    ref = np.fft.irfft(keep.astype(np.float64), n_fft)[0]
    return cc / ref if ref > 0 else cc


def gcc_phat_delay(a: Envelope, b: Envelope, max_lag_s: float,
                   max_freq_hz: float | None = None) -> DelayEstimate:
    """Delay of ``b`` relative to ``a`` (positive when ``b`` lags ``a``).

    Searches integer lags within ``±max_lag_s`` and refines the peak with a
    three-point parabola.  ``max_freq_hz`` restricts the phase transform to
    the band both envelopes actually occupy.
    """
    if a.rate_hz != b.rate_hz:
        raise DegenerateInput("envelopes must share a sample rate")
    n = min(len(a), len(b))
    if n < 8:
        raise DegenerateInput("GCC-PHAT needs at least 8 samples per envelope")
    max_lag = int(round(max_lag_s * a.rate_hz))
    if max_lag < 0 or max_lag > n / 2:
        raise DegenerateInput(f"max lag of {max_lag} samples exceeds half the envelope length")
    if not np.any(a.values) or not np.any(b.values):
        raise NoSignal("all-zero envelope")

    band = None if max_freq_hz is None else min(1.0, 2.0 * max_freq_hz / a.rate_hz)
    cc = phat_correlation(a.values, b.values, band=band)
    lags = np.arange(-max_lag, max_lag + 1)
    scores = cc[lags % cc.size]
    k = int(np.argmax(scores))
    peak = float(scores[k])
    shift = 0.0
    if 0 < k < len(scores) - 1:
        y0, y1, y2 = scores[k - 1], scores[k], scores[k + 1]
        denom = y0 - 2.0 * y1 + y2
        if denom < 0:
            shift = float(np.clip(0.5 * (y0 - y2) / denom, -0.5, 0.5))
    return DelayEstimate((lags[k] + shift) / a.rate_hz, peak)


@dataclass(frozen=True)
class LocalLag:
    t_s: float
    lag_s: float
    coherence: float = 1.0


def local_lags(a: Envelope, b: Envelope, segment_s: float = 10.0, overlap: float = 0.5,
               max_lag_s: float = 1.0, min_coherence: float = 0.2,
               max_freq_hz: float | None = None) -> list[LocalLag]:
    """Sliding-segment GCC-PHAT lags, keeping segments with a confident peak.

    Segment centers are reported relative to the start of the envelopes.
    """
    n = min(len(a), len(b))
    seg = int(round(segment_s * a.rate_hz))
    hop = max(1, int(round(seg * (1.0 - overlap))))
    out = []
    if seg > n:
        return out
    for start in range(0, n - seg + 1, hop):
        sa = Envelope(a.rate_hz, a.values[start:start + seg])
        sb = Envelope(b.rate_hz, b.values[start:start + seg])
        try:
            est = gcc_phat_delay(sa, sb, min(max_lag_s, seg / (2 * a.rate_hz)), max_freq_hz)
        except NoSignal:
            continue
        if est.peak_coherence > min_coherence:
            out.append(LocalLag((start + (seg - 1) / 2) / a.rate_hz, est.delay_s, est.peak_coherence))
    return out


def fit_clock_drift(lags) -> DriftModel:
    """Ordinary least-squares line ``lag = alpha * t + beta`` through local lag estimates."""
    pts = [(p.t_s, p.lag_s) if hasattr(p, "t_s") else (p["t_s"], p["lag_s"]) for p in lags]
    if len(pts) < 2:
        raise InsufficientData("drift fit needs at least 2 lag estimates")
    t = np.array([p[0] for p in pts], dtype=np.float64)
    y = np.array([p[1] for p in pts], dtype=np.float64)
    tc = t - t.mean()
    sxx = float(np.dot(tc, tc))
    if sxx == 0.0:
        raise DegenerateInput("drift fit needs at least 2 distinct time points")
    alpha = float(np.dot(tc, y - y.mean()) / sxx)
    beta = float(y.mean() - alpha * t.mean())
    return DriftModel(alpha, beta)


def affine_warp(series: SampleSeries, model: DriftModel) -> SampleSeries:
    """Resample ``series`` at ``t_n + alpha * n / rate + beta``; queries outside clamp to the ends."""
    n = np.arange(series.n, dtype=np.float64)
    if model.alpha == 0.0 and model.beta == 0.0:
        return series.with_data(series.data.copy())
    pos = n * (1.0 + model.alpha) + model.beta * series.rate_hz
    return series.with_data(_interp_rows(series.data, pos))


def estimate_alignment(e_v: Envelope, e_r: Envelope, max_lag_s: float = 1.0,
                       segment_s: float = 10.0, min_coherence: float = 0.2,
                       max_freq_hz: float | None = None, max_alpha: float = 1e-3,
                       min_span_s: float = 20.0) -> DriftModel:
    """Drift model that maps the radar envelope onto the vibration time base.

    Falls back to a constant global delay when the confident segments span less
    than ``min_span_s`` or imply an implausible drift, and to the identity when
    neither envelope has signal.
    """
    n = min(len(e_v), len(e_r))
    try:
        glob = gcc_phat_delay(e_v, e_r, min(max_lag_s, n / (2 * e_v.rate_hz)), max_freq_hz)
    except (NoSignal, DegenerateInput):
        return DriftModel()
    lags = local_lags(e_v, e_r, segment_s=segment_s, max_lag_s=max_lag_s, min_coherence=min_coherence,
                      max_freq_hz=max_freq_hz)
    # discard segments that disagree wildly with the global estimate
    lags = [p for p in lags if abs(p.lag_s - glob.delay_s) <= 0.25]
    ts = [p.t_s for p in lags]
    if len(ts) >= 2 and max(ts) - min(ts) >= min_span_s:
        try:
            fit = _trimmed_fit(lags, 2.0 / e_v.rate_hz)
            if abs(fit.alpha) <= max_alpha:
                return fit
        except (DegenerateInput, InsufficientData):
            pass
    return DriftModel(0.0, glob.delay_s)


def _trimmed_fit(lags, floor_s: float, passes: int = 3) -> DriftModel:
    # a single mislocked segment (echo or a repeated impact pattern) tilts plain least squares
    fit = fit_clock_drift(lags)
    for _ in range(passes):
        res = np.array([p.lag_s - fit.lag_at(p.t_s) for p in lags])
        cut = max(3.0 * 1.4826 * float(np.median(np.abs(res - np.median(res)))), floor_s)
        keep = [p for p, r in zip(lags, res) if abs(r) <= cut]
        if len(keep) == len(lags):
            break
        lags = keep
        fit = fit_clock_drift(lags)
    return fit
