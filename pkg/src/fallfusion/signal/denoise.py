"""Vibration denoising (wavelet shrinkage, Hampel filter) and the triaxial energy envelope."""

from __future__ import annotations

import numpy as np
import pywt
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DegenerateInput, ShapeMismatch
from .series import Envelope, SampleSeries

MAD_TO_SIGMA = 1.4826
WAVELET = "db2"
WAVELET_LEVELS = 4


def energy_envelope(vib: SampleSeries) -> Envelope:
    if vib.channels != 3:
        raise ShapeMismatch(f"energy envelope expects 3 channels, got {vib.channels}")
    return Envelope(vib.rate_hz, np.sqrt(np.sum(vib.data ** 2, axis=1)))


def hampel_filter(series: SampleSeries, half_window: int = 3, k_mad: float = 3.0) -> SampleSeries:
    """Replace outliers by their window median.

    A sample is an outlier when it deviates from the median of its
    ``2 * half_window + 1`` neighborhood by more than ``k_mad`` scaled MADs.
    Windows are truncated at the edges.  When the MAD is zero any sample
    differing from the median is replaced.
    """
    if half_window < 1:
        raise DegenerateInput("half_window must be >= 1")
    if not k_mad > 0:
        raise DegenerateInput("k_mad must be positive")
    x = series.data
    padded = np.pad(x, ((half_window, half_window), (0, 0)), constant_values=np.nan)
    # windows: (N, channels, 2h+1)
    win = sliding_window_view(padded, 2 * half_window + 1, axis=0)
    med = np.nanmedian(win, axis=-1)
    mad = np.nanmedian(np.abs(win - med[..., None]), axis=-1)
    outlier = np.abs(x - med) > k_mad * MAD_TO_SIGMA * mad
    return series.with_data(np.where(outlier, med, x))


def _shrink_channel(x: np.ndarray, threshold: float | None, levels: int) -> np.ndarray:
    coeffs = pywt.wavedec(x, WAVELET, mode="symmetric", level=levels)
    if threshold is None:
        sigma = np.median(np.abs(coeffs[-1])) / 0.6745
        threshold = sigma * np.sqrt(2.0 * np.log(x.size))
    if threshold > 0:
        coeffs = [coeffs[0]] + [pywt.threshold(c, threshold, mode="soft") for c in coeffs[1:]]
    return pywt.waverec(coeffs, WAVELET, mode="symmetric")[: x.size]


def wavelet_shrink(series: SampleSeries, threshold: float | None = None) -> SampleSeries:
    """Per-channel soft-threshold wavelet denoising.

    ``threshold=None`` uses the universal threshold estimated from the finest
    detail band; ``threshold=0`` reduces to decompose/reconstruct.
    """
    if series.n < 16:
        raise DegenerateInput("wavelet shrinkage needs at least 16 samples")
    levels = min(WAVELET_LEVELS, pywt.dwt_max_level(series.n, pywt.Wavelet(WAVELET).dec_len))
    levels = max(levels, 1)
    out = np.stack([_shrink_channel(series.data[:, c], threshold, levels)
                    for c in range(series.channels)], axis=1)
    return series.with_data(out)


def denoise_vibration(vib: SampleSeries, half_window: int = 3, k_mad: float = 3.0) -> SampleSeries:
    return hampel_filter(wavelet_shrink(vib), half_window, k_mad)
