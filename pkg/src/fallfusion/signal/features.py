"""Cross-modal consistency weights and robust per-channel normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateInput
from .series import Envelope, SampleSeries

EPS_NORM = 1e-6


def _window_sums(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    c = np.concatenate([[0.0], np.cumsum(x, dtype=np.float64)])
    return c[hi] - c[lo]


def consistency_weight(e_v: Envelope, e_r: Envelope, window_s: float = 1.0) -> np.ndarray:
    """Per-sample clamped Pearson correlation of the two envelopes over a centered window.

    Windows are truncated at the ends of the series.  A window in which either
    envelope is constant scores zero.
    """
    if e_v.rate_hz != e_r.rate_hz or len(e_v) != len(e_r):
        raise DegenerateInput("envelopes must share rate and length")
    x, y = e_v.values, e_r.values
    n = x.size
    half = int(round(window_s * e_v.rate_hz / 2))
    idx = np.arange(n)
    lo = np.clip(idx - half, 0, n)
    hi = np.clip(idx + half + 1, 0, n)
    cnt = (hi - lo).astype(np.float64)
    # center each window on a coarse global mean first to limit cancellation
    xc, yc = x - x.mean(), y - y.mean()
    mx = _window_sums(xc, lo, hi) / cnt
    my = _window_sums(yc, lo, hi) / cnt
    sxx = _window_sums(xc * xc, lo, hi) / cnt - mx * mx
    syy = _window_sums(yc * yc, lo, hi) / cnt - my * my
    sxy = _window_sums(xc * yc, lo, hi) / cnt - mx * my
    gamma = np.zeros(n)
    scale_x = _window_sums(xc * xc, lo, hi) / cnt
    scale_y = _window_sums(yc * yc, lo, hi) / cnt
    ok = (sxx > 1e-10 * scale_x + 1e-300) & (syy > 1e-10 * scale_y + 1e-300)
    gamma[ok] = sxy[ok] / np.sqrt(sxx[ok] * syy[ok])
    return np.clip(gamma, 0.0, 1.0)


@dataclass(frozen=True)
class NormStats:
    """Per-channel median and interquartile range, fitted on training data only."""

    median: np.ndarray
    iqr: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "median", np.asarray(self.median, dtype=np.float64))
        object.__setattr__(self, "iqr", np.asarray(self.iqr, dtype=np.float64))
        if np.any(self.iqr < 0):
            raise DegenerateInput("IQR entries must be nonnegative")

    @classmethod
    def fit(cls, arrays) -> "NormStats":
        data = np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1, np.shape(a)[-1]) for a in arrays])
        q25, q50, q75 = np.percentile(data, [25, 50, 75], axis=0)
        return cls(q50, q75 - q25)

    def apply(self, data: np.ndarray) -> np.ndarray:
        return (np.asarray(data, dtype=np.float64) - self.median) / np.maximum(self.iqr, EPS_NORM)

    def to_dict(self) -> dict:
        return {"median": self.median.tolist(), "iqr": self.iqr.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["median"]), np.array(d["iqr"]))


def robust_normalize(series: SampleSeries, stats: NormStats) -> SampleSeries:
    return series.with_data(stats.apply(series.data))
