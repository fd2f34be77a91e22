"""Value types for uniformly sampled series, envelopes, drift models and radar frames."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateInput, ShapeMismatch

# sanity bound on clock skew (seconds of lag accumulated per second)
MAX_ABS_DRIFT = 0.01


@dataclass(frozen=True)
class SampleSeries:
    """Uniform-rate multichannel series; ``data`` has shape (N, channels)."""

    rate_hz: float
    t0_s: float
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2:
            raise ShapeMismatch(f"series data must be 2-D, got shape {data.shape}")
        if data.shape[0] < 1:
            raise DegenerateInput("series must contain at least one sample")
        if not self.rate_hz > 0:
            raise DegenerateInput(f"rate_hz must be positive, got {self.rate_hz}")
        if not np.all(np.isfinite(data)):
            raise DegenerateInput("series contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return (self.n - 1) / self.rate_hz

    def times(self) -> np.ndarray:
        return self.t0_s + np.arange(self.n) / self.rate_hz

    def with_data(self, data: np.ndarray) -> "SampleSeries":
        return SampleSeries(self.rate_hz, self.t0_s, data)


@dataclass(frozen=True)
class Envelope:
    rate_hz: float
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not self.rate_hz > 0:
            raise DegenerateInput(f"rate_hz must be positive, got {self.rate_hz}")
        if values.size and values.min() < 0:
            raise DegenerateInput("envelope values must be nonnegative")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class DriftModel:
    """Radar-vs-vibration lag as an affine function of time: ``lag(t) = alpha * t + beta``.

    ``alpha`` is dimensionless (seconds of lag per second), ``beta`` is in seconds,
    and ``t`` is measured from the start of the series being warped.
    """

    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.beta) or not np.isfinite(self.alpha):
            raise DegenerateInput("drift model coefficients must be finite")
        if abs(self.alpha) >= MAX_ABS_DRIFT:
            raise DegenerateInput(f"|alpha| = {abs(self.alpha):.3g} exceeds the skew bound {MAX_ABS_DRIFT}")

    def lag_at(self, t_s):
        return self.alpha * np.asarray(t_s) + self.beta


@dataclass(frozen=True)
class KinematicVector:
    t_s: float
    r_mean: float = 0.0
    vr_absmean: float = 0.0
    r_std: float = 0.0
    vr_std: float = 0.0
    energy: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.r_mean, self.vr_absmean, self.r_std, self.vr_std, self.energy])


PHI_CHANNELS = ("r_mean", "vr_absmean", "r_std", "vr_std", "energy")


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 3))
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeMismatch(f"radar points must have shape (n, 3), got {arr.shape}")
    return arr


@dataclass
class RadarFrame:
    """One detection frame; ``points`` columns are range_m, radial_vel_mps, intensity."""

    t_s: float
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.points = _as_points(self.points)


@dataclass
class RadarFrameSet:
    frames: list

    def __post_init__(self):
        ts = [f.t_s for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DegenerateInput("radar frame timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)

    def times(self) -> np.ndarray:
        return np.array([f.t_s for f in self.frames], dtype=np.float64)
