"""Window records: slicing, augmentation, perturbation, subject splits, FWIN files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal as sps

from ..errors import DegenerateInput, InsufficientData, InvalidLabel, SchemaError
from ..signal.denoise import energy_envelope
from ..signal.series import SampleSeries
from .scenarios import SCENARIOS, scenario_code

L = 256
HOP = 128
CENTER_TOL = 16
FS = 100.0


@dataclass
class WindowRecord:
    vib: np.ndarray          # (256, 3)
    radar: np.ndarray        # (256, 5)
    label: int               # 1 fall, 0 nonfall
    weight: float
    scenario: str
    t0_s: float
    subject_id: int
    session_id: str = ""

    def __post_init__(self):
        self.vib = np.asarray(self.vib, dtype=np.float32)
        self.radar = np.asarray(self.radar, dtype=np.float32)
        if self.vib.shape != (L, 3) or self.radar.shape != (L, 5):
            raise DegenerateInput(f"window shapes {self.vib.shape}, {self.radar.shape}")
        if self.label not in (0, 1):
            raise InvalidLabel(f"label {self.label!r}")
        if not 0.0 <= self.weight <= 1.0:
            raise InvalidLabel(f"weight {self.weight} outside [0, 1]")
        if self.scenario not in SCENARIOS:
            raise InvalidLabel(f"unknown scenario {self.scenario!r}")


def window_starts(n: int) -> list[int]:
    if n < L:
        raise DegenerateInput(f"need at least {L} samples, got {n}")
    return list(range(0, n - L + 1, HOP))


def centered_start(peak: int, start: int, n: int) -> int:
    """Start closest to ``start`` that puts ``peak`` within the central band, clamped to the record."""
    lo, hi = peak - (L // 2 + CENTER_TOL), peak - (L // 2 - CENTER_TOL)
    s = min(max(start, lo), hi)
    return int(min(max(s, 0), n - L))


def _fall_label_rule(start: int, lo: int, hi: int, peak: int) -> bool:
    overlap = max(0, min(start + L, hi) - max(start, lo))
    return overlap >= 0.5 * max(hi - lo, 1) or start <= peak < start + L


def slice_windows(vib: SampleSeries, radar_phi: SampleSeries, labels, gamma, scenario: str = "empty",
                  subject_id: int = 0, session_id: str = "", e_v=None) -> list[WindowRecord]:
    """Cut aligned 100 Hz streams into labeled, weighted windows.

    ``labels`` holds dicts with ``class``/``start_s``/``end_s`` or plain
    ``(start_s, end_s)`` fall intervals.
    """
    n = vib.n
    if radar_phi.n != n or len(gamma) != n:
        raise DegenerateInput("vibration, radar and gamma lengths differ")
    starts = window_starts(n)
    ev = (e_v.values if e_v is not None else energy_envelope(vib).values)
    falls = []
    for lab in labels:
        if isinstance(lab, dict):
            if lab.get("class") != "fall":
                continue
            a, b = lab["start_s"], lab["end_s"]
        else:
            a, b = lab
        lo = int(np.clip(round((a - vib.t0_s) * vib.rate_hz), 0, n))
        hi = int(np.clip(round((b - vib.t0_s) * vib.rate_hz), 0, n))
        if hi <= lo:
            continue
        falls.append((lo, hi, lo + int(np.argmax(ev[lo:hi]))))

    gamma = np.asarray(gamma, dtype=np.float64)
    seen = set()
    out = []
    for s in starts:
        hits = [f for f in falls if _fall_label_rule(s, *f)]
        label = 1 if hits else 0
        if hits:
            s = centered_start(hits[0][2], s, n)
            if s in seen:
                continue
        seen.add(s)
        sl = slice(s, s + L)
        out.append(WindowRecord(vib.data[sl], radar_phi.data[sl], label,
                                float(np.clip(gamma[sl].mean(), 0.0, 1.0)), scenario,
                                vib.t0_s + s / vib.rate_hz, subject_id, session_id))
    return out


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentConfig:
    p_noise: float = 0.5
    p_stretch: float = 0.5
    p_notch: float = 0.3
    noise_iqr_frac: float = 0.01
    stretch_range: tuple = (0.95, 1.05)
    notch_jitter: float = 0.10
    notch_q: float = 5.0

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_noise=0.0, p_stretch=0.0, p_notch=0.0)


def stretch_window(x: np.ndarray, factor: float) -> np.ndarray:
    """Time-stretch about the window center and re-crop to the same length (edge-clamped)."""
    n = x.shape[0]
    c = (n - 1) / 2.0
    pos = np.clip(c + (np.arange(n) - c) / factor, 0, n - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    w = (pos - i0)[:, None]
    return (1 - w) * x[i0] + w * x[i1]


def dominant_frequency(x: np.ndarray, fs: float = FS) -> float:
    xc = x - x.mean(axis=0)
    power = (np.abs(np.fft.rfft(xc, axis=0)) ** 2).sum(axis=1)
    power[0] = 0.0
    return float(np.fft.rfftfreq(x.shape[0], 1.0 / fs)[int(np.argmax(power))])


def notch_filter(x: np.ndarray, f0: float, q: float, fs: float = FS) -> np.ndarray:
    f0 = float(np.clip(f0, 0.5, fs / 2 - 0.5))
    b, a = sps.iirnotch(f0, q, fs)
    return sps.lfilter(b, a, x, axis=0)


def _iqr(x: np.ndarray) -> np.ndarray:
    q75, q25 = np.percentile(x, [75, 25], axis=0)
    return q75 - q25


def augment(w: WindowRecord, rng_seed, cfg: AugmentConfig | None = None) -> WindowRecord:
    cfg = cfg or AugmentConfig()
    rng = np.random.default_rng(rng_seed)
    # draw every decision up front so one knob does not shift the others' randomness
    u = rng.random(3)
    factor = rng.uniform(*cfg.stretch_range)
    jitter = rng.uniform(1 - cfg.notch_jitter, 1 + cfg.notch_jitter)
    vib = w.vib.astype(np.float64)
    radar = w.radar.astype(np.float64)
    if u[0] < cfg.p_noise:
        vib = vib + rng.standard_normal(vib.shape) * cfg.noise_iqr_frac * _iqr(vib)
        radar = radar + rng.standard_normal(radar.shape) * cfg.noise_iqr_frac * _iqr(radar)
    if u[1] < cfg.p_stretch:
        vib = stretch_window(vib, factor)
        radar = stretch_window(radar, factor)
    if u[2] < cfg.p_notch:
        vib = notch_filter(vib, dominant_frequency(vib) * jitter, cfg.notch_q)
    if not (u < (cfg.p_noise, cfg.p_stretch, cfg.p_notch)).any():
        return replace(w, vib=w.vib.copy(), radar=w.radar.copy())
    return replace(w, vib=vib.astype(np.float32), radar=radar.astype(np.float32))


# ---------------------------------------------------------------- perturbations

PERTURBATIONS = ("time_shift_ms", "radar_dropout_frac", "vib_dropout_frac")


def shift_rows(x: np.ndarray, shift: float) -> np.ndarray:
    """``y[n] = x[n - shift]`` with linear interpolation and edge clamping."""
    n = x.shape[0]
    pos = np.clip(np.arange(n) - shift, 0, n - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    w = (pos - i0)[:, None]
    return (1 - w) * x[i0] + w * x[i1]


def perturb_windows(records, kind: str, magnitude: float, rng_seed=0, fs: float = FS) -> list[WindowRecord]:
    if kind not in PERTURBATIONS:
        raise ValueError(f"unknown perturbation {kind!r}")
    if kind != "time_shift_ms" and not 0.0 <= magnitude <= 1.0:
        raise ValueError("dropout fraction must lie in [0, 1]")
    if magnitude < 0:
        raise ValueError("shift magnitude must be non-negative")
    rng = np.random.default_rng(rng_seed)
    out = []
    for w in records:
        if magnitude == 0:
            out.append(replace(w, vib=w.vib.copy(), radar=w.radar.copy()))
        elif kind == "time_shift_ms":
            shift = rng.uniform(-magnitude, magnitude) * 1e-3 * fs
            out.append(replace(w, vib=w.vib.copy(), radar=shift_rows(w.radar, shift).astype(np.float32)))
        elif kind == "radar_dropout_frac":
            keep = rng.random(w.radar.shape[0]) >= magnitude
            out.append(replace(w, vib=w.vib.copy(), radar=w.radar * keep[:, None]))
        else:
            vib = np.zeros_like(w.vib) if rng.random() < magnitude else w.vib.copy()
            out.append(replace(w, vib=vib, radar=w.radar.copy()))
    return out


# ---------------------------------------------------------------- splits

@dataclass
class SplitManifest:
    train: set = field(default_factory=set)
    val: set = field(default_factory=set)
    test: set = field(default_factory=set)
    sessions: dict = field(default_factory=dict)   # split name -> set of session ids

    def split_of(self, subject_id) -> str:
        for name in ("train", "val", "test"):
            if subject_id in getattr(self, name):
                return name
        raise KeyError(subject_id)

    def select(self, records, split: str) -> list:
        subjects = getattr(self, split)
        return [r for r in records if r.subject_id in subjects]

    def to_dict(self) -> dict:
        return {"train": sorted(self.train), "val": sorted(self.val), "test": sorted(self.test),
                "sessions": {k: sorted(v) for k, v in self.sessions.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        return cls(set(d["train"]), set(d["val"]), set(d["test"]),
                   {k: set(v) for k, v in d.get("sessions", {}).items()})


def split_subjects(records, ratios=(0.6, 0.2, 0.2), rng_seed=0) -> SplitManifest:
    subjects = sorted({r.subject_id for r in records})
    n = len(subjects)
    if n < 3:
        raise InsufficientData(f"need at least 3 subjects, got {n}")
    r = np.asarray(ratios, dtype=np.float64)
    r = r / r.sum()
    n_val = max(1, int(round(r[1] * n)))
    n_test = max(1, int(round(r[2] * n)))
    n_train = n - n_val - n_test
    if n_train < 1:
        n_train, n_val, n_test = 1, max(1, (n - 1) // 2), n - 1 - max(1, (n - 1) // 2)
    perm = [subjects[i] for i in np.random.default_rng(rng_seed).permutation(n)]
    m = SplitManifest(set(perm[:n_train]), set(perm[n_train:n_train + n_val]), set(perm[n_train + n_val:]))
    for name in ("train", "val", "test"):
        subj = getattr(m, name)
        m.sessions[name] = {getattr(rec, "session_id", "") for rec in records if rec.subject_id in subj} - {""}
    return m


# ---------------------------------------------------------------- FWIN files

FWIN_MAGIC = b"FWIN"
FWIN_VERSION = 1
_HEADER = struct.Struct("<4sHIH")
_RECORD = np.dtype([("label", "<u1"), ("scenario", "<u1"), ("weight", "<f4"), ("subject", "<u2"),
                    ("t0_us", "<u8"), ("vib", "<f4", (L, 3)), ("radar", "<f4", (L, 5))])


def write_fwin(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.zeros(len(records), dtype=_RECORD)
    for i, r in enumerate(records):
        arr[i] = (r.label, scenario_code(r.scenario), r.weight, r.subject_id,
                  int(round(r.t0_s * 1e6)), r.vib, r.radar)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FWIN_MAGIC, FWIN_VERSION, len(records), L))
        f.write(arr.tobytes())
    return path


def read_fwin(path) -> list[WindowRecord]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise SchemaError("truncated FWIN header")
    magic, version, count, length = _HEADER.unpack_from(raw)
    if magic != FWIN_MAGIC or version != FWIN_VERSION or length != L:
        raise SchemaError(f"bad FWIN header {magic!r} v{version} L={length}")
    body = raw[_HEADER.size:]
    if len(body) != count * _RECORD.itemsize:
        raise SchemaError("FWIN body size does not match record count")
    arr = np.frombuffer(body, dtype=_RECORD, count=count)
    out = []
    for a in arr:
        if a["scenario"] >= len(SCENARIOS):
            raise SchemaError(f"scenario code {a['scenario']}")
        out.append(WindowRecord(a["vib"].copy(), a["radar"].copy(), int(a["label"]), float(a["weight"]),
                                SCENARIOS[a["scenario"]], int(a["t0_us"]) / 1e6, int(a["subject"])))
    return out
