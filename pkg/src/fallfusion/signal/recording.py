"""On-disk recording container: meta.json, vibration.bin, radar.jsonl, labels.json."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import SchemaError
from .series import RadarFrame, RadarFrameSet

SCHEMA_VERSION = 1


@dataclass
class Recording:
    meta: dict
    vibration: np.ndarray            # (N, 3) float32 at meta["fs_vibration_hz"]
    radar: RadarFrameSet
    labels: list = field(default_factory=list)

    @property
    def fs_vibration_hz(self) -> float:
        return float(self.meta["fs_vibration_hz"])

    def fall_intervals(self) -> list[tuple[float, float]]:
        return [(l["start_s"], l["end_s"]) for l in self.labels if l["class"] == "fall"]


def _fmt(x: float) -> float:
    # float32 round trip keeps files compact and deterministic
    return float(np.float32(x))


def write_recording(rec: Recording, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = dict(rec.meta)
    meta["schema_version"] = SCHEMA_VERSION
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    np.ascontiguousarray(rec.vibration, dtype="<f4").tofile(out / "vibration.bin")
    with open(out / "radar.jsonl", "w") as fh:
        for fr in rec.radar.frames:
            pts = [[_fmt(a), _fmt(b), _fmt(c)] for a, b, c in fr.points]
            fh.write(json.dumps({"t": round(float(fr.t_s), 6), "points": pts}) + "\n")
    (out / "labels.json").write_text(json.dumps(rec.labels, indent=2) + "\n")
    return out


def read_recording(path) -> Recording:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {meta.get('schema_version')!r} in {path}")
    vib = np.fromfile(path / "vibration.bin", dtype="<f4")
    if vib.size % 3:
        raise SchemaError("vibration.bin length is not a multiple of 3 floats")
    frames = []
    with open(path / "radar.jsonl") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                frames.append(RadarFrame(float(obj["t"]), np.array(obj["points"], dtype=np.float64)))
    labels = json.loads((path / "labels.json").read_text())
    return Recording(meta, vib.reshape(-1, 3).astype(np.float64), RadarFrameSet(frames), labels)
