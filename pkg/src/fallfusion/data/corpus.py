"""Synthetic corpus: scripts -> recordings -> prepared sessions -> window records."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

from ..signal.pipeline import PreparedSession, PreprocessConfig, preprocess_recording
from .scenarios import SCENARIOS, make_script
from .synth import generate_scenario
from .windows import read_fwin, slice_windows, write_fwin

log = logging.getLogger(__name__)


@dataclass
class CorpusConfig:
    n_subjects: int = 10
    sessions_per_scenario: int = 1
    duration_s: float = 72.0
    seed: int = 0
    scenarios: tuple = SCENARIOS

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


def iter_scripts(cfg: CorpusConfig):
    for subject in range(cfg.n_subjects):
        for scenario in cfg.scenarios:
            for k in range(cfg.sessions_per_scenario):
                yield make_script(scenario, subject, k, seed=cfg.seed, duration_s=cfg.duration_s)


def session_windows(session: PreparedSession) -> list:
    m = session.meta
    return slice_windows(session.vib, session.phi, session.labels, session.gamma, m["scenario"],
                         int(m["subject_id"]), m["session_id"], e_v=session.e_v)


def build_corpus(cfg: CorpusConfig | None = None, pre: PreprocessConfig | None = None,
                 cache_dir=None) -> list:
    """All windows of the configured corpus; cached as FWIN plus a session-id sidecar."""
    cfg = cfg or CorpusConfig()
    path = sidecar = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"corpus_{cfg.key()}.fwin"
        sidecar = path.with_suffix(".sessions.json")
        if path.exists() and sidecar.exists():
            records = read_fwin(path)
            for r, sid in zip(records, json.loads(sidecar.read_text())):
                r.session_id = sid
            return records
    records = []
    for script in iter_scripts(cfg):
        session = preprocess_recording(generate_scenario(script, cfg.seed), pre)
        records += session_windows(session)
        log.debug("session %s: %d windows", script.session_id, len(records))
    if path is not None:
        save_windows(records, path)
    return records


def recording_dirs(path) -> list[Path]:
    """A recording container directory, or every container found one level below ``path``."""
    path = Path(path)
    if (path / "meta.json").exists():
        return [path]
    return sorted(p for p in path.iterdir() if (p / "meta.json").exists())


def load_windows(path, pre: PreprocessConfig | None = None) -> list:
    """Window records from an FWIN file, a directory holding ``windows.fwin``, or recording containers."""
    path = Path(path)
    if path.is_dir() and (path / "windows.fwin").exists():
        path = path / "windows.fwin"
    if path.is_file():
        records = read_fwin(path)
        sidecar = path.with_suffix(".sessions.json")
        if sidecar.exists():
            for r, sid in zip(records, json.loads(sidecar.read_text())):
                r.session_id = sid
        return records
    from ..signal.recording import read_recording
    dirs = recording_dirs(path)
    if not dirs:
        raise FileNotFoundError(f"no windows or recordings under {path}")
    records = []
    for d in dirs:
        records += session_windows(preprocess_recording(read_recording(d), pre))
    return records


def save_windows(records, path) -> Path:
    path = write_fwin(records, path)
    path.with_suffix(".sessions.json").write_text(json.dumps([r.session_id for r in records]))
    return path
