"""Scenario catalogue and the script type consumed by the synthetic generator."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ScriptError

SCENARIOS = (
    "empty",           # empty bathroom
    "light_drop",      # soap drop
    "heavy_drop",      # mop drop
    "walking",         # upright walking
    "bent_walk",       # flexed-torso walking
    "wall_walk",       # wall-supported walking
    "standing",        # quiet standing
    "squatting",
)
SCENARIO_TITLES = {
    "empty": "Empty Bathroom",
    "light_drop": "Light Object Drop",
    "heavy_drop": "Heavy Object Drop",
    "walking": "Normal Walking",
    "bent_walk": "Bent Posture Walk",
    "wall_walk": "Wall-Supported Walk",
    "standing": "Static Standing",
    "squatting": "Squatting",
}


def scenario_code(name: str) -> int:
    try:
        return SCENARIOS.index(name)
    except ValueError:
        raise ScriptError(f"unknown scenario {name!r}; expected one of {SCENARIOS}") from None


@dataclass
class SubjectProfile:
    """Per-subject body and gait traits."""

    body_intensity: float = 4.5     # mean radar intensity per body point
    step_hz: float = 1.8
    walk_speed: float = 0.6         # m/s
    fall_impact: float = 1.0        # vibration amplitude scale of a fall impact (g)
    fall_drop_m: float = 0.9        # range change during a fall descent
    squat_drop_m: float = 0.4

    @classmethod
    def for_subject(cls, subject_id: int, seed: int = 0) -> "SubjectProfile":
        rng = np.random.default_rng([seed, 7919, subject_id])
        return cls(
            body_intensity=float(rng.uniform(3.5, 6.0)),
            step_hz=float(rng.uniform(1.5, 2.1)),
            walk_speed=float(rng.uniform(0.4, 0.8)),
            fall_impact=float(rng.uniform(0.75, 1.25)),
            fall_drop_m=float(rng.uniform(0.7, 1.2)),
            squat_drop_m=float(rng.uniform(0.3, 0.5)),
        )


@dataclass
class Environment:
    """Sensor desynchronization, floor response and noise levels."""

    delay_s: float = 0.0            # radar lag at t = 0
    drift_alpha: float = 0.0        # radar lag growth (s per s)
    ring_hz: float = 24.0           # structural ringing frequency, 18-30 Hz
    ring_decay_s: float = 0.4       # ringing time constant, 0.2-0.6 s
    vib_noise: float = 0.003        # sensor noise std per axis (g)
    water_noise: float = 0.008      # broadband shower noise std per axis (g)
    water_on: bool = True
    radar_noise_points: float = 30.0  # mean weak detections per frame
    water_points: float = 3.0         # mean shower Doppler detections per frame

    def vib_noise_floor(self) -> float:
        """RMS of the triaxial envelope under noise alone."""
        sigma = np.hypot(self.vib_noise, self.water_noise if self.water_on else 0.0)
        return float(np.sqrt(3.0) * sigma)


@dataclass
class ScenarioScript:
    scenario: str
    duration_s: float
    session_id: str = "session"
    subject_id: int = 0
    fall_trials: list = field(default_factory=list)   # (start_s, end_s), each 20-30 s
    falls: list = field(default_factory=list)         # impact times (s)
    drops: list = field(default_factory=list)         # {"t_s", "amplitude", "startle"}
    squats: list = field(default_factory=list)        # bottom-of-squat times (s)
    subject: SubjectProfile = field(default_factory=SubjectProfile)
    env: Environment = field(default_factory=Environment)

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ScriptError(f"unknown scenario {self.scenario!r}")
        if not self.duration_s > 0:
            raise ScriptError("duration must be positive")
        for a, b in self.fall_trials:
            if not (0 <= a < b <= self.duration_s):
                raise ScriptError(f"fall trial ({a}, {b}) outside [0, {self.duration_s}]")
            if not (20.0 <= b - a <= 30.0):
                raise ScriptError(f"fall trial ({a}, {b}) must last 20-30 s")
        margin = 1.5
        for t in self.falls:
            if not (margin <= t <= self.duration_s - margin):
                raise ScriptError(f"fall at {t} s too close to the recording edges")
            if not any(a <= t <= b for a, b in self.fall_trials):
                raise ScriptError(f"fall at {t} s is outside every fall trial")
        for d in self.drops:
            if not (margin <= d["t_s"] <= self.duration_s - margin):
                raise ScriptError(f"drop at {d['t_s']} s too close to the recording edges")
        for t in self.squats:
            if not (margin <= t <= self.duration_s - margin):
                raise ScriptError(f"squat at {t} s too close to the recording edges")
        events = sorted(self.falls)
        if any(b - a < 5.0 for a, b in zip(events, events[1:])):
            raise ScriptError("falls must be at least 5 s apart")
        if abs(self.env.drift_alpha) >= 0.01:
            raise ScriptError("drift exceeds the clock-skew bound")

    def to_dict(self) -> dict:
        return asdict(self)


def _spaced_times(rng, lo, hi, n, min_gap):
    """Up to ``n`` sorted times in [lo, hi] with pairwise gaps >= min_gap."""
    out = []
    for _ in range(50 * max(n, 1)):
        if len(out) >= n:
            break
        t = float(rng.uniform(lo, hi))
        if all(abs(t - u) >= min_gap for u in out):
            out.append(t)
    return sorted(out)


def make_script(scenario: str, subject_id: int, session_idx: int = 0, seed: int = 0,
                duration_s: float = 64.0, fall_trials: int | None = None, falls_per_trial: tuple = (2, 3),
                heavy_startle_prob: float = 0.5) -> ScenarioScript:
    """Randomized default schedule for one session.

    Defaults put roughly a fifth of all windows on a fall.
    """
    scenario_code(scenario)
    if fall_trials is None:
        fall_trials = 2 if duration_s >= 64.0 else 1
    rng = np.random.default_rng([seed, subject_id, scenario_code(scenario), session_idx])
    env = Environment(
        delay_s=float(rng.uniform(-0.3, 0.3)),
        drift_alpha=float(rng.uniform(-3e-4, 3e-4)),
        ring_hz=float(rng.uniform(18.0, 30.0)),
        ring_decay_s=float(rng.uniform(0.2, 0.6)),
        water_noise=float(rng.uniform(0.005, 0.012)),
    )
    subject = SubjectProfile.for_subject(subject_id, seed)

    trials = []
    lengths = rng.uniform(20.0, 30.0, size=fall_trials)
    free = duration_s - float(lengths.sum())
    if free < 4.0:
        raise ScriptError("session too short for the requested fall trials")
    gaps = rng.dirichlet(np.ones(fall_trials + 1)) * (free - 4.0) + 4.0 / (fall_trials + 1)
    t = float(gaps[0])
    for k in range(fall_trials):
        trials.append((t, t + float(lengths[k])))
        t += float(lengths[k]) + float(gaps[k + 1])

    falls = []
    for a, b in trials:
        n = int(rng.integers(falls_per_trial[0], falls_per_trial[1] + 1))
        falls += _spaced_times(rng, max(a + 2.0, 2.0), min(b - 2.0, duration_s - 2.0), n, 8.0)

    def clear_of_falls(t, gap):
        return all(abs(t - f) >= gap for f in falls)

    drops, squats = [], []
    if scenario in ("light_drop", "heavy_drop"):
        cands = _spaced_times(rng, 2.0, duration_s - 2.0, 12, 3.5)
        for t in cands:
            if not clear_of_falls(t, 4.0):
                continue
            if scenario == "light_drop":
                drops.append({"t_s": t, "amplitude": float(rng.uniform(0.08, 0.3)), "startle": False})
            else:
                drops.append({"t_s": t, "amplitude": float(rng.uniform(0.5, 1.1)) * subject.fall_impact,
                              "startle": bool(rng.random() < heavy_startle_prob)})
    if scenario == "squatting":
        for t in _spaced_times(rng, 2.0, duration_s - 2.0, 10, 4.5):
            if clear_of_falls(t, 5.0):
                squats.append(t)

    script = ScenarioScript(scenario, duration_s, f"s{subject_id:02d}_{scenario}_{session_idx}",
                            subject_id, trials, sorted(falls), drops, squats, subject, env)
    script.validate()
    return script
