"""Synthetic bathroom recordings: triaxial floor vibration at 200 Hz and radar detection frames at 12.5 Hz.

Physical stand-ins: impacts excite a damped structural ring, walking produces
quasi-periodic footfalls and a moving radar cluster, a fall is a rapid range
descent followed by a strong impact, an object drop is an impact without the
body descent.  The radar stream lags the vibration clock by
``delay_s + drift_alpha * t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..signal.recording import Recording
from ..signal.series import RadarFrame, RadarFrameSet
from .scenarios import ScenarioScript

FS_VIB = 200.0
FS_STATE = 100.0
RADAR_HZ = 12.5
GAP_RANGE = (0.05, 0.3)       # descent end -> impact
DESCENT_RANGE = (0.5, 1.0)


@dataclass
class FallEvent:
    impact_s: float
    descent_start_s: float
    descent_end_s: float


class _Body:
    """Person trajectory sampled on a 100 Hz true-time grid."""

    def __init__(self, n: int):
        self.present = np.zeros(n, dtype=bool)
        self.r = np.full(n, 2.0)
        self.v_mod = np.zeros(n)        # additive radial-velocity modulation (gait)
        self.spread_r = np.full(n, 0.12)
        self.spread_v = np.full(n, 0.08)
        self.splash = np.zeros(n)       # radar energy burst at body impacts

    def velocity(self) -> np.ndarray:
        return np.gradient(self.r, 1.0 / FS_STATE) + self.v_mod


def _ramp(x):
    """Smooth 0 -> 1 transition on [0, 1]."""
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _walk_path(t, speed, lo=1.0, hi=3.0, phase=0.0):
    span = hi - lo
    s = (speed * t / span + phase) % 2.0
    return lo + span * np.where(s < 1.0, s, 2.0 - s)


def _base_activity(script: ScenarioScript, rng, t: np.ndarray, body: _Body) -> list:
    """Fill the background trajectory; returns footfall (time, amplitude) pairs."""
    sc, subj = script.scenario, script.subject
    steps = []
    if sc in ("walking", "bent_walk", "wall_walk"):
        speed = subj.walk_speed * {"walking": 1.0, "bent_walk": 0.7, "wall_walk": 0.5}[sc]
        step_hz = subj.step_hz * {"walking": 1.0, "bent_walk": 0.85, "wall_walk": 0.75}[sc]
        amp = {"walking": 0.06, "bent_walk": 0.045, "wall_walk": 0.035}[sc]
        body.present[:] = True
        pause = np.zeros(t.size, dtype=bool)
        if sc == "wall_walk":
            # pauses while leaning on the wall
            pause = np.sin(2 * np.pi * t / 9.0 + rng.uniform(0, 6)) > 0.6
        t_eff = np.cumsum(~pause) / FS_STATE
        body.r = _walk_path(t_eff, speed, phase=float(rng.uniform(0, 2)))
        phase0 = float(rng.uniform(0, 1.0 / step_hz))
        tt = phase0
        while tt < t[-1]:
            steps.append((tt, amp * float(rng.uniform(0.7, 1.3))))
            tt += (1.0 / step_hz) * float(rng.uniform(0.9, 1.1)) * (1.4 if sc == "wall_walk" else 1.0)
        # gait speed peaks at heel strike regardless of walking direction
        heading = np.sign(np.gradient(body.r)) + (np.gradient(body.r) == 0)
        body.v_mod = np.where(pause, 0.0, 0.3 * speed * heading * np.cos(2 * np.pi * step_hz * (t - phase0)))
        if sc == "bent_walk":
            body.spread_r[:] = 0.18
        if sc == "wall_walk":
            steps = [(s, a) for s, a in steps if not pause[min(int(s * FS_STATE), len(t) - 1)]]
    elif sc in ("standing", "squatting", "light_drop", "heavy_drop"):
        body.present[:] = True
        r0 = float(rng.uniform(1.3, 2.6))
        sway = 0.03 if sc in ("standing", "squatting") else 0.15
        body.r = r0 + sway * np.sin(2 * np.pi * t / float(rng.uniform(4.0, 8.0)))
        if sc in ("light_drop", "heavy_drop"):
            # shuffling chores: small irregular motion keeps the body non-static
            body.v_mod = 0.2 * np.sin(2 * np.pi * t * float(rng.uniform(0.3, 0.6)))
    elif sc == "empty":
        for a, b in script.fall_trials:
            sel = (t >= a) & (t <= b)
            body.present[sel] = True
            body.r[sel] = _walk_path(t[sel] - a, 0.3, lo=1.5, hi=2.5)
    return steps


def _apply_fall(body: _Body, t, impact, descent_s, gap, drop_m, rng) -> FallEvent:
    d_end = impact - gap
    d_start = d_end - descent_s
    lie_s = float(rng.uniform(3.0, 5.0))
    rise_s = float(rng.uniform(1.2, 2.0))
    r_before = float(np.interp(d_start, t, body.r))
    r_floor = max(r_before - drop_m, 0.3)
    r_after = float(np.interp(impact + lie_s + rise_s, t, body.r))
    seg = (t >= d_start) & (t <= impact + lie_s + rise_s)
    tt = t[seg]
    # accelerating descent; the last 15% of the drop is covered during the gap
    r_gap = r_before + 0.85 * (r_floor - r_before)
    prof = np.where(
        tt < d_end, r_before + (r_gap - r_before) * ((tt - d_start) / descent_s) ** 2,
        np.where(tt < impact, r_gap + (r_floor - r_gap) * np.clip((tt - d_end) / gap, 0, 1),
                 np.where(tt < impact + lie_s, r_floor,
                          r_floor + (r_after - r_floor) * _ramp((tt - impact - lie_s) / rise_s))))
    body.r[seg] = prof
    body.present[seg] = True
    body.v_mod[seg] = 0.0
    lying = seg & (t >= impact)
    body.spread_r[lying] = 0.3
    # post-impact limb motion and the impact reflection burst
    dt = t - impact
    burst = np.where(dt >= 0, np.exp(-np.maximum(dt, 0) / 0.45), np.exp(-np.maximum(-dt, 0) / 0.05))
    body.splash += 3.0 * burst
    rolling = (dt >= 0) & (dt < 3.0)
    body.v_mod[rolling] += 1.8 * np.exp(-dt[rolling] / 0.8) * np.cos(2 * np.pi * 1.2 * dt[rolling])
    return FallEvent(impact, d_start, d_end)


def _apply_startle(body: _Body, t, t_drop, rng):
    """Jerk away from a falling object: a fast range increase (never a descent) with a reflection burst."""
    start = t_drop + float(rng.uniform(-0.15, 0.1))
    dur = float(rng.uniform(0.4, 0.7))
    step = float(rng.uniform(0.3, 0.6))
    dt = t - start
    body.r = body.r + step * _ramp(dt / dur)
    burst = np.where(dt >= 0, np.exp(-np.maximum(dt, 0) / 0.35), np.exp(-np.maximum(-dt, 0) / 0.05))
    body.splash += 2.0 * burst
    wobble = (dt >= 0) & (dt < 2.0)
    body.v_mod[wobble] += 1.2 * np.exp(-dt[wobble] / 0.6) * np.cos(2 * np.pi * 1.5 * dt[wobble])


def _apply_squat(body: _Body, t, bottom, drop_m, rng):
    down = float(rng.uniform(1.0, 1.6))
    hold = float(rng.uniform(1.0, 2.0))
    up = float(rng.uniform(1.0, 1.6))
    r0 = float(np.interp(bottom - down, t, body.r))
    seg = (t >= bottom - down) & (t <= bottom + hold + up)
    tt = t[seg]
    prof = np.where(tt < bottom, r0 - drop_m * _ramp((tt - bottom + down) / down),
                    np.where(tt < bottom + hold, r0 - drop_m,
                             r0 - drop_m + drop_m * _ramp((tt - bottom - hold) / up)))
    body.r[seg] = prof


def _ring(n, fs, t0, amp, direction, f_ring, decay, rng, sharp=1.0):
    """Damped triaxial ringing starting at t0; returns (start_idx, block)."""
    i0 = int(np.ceil(t0 * fs))
    length = min(int(fs * decay * 6) + 1, max(n - i0, 0))
    if length <= 0:
        return i0, np.zeros((0, 3))
    tau = (i0 + np.arange(length)) / fs - t0
    env = np.exp(-tau / decay)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    detune = rng.uniform(-1.0, 1.0, size=3)
    block = np.stack([np.sin(2 * np.pi * (f_ring + detune[c]) * tau + phases[c]) for c in range(3)], axis=1)
    block *= env[:, None] * direction[None, :] * amp
    # broadband onset transient
    block += sharp * amp * np.exp(-tau / 0.015)[:, None] * direction[None, :] * rng.choice([-1, 1], size=3)
    return i0, block


def _impact_direction(rng, vertical=0.85):
    d = np.abs(rng.normal(0, 1, size=3))
    d[2] = vertical * 2.0 + d[2] * 0.3
    return d / np.linalg.norm(d)


def generate_scenario(script: ScenarioScript, rng_seed: int = 0) -> Recording:
    """Render a script into a recording (vibration clock = true time)."""
    script.validate()
    rng = np.random.default_rng([rng_seed, *script.session_id.encode()])
    env, subj = script.env, script.subject
    dur = script.duration_s
    t = np.arange(int(round(dur * FS_STATE)) + 1) / FS_STATE
    body = _Body(t.size)
    steps = _base_activity(script, rng, t, body)

    # vibration events: (time, amplitude, direction, sharpness)
    impacts = []
    for s, a in steps:
        impacts.append((s, a, _impact_direction(rng, 0.9), 0.5))

    falls = []
    for impact in script.falls:
        descent = float(rng.uniform(*DESCENT_RANGE))
        gap = float(rng.uniform(*GAP_RANGE))
        falls.append(_apply_fall(body, t, impact, descent, gap, subj.fall_drop_m, rng))
        impacts = [e for e in impacts if abs(e[0] - impact) > 1.0 and not (impact < e[0] < impact + 7.0)]
        impacts.append((impact, subj.fall_impact * float(rng.uniform(0.85, 1.15)),
                        _impact_direction(rng, 0.7), 1.0))

    for d in script.drops:
        impacts.append((d["t_s"], d["amplitude"], _impact_direction(rng, 0.95), 1.2))
        if d.get("startle"):
            _apply_startle(body, t, d["t_s"], rng)

    for s in script.squats:
        _apply_squat(body, t, s, subj.squat_drop_m, rng)
        impacts.append((s, float(rng.uniform(0.02, 0.06)), _impact_direction(rng, 0.9), 0.3))

    vib = _render_vibration(dur, env, impacts, rng)
    radar = _render_radar(script, t, body, rng)

    labels = []
    for trial in script.fall_trials:
        labels.append({"start_s": round(trial[0], 4), "end_s": round(trial[1], 4), "class": "fall_trial"})
    for f in falls:
        labels.append({"start_s": round(f.impact_s - 0.25, 4), "end_s": round(f.impact_s + 0.25, 4),
                       "class": "fall", "descent_start_s": round(f.descent_start_s, 4),
                       "descent_end_s": round(f.descent_end_s, 4)})
    for d in script.drops:
        labels.append({"start_s": round(d["t_s"] - 0.25, 4), "end_s": round(d["t_s"] + 0.25, 4),
                       "class": "heavy_drop" if d["amplitude"] >= 0.4 else "light_drop"})
    for s in script.squats:
        labels.append({"start_s": round(s - 0.25, 4), "end_s": round(s + 0.25, 4), "class": "squat"})
    labels.sort(key=lambda l: (l["start_s"], l["class"]))

    meta = {
        "schema_version": 1,
        "session_id": script.session_id,
        "scenario": script.scenario,
        "fs_vibration_hz": FS_VIB,
        "radar_frame_hz": RADAR_HZ,
        "water_on": bool(env.water_on),
        "subject_id": int(script.subject_id),
        "seed": int(rng_seed),
    }
    return Recording(meta, vib, radar, labels)


def _render_vibration(dur, env, impacts, rng) -> np.ndarray:
    n = int(round(dur * FS_VIB)) + 1
    x = rng.normal(0.0, env.vib_noise, size=(n, 3))
    if env.water_on:
        x += rng.normal(0.0, env.water_noise, size=(n, 3))
    for t0, amp, direction, sharp in sorted(impacts, key=lambda e: e[0]):
        i0, block = _ring(n, FS_VIB, t0, amp, direction, env.ring_hz, env.ring_decay_s, rng, sharp)
        x[i0:i0 + len(block)] += block
    return x.astype(np.float32).astype(np.float64)


def _render_radar(script, t, body: _Body, rng) -> RadarFrameSet:
    env, subj = script.env, script.subject
    dur = script.duration_s
    n_frames = int(np.floor(dur * RADAR_HZ)) + 1
    stamps = np.arange(n_frames) / RADAR_HZ + rng.uniform(-0.002, 0.002, size=n_frames)
    stamps[0] = 0.0
    stamps = np.clip(np.maximum.accumulate(stamps), 0, dur)
    stamps = np.unique(np.round(stamps, 6))

    clutter_r = rng.uniform(0.5, 3.6, size=6)
    clutter_i = rng.uniform(8.0, 20.0, size=6)
    vel = body.velocity()

    frames = []
    for ts in stamps:
        tau = (ts - env.delay_s) / (1.0 + env.drift_alpha)    # true scene time
        pts = []
        # static furniture and walls
        pts.append(np.column_stack([clutter_r, np.zeros(6), clutter_i * rng.uniform(0.98, 1.02, size=6)]))
        # weak detections forming the noise floor (Rayleigh amplitudes)
        k = int(rng.poisson(env.radar_noise_points))
        pts.append(np.column_stack([rng.uniform(0.3, 4.0, k), rng.uniform(-2.0, 2.0, k),
                                    rng.rayleigh(0.5, k)]))
        if env.water_on:
            k = int(rng.poisson(env.water_points))
            pts.append(np.column_stack([rng.uniform(1.6, 2.4, k), rng.normal(0, 0.8, k),
                                        rng.uniform(0.3, 1.2, k)]))
        if 0.0 <= tau <= t[-1]:
            idx = int(round(tau * FS_STATE))
            if body.present[idx]:
                k = int(rng.integers(8, 15))
                splash = body.splash[idx]
                sv = body.spread_v[idx] + 0.15 * min(splash, 1.0)
                r = body.r[idx] + rng.normal(0, body.spread_r[idx], k)
                v = vel[idx] + rng.normal(0, sv, k)
                inten = subj.body_intensity * (1.0 + 0.6 * splash) * rng.uniform(0.7, 1.3, k)
                pts.append(np.column_stack([np.maximum(r, 0.1), v, inten]))
        frame = np.concatenate(pts, axis=0)
        frame = frame[rng.permutation(len(frame))]
        frames.append(RadarFrame(float(ts), frame))
    return RadarFrameSet(frames)


def fall_events(rec: Recording) -> list[FallEvent]:
    return [FallEvent(0.5 * (l["start_s"] + l["end_s"]), l["descent_start_s"], l["descent_end_s"])
            for l in rec.labels if l["class"] == "fall"]
