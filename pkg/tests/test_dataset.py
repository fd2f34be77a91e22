import filecmp
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fallfusion.data.corpus import load_windows, save_windows
from fallfusion.data.scenarios import SCENARIOS, Environment, ScenarioScript, SubjectProfile, make_script
from fallfusion.data.synth import fall_events, generate_scenario
from fallfusion.data.windows import (CENTER_TOL, L, AugmentConfig, WindowRecord, augment, centered_start,
                                     dominant_frequency, perturb_windows, read_fwin, slice_windows,
                                     split_subjects, window_starts, write_fwin)
from fallfusion.errors import DegenerateInput, InsufficientData, InvalidLabel, SchemaError, ScriptError
from fallfusion.signal.denoise import energy_envelope
from fallfusion.signal.pipeline import node_vibration, preprocess_recording
from fallfusion.signal.radar import (adaptive_threshold, cluster_range_doppler, frames_to_kinematics,
                                     radar_background_subtract)
from fallfusion.signal.recording import read_recording, write_recording
from fallfusion.signal.series import SampleSeries


def streams(n, rng=None):
    rng = rng or np.random.default_rng(0)
    vib = SampleSeries(100.0, 0.0, 0.01 * rng.normal(size=(n, 3)))
    phi = SampleSeries(100.0, 0.0, rng.random((n, 5)))
    return vib, phi, np.full(n, 0.5)


def cut(n, labels=()):
    vib, phi, gamma = streams(n)
    return slice_windows(vib, phi, list(labels), gamma)


def make_record(rng, label=0, subject=0, scenario="walking", t0=0.0):
    return WindowRecord(rng.normal(size=(L, 3)), rng.random((L, 5)), label, float(rng.random()),
                        scenario, t0, subject, f"s{subject}")


# ---------------------------------------------------------------- slice_windows

def test_single_window():
    assert len(cut(256)) == 1


def test_window_starts_1024():
    wins = cut(1024)
    assert [round(w.t0_s * 100) for w in wins] == [0, 128, 256, 384, 512, 640, 768]


def test_too_short():
    with pytest.raises(DegenerateInput):
        cut(255)


@given(st.integers(256, 5000))
def test_window_count_formula(n):
    assert len(window_starts(n)) == (n - 256) // 128 + 1


def centering_oracle(peak, n):
    """Every start that puts the peak within +-16 samples of the window center."""
    return [s for s in range(0, n - L + 1) if s + 112 <= peak <= s + 144]


def test_fall_peak_centering():
    vib, phi, gamma = streams(1024)
    vib.data[400] = [1.0, 1.0, 1.0]
    wins = slice_windows(vib, phi, [(3.98, 4.03)], gamma)
    falls = [w for w in wins if w.label == 1]
    assert falls
    allowed = centering_oracle(400, 1024)
    for w in falls:
        assert round(w.t0_s * 100) in allowed


@given(st.integers(0, 1023), st.integers(0, 1023))
def test_centered_start_is_minimal_valid_shift(peak, start):
    n = 1024
    s = centered_start(peak, start, n)
    valid = centering_oracle(peak, n)
    if valid:
        assert s in valid
        assert abs(s - start) == min(abs(v - start) for v in valid)
    else:
        assert 0 <= s <= n - L


def test_fall_label_rule_overlap_and_peak():
    vib, phi, gamma = streams(2048)
    vib.data[1000] = [2.0, 0.0, 0.0]
    wins = slice_windows(vib, phi, [{"class": "fall", "start_s": 9.75, "end_s": 10.25},
                                    {"class": "heavy_drop", "start_s": 15.0, "end_s": 15.5}], gamma)
    falls = [w for w in wins if w.label]
    assert len(falls) >= 1
    assert all(round(w.t0_s * 100) + 112 <= 1000 <= round(w.t0_s * 100) + 144 for w in falls)
    starts = [w.t0_s for w in wins]
    assert len(starts) == len(set(starts))


def test_weight_is_mean_gamma():
    vib, phi, _ = streams(512)
    gamma = np.linspace(0, 1, 512)
    w = slice_windows(vib, phi, [], gamma)[1]
    assert w.weight == pytest.approx(gamma[128:384].mean())


def test_record_validation(rng):
    with pytest.raises(DegenerateInput):
        WindowRecord(np.zeros((255, 3)), np.zeros((256, 5)), 0, 0.5, "walking", 0.0, 0)
    with pytest.raises(InvalidLabel):
        WindowRecord(np.zeros((256, 3)), np.zeros((256, 5)), 2, 0.5, "walking", 0.0, 0)
    with pytest.raises(InvalidLabel):
        WindowRecord(np.zeros((256, 3)), np.zeros((256, 5)), 0, 1.5, "walking", 0.0, 0)
    with pytest.raises(InvalidLabel):
        WindowRecord(np.zeros((256, 3)), np.zeros((256, 5)), 0, 0.5, "kitchen", 0.0, 0)


# ---------------------------------------------------------------- augment

def test_augment_disabled_is_identity(rng):
    w = make_record(rng)
    out = augment(w, 3, AugmentConfig.disabled())
    np.testing.assert_array_equal(out.vib, w.vib)
    np.testing.assert_array_equal(out.radar, w.radar)


def test_augment_deterministic(rng):
    w = make_record(rng)
    a, b = augment(w, 11, AugmentConfig(1, 1, 1)), augment(w, 11, AugmentConfig(1, 1, 1))
    assert a.vib.tobytes() == b.vib.tobytes() and a.radar.tobytes() == b.radar.tobytes()


def test_stretch_moves_spectral_peak():
    n = 1000                     # long window so the FFT grid resolves the shift
    t = np.arange(n) / 100.0
    x = np.sin(2 * np.pi * 5.0 * t)[:, None].repeat(3, axis=1)
    from fallfusion.data.windows import stretch_window
    y = stretch_window(x, 1.05)
    # analytic: a 5 Hz tone slowed by 1.05 peaks at 5 / 1.05
    assert dominant_frequency(y) == pytest.approx(5 / 1.05, abs=0.1)


def test_stretch_on_standard_window():
    t = np.arange(L) / 100.0
    x = np.sin(2 * np.pi * 5.0 * t)[:, None].repeat(3, axis=1)
    from fallfusion.data.windows import stretch_window
    y = stretch_window(x, 1.05)
    # zero-padded spectrum to read the peak off a fine grid
    spec = np.abs(np.fft.rfft(y[:, 0] - y[:, 0].mean(), 8192))
    f = np.fft.rfftfreq(8192, 0.01)[np.argmax(spec)]
    assert f == pytest.approx(4.76, abs=0.05)


@given(st.integers(0, 2 ** 31), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_augment_preserves_label_and_weight(seed, p1, p2, p3):
    r = np.random.default_rng(seed)
    w = make_record(r, label=int(r.integers(2)))
    out = augment(w, seed, AugmentConfig(p1, p2, p3))
    assert (out.label, out.weight, out.scenario, out.t0_s, out.subject_id) == \
        (w.label, w.weight, w.scenario, w.t0_s, w.subject_id)
    assert out.vib.shape == (L, 3) and np.all(np.isfinite(out.vib))


# ---------------------------------------------------------------- perturbations

def test_perturb_zero_is_identity(rng):
    recs = [make_record(rng) for _ in range(3)]
    for kind in ("time_shift_ms", "radar_dropout_frac", "vib_dropout_frac"):
        for a, b in zip(recs, perturb_windows(recs, kind, 0.0, 1)):
            np.testing.assert_array_equal(a.vib, b.vib)
            np.testing.assert_array_equal(a.radar, b.radar)


def test_vib_dropout_all(rng):
    recs = [make_record(rng) for _ in range(5)]
    out = perturb_windows(recs, "vib_dropout_frac", 1.0, 1)
    assert all(np.all(o.vib == 0) for o in out)
    assert all(np.array_equal(o.radar, r.radar) for o, r in zip(out, recs))


def test_radar_dropout_fraction(rng):
    recs = [make_record(rng) for _ in range(8)]        # 2048 slices
    out = perturb_windows(recs, "radar_dropout_frac", 0.3, 5)
    zeroed = np.concatenate([np.all(o.radar == 0, axis=1) for o in out])
    assert zeroed.size >= 1000
    assert abs(zeroed.mean() - 0.3) <= 0.03


def test_time_shift_bounds(rng):
    x = np.zeros((L, 5), np.float32)
    x[128] = 1.0
    w = WindowRecord(np.zeros((L, 3)), x, 0, 0.5, "walking", 0.0, 0)
    for o in perturb_windows([w] * 20, "time_shift_ms", 150.0, 2):
        peak = np.argmax(o.radar[:, 0])
        assert abs(peak - 128) <= 16
        assert np.all(o.vib == 0)
    assert perturb_windows([w], "time_shift_ms", 150.0, 9)[0].label == 0


# ---------------------------------------------------------------- splits

def test_split_sizes_and_disjoint(rng):
    recs = [make_record(rng, subject=s) for s in range(10) for _ in range(2)]
    m = split_subjects(recs, (0.6, 0.2, 0.2), 0)
    assert (len(m.train), len(m.val), len(m.test)) == (6, 2, 2)
    assert not (m.train & m.val) and not (m.train & m.test) and not (m.val & m.test)
    assert m.to_dict() == split_subjects(recs, (0.6, 0.2, 0.2), 0).to_dict()


def test_split_needs_three_subjects(rng):
    with pytest.raises(InsufficientData):
        split_subjects([make_record(rng, subject=s) for s in (0, 1)])


@given(st.integers(3, 30), st.integers(0, 2 ** 31))
def test_split_subject_independence(n_subj, seed):
    r = np.random.default_rng(seed)
    recs = [make_record(r, subject=s) for s in range(n_subj)]
    m = split_subjects(recs, (0.6, 0.2, 0.2), seed)
    assert m.train | m.val | m.test == set(range(n_subj))
    assert not (m.train & m.val) and not (m.train & m.test) and not (m.val & m.test)
    assert all(r_.subject_id in getattr(m, m.split_of(r_.subject_id)) for r_ in recs)


# ---------------------------------------------------------------- FWIN

def test_fwin_roundtrip(tmp_path, rng):
    recs = [make_record(rng, label=k % 2, subject=k, scenario=SCENARIOS[k % 8], t0=1.28 * k) for k in range(5)]
    p = write_fwin(recs, tmp_path / "w.fwin")
    raw = p.read_bytes()
    assert raw[:4] == b"FWIN"
    magic, version, count, length = struct.unpack_from("<4sHIH", raw)
    assert (version, count, length) == (1, 5, 256)
    assert len(raw) == 12 + 5 * (1 + 1 + 4 + 2 + 8 + 256 * 3 * 4 + 256 * 5 * 4)
    back = read_fwin(p)
    for a, b in zip(recs, back):
        np.testing.assert_array_equal(a.vib, b.vib)
        np.testing.assert_array_equal(a.radar, b.radar)
        assert (a.label, a.scenario, a.subject_id) == (b.label, b.scenario, b.subject_id)
        assert a.weight == pytest.approx(b.weight) and a.t0_s == pytest.approx(b.t0_s, abs=1e-6)


def test_fwin_rejects_bad_files(tmp_path, rng):
    p = write_fwin([make_record(rng)], tmp_path / "w.fwin")
    raw = bytearray(p.read_bytes())
    bad = tmp_path / "bad.fwin"
    bad.write_bytes(b"XWIN" + bytes(raw[4:]))
    with pytest.raises(SchemaError):
        read_fwin(bad)
    bad.write_bytes(bytes(raw[:-10]))
    with pytest.raises(SchemaError):
        read_fwin(bad)


def test_save_and_load_windows_keeps_sessions(tmp_path, rng):
    recs = [make_record(rng, subject=k) for k in range(3)]
    save_windows(recs, tmp_path / "windows.fwin")
    back = load_windows(tmp_path)
    assert [r.session_id for r in back] == [r.session_id for r in recs]


# ---------------------------------------------------------------- generator

def quiet_script(scenario="empty", **kw):
    return ScenarioScript(scenario, 30.0, "quiet", 0, [], [], [], [], SubjectProfile(), Environment(), **kw)


def test_empty_scene_has_no_events():
    script = quiet_script()
    rec = generate_scenario(script, 3)
    e_v = energy_envelope(SampleSeries(rec.fs_vibration_hz, 0.0, rec.vibration)).values
    assert e_v.max() < 5 * script.env.vib_noise_floor()
    cleaned = radar_background_subtract(rec.radar)
    n_clusters = [len(cluster_range_doppler(adaptive_threshold(f.points))) for f in cleaned.frames[8:]]
    assert sum(n_clusters) == 0


def test_fall_descent_precedes_impact():
    rec = generate_scenario(make_script("walking", 1, 0, seed=4), 4)
    vib = node_vibration(rec)
    e_v = energy_envelope(vib).values
    events = fall_events(rec)
    assert events
    for ev in events:
        assert ev.descent_start_s < ev.descent_end_s < ev.impact_s <= ev.descent_end_s + 0.3
        lo, hi = int((ev.impact_s - 1.0) * 100), int((ev.impact_s + 1.0) * 100)
        peak_t = (lo + np.argmax(e_v[lo:hi])) / 100.0
        assert 0 <= peak_t - ev.descent_end_s <= 0.3 + 0.02


def test_heavy_drop_is_impact_without_descent():
    script = make_script("heavy_drop", 2, 0, seed=0)
    rec = generate_scenario(script, 0)
    e_v = energy_envelope(node_vibration(rec)).values
    # per-frame kinematics on the radar clock; frames without a cluster carry no range
    phis = [p for p in frames_to_kinematics(rec.radar) if p.energy > 0]
    t_r = np.array([p.t_s for p in phis])
    r = np.array([p.r_mean for p in phis])
    falls = fall_events(rec)
    fall_peaks = [e_v[int((f.impact_s - 0.3) * 100):int((f.impact_s + 0.3) * 100)].max() for f in falls]
    heavy = [d for d in script.drops if d["amplitude"] >= 0.4]
    assert heavy
    for d in heavy:
        # schedule replay: no fall or squat descent is scheduled anywhere near the drop
        assert all(abs(f.impact_s - d["t_s"]) > 2.0 for f in falls)
        t_radar = d["t_s"] + script.env.delay_s + script.env.drift_alpha * d["t_s"]
        before = r[(t_r >= t_radar - 1.0) & (t_r < t_radar - 0.2)]
        after = r[(t_r > t_radar) & (t_r <= t_radar + 1.0)]
        assert before.size and after.size
        assert np.median(after) > np.median(before) - 0.2
        c = int(d["t_s"] * 100)
        assert 0.3 * np.median(fall_peaks) < e_v[c - 30:c + 30].max() < 2.5 * np.median(fall_peaks)


def test_generator_is_byte_identical(tmp_path):
    script = make_script("squatting", 3, 0, seed=1, duration_s=40.0)
    write_recording(generate_scenario(script, 5), tmp_path / "a")
    write_recording(generate_scenario(script, 5), tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for f in ("meta.json", "vibration.bin", "radar.jsonl", "labels.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_recording_roundtrip_and_schema(tmp_path):
    rec = generate_scenario(make_script("light_drop", 0, 0, duration_s=30.0), 0)
    write_recording(rec, tmp_path / "r")
    back = read_recording(tmp_path / "r")
    np.testing.assert_array_equal(back.vibration, rec.vibration.astype(np.float32))
    assert len(back.radar) == len(rec.radar) and back.labels == rec.labels
    meta = (tmp_path / "r" / "meta.json").read_text().replace('"schema_version": 1', '"schema_version": 2')
    (tmp_path / "r" / "meta.json").write_text(meta)
    with pytest.raises(SchemaError):
        read_recording(tmp_path / "r")


def test_invalid_script():
    with pytest.raises(ScriptError):
        generate_scenario(quiet_script(scenario="garage"), 0)
    bad = make_script("walking", 0, 0)
    bad.falls.append(0.5)
    with pytest.raises(ScriptError):
        generate_scenario(bad, 0)


@given(st.sampled_from(SCENARIOS), st.integers(0, 50), st.integers(0, 3))
def test_every_fall_is_causally_ordered(scenario, subject, seed):
    script = make_script(scenario, subject, 0, seed=seed, duration_s=48.0)
    for ev in fall_events(generate_scenario(script, seed)):
        assert ev.descent_start_s < ev.impact_s


def test_preprocessed_session_windows_are_labeled():
    rec = generate_scenario(make_script("walking", 0, 0, seed=2), 2)
    s = preprocess_recording(rec)
    wins = slice_windows(s.vib, s.phi, s.labels, s.gamma, "walking", 0, "x", e_v=s.e_v)
    assert sum(w.label for w in wins) >= len(fall_events(rec))
    for w in wins:
        if w.label:
            peak = round(w.t0_s * 100) + int(np.argmax(s.e_v.values[round(w.t0_s * 100):round(w.t0_s * 100) + L]))
            assert abs(peak - round(w.t0_s * 100) - 128) <= CENTER_TOL
