import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amsloc.ams import DirectionalGainTable
from amsloc.channel import AnchorSpec, ScenarioConfig, WaterGeometry, simulate_capture
from amsloc.dsp import (
    EnvelopeFeature,
    SuppressionParams,
    acoustic_onset,
    detect_chirp,
    detect_em_marker,
    feature_grid,
    first_arrival,
    mix_down,
    normalized_xcorr,
    raw_spectrum_feature,
    suppress_multipath,
)
from amsloc.errors import ConfigurationError, InvalidArgumentError, NotFoundError
from amsloc.waveform import ChirpSpec, interpolate_gain, shape_by_direction, synth_chirp

SPEC = ChirpSpec()  # 0.2 ms, 125 -> 250 kHz
FREQS = np.linspace(50e3, 400e3, 351)


def cosine(a, b):
    return float(np.dot(a, b) / np.linalg.norm(a) / np.linalg.norm(b))


def smooth_table(phase=0.0):
    """Directional gain that varies slowly across the band, plus a 5 us delay."""
    g = (1 + 0.6 * np.cos(2 * np.pi * (FREQS - 125e3) / 100e3 + phase)) \
        * np.exp(-2j * np.pi * FREQS * 5e-6)
    return DirectionalGainTable([0.0], FREQS, g[None, :])


def shaped(table, tail=2000):
    x = np.concatenate([synth_chirp(SPEC), np.zeros(tail)])
    return shape_by_direction(SPEC, table, 0.0, samples=x)


def echo(s, delay_s, gain):
    n = int(round(delay_s * SPEC.sample_rate))
    out = s.copy()
    out[n:] += gain * s[:-n]
    return out


def test_suppressible_delay_threshold():
    assert SuppressionParams(f_cut=35e3).suppressible_delay(SPEC) == 35e3 / (125e3 / 0.2e-3)
    assert SuppressionParams().suppressible_delay(SPEC) == pytest.approx(0.056e-3, abs=1e-18)


def test_cutoff_inequality_enforced():
    with pytest.raises(ConfigurationError) as info:
        SuppressionParams(f_cut=35e3, t_min=50e-6).validate(SPEC)
    assert "35000" in str(info.value) and "31250" in str(info.value)
    SuppressionParams(f_cut=35e3, t_min=60e-6).validate(SPEC)
    with pytest.raises(ConfigurationError):
        SuppressionParams(f_cut=0.0).validate(SPEC)
    with pytest.raises(ConfigurationError):
        SuppressionParams(filter_order=64).validate(SPEC)


@pytest.mark.parametrize("phase", [0.0, 1.0, 2.5])
def test_single_path_envelope_matches_gain(phase):
    table = smooth_table(phase)
    feat = suppress_multipath(shaped(table), SPEC)
    truth = np.abs(interpolate_gain(table, 0.0, feat.freq_grid))
    assert cosine(feat.resampled_spectrum, truth) >= 0.99


@pytest.mark.parametrize("phase", [0.0, 1.0, 2.5, 4.0])
def test_two_path_suppressed_beats_raw(phase):
    table = smooth_table(phase)
    s = shaped(table)
    two = echo(s, 80e-6, 0.9)
    truth = np.abs(interpolate_gain(table, 0.0, feature_grid(SPEC)))
    assert cosine(suppress_multipath(two, SPEC).resampled_spectrum, truth) >= 0.95
    assert cosine(raw_spectrum_feature(two, SPEC).resampled_spectrum, truth) < 0.95


@pytest.mark.parametrize("delay,gain", [(80e-6, 0.7), (60e-6, 0.5), (100e-6, 0.9)])
def test_mixdown_tone_at_k_times_delay(delay, gain):
    s = np.concatenate([synth_chirp(SPEC), np.zeros(600)])
    m = mix_down(echo(s, delay, gain), SPEC)
    spec = np.abs(np.fft.fft(m))
    fr = np.fft.fftfreq(m.size, 1 / SPEC.sample_rate)
    bin_w = SPEC.sample_rate / m.size
    away = np.abs(fr) > 3 * bin_w
    k = int(np.argmax(np.where(away, spec, 0)))
    assert abs(abs(fr[k]) - SPEC.slope * delay) <= 2 * bin_w
    assert spec[0] >= 0.5 * spec.max()  # LOS term at DC


def test_filtered_output_band_limited():
    two = echo(shaped(smooth_table()), 80e-6, 0.7)
    env = suppress_multipath(two, SPEC).envelope
    n = np.fft.fft(env, 8192)
    fr = np.fft.fftfreq(8192, 1 / SPEC.sample_rate)
    assert np.sum(np.abs(n[np.abs(fr) > 35e3]) ** 2) <= 0.01 * np.sum(np.abs(n) ** 2)


def test_far_path_barely_changes_envelope():
    s = shaped(smooth_table(1.0))
    two = echo(s, 80e-6, 0.7)
    three = echo(two, 200e-6, 0.5)  # k * t = 125 kHz > 2 * f_cut
    a = suppress_multipath(two, SPEC).envelope
    b = suppress_multipath(three, SPEC).envelope
    assert np.linalg.norm(b - a) / np.linalg.norm(a) < 0.05


def test_in_phase_variant_real():
    feat = suppress_multipath(shaped(smooth_table()), SPEC, quadrature=False)
    assert not np.iscomplexobj(feat.envelope)


def test_feature_serialization_roundtrip():
    feat = suppress_multipath(shaped(smooth_table()), SPEC)
    back = EnvelopeFeature.from_dict(feat.to_dict())
    assert np.allclose(back.envelope, feat.envelope)
    assert np.allclose(back.resampled_spectrum, feat.resampled_spectrum)
    with pytest.raises(InvalidArgumentError):
        EnvelopeFeature([], [], [])
    with pytest.raises(InvalidArgumentError):
        EnvelopeFeature([1.0], [np.nan], [1.0])


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-3, 1e3))
def test_suppression_homogeneous(c):
    s = echo(shaped(smooth_table(0.5), tail=200), 70e-6, 0.6)
    a = suppress_multipath(s, SPEC)
    b = suppress_multipath(c * s, SPEC)
    assert np.allclose(b.envelope, c * a.envelope, rtol=1e-9, atol=1e-12 * c)
    assert cosine(a.resampled_spectrum, b.resampled_spectrum) == pytest.approx(1.0, abs=1e-12)


# --- detection ----------------------------------------------------------------


def test_detect_clean_offset():
    x = np.concatenate([np.zeros(777), synth_chirp(SPEC), np.zeros(300)])
    d = detect_chirp(x, SPEC)
    assert d.index == 777
    assert d.score == pytest.approx(1.0, abs=1e-9)


def test_detect_noise_only_not_found():
    x = np.random.default_rng(0).standard_normal(3000)
    with pytest.raises(NotFoundError):
        detect_chirp(x, SPEC, floor=0.5)
    with pytest.raises(InvalidArgumentError):
        normalized_xcorr(np.zeros(10), synth_chirp(SPEC))


def test_detect_within_one_sample_at_10db():
    rng = np.random.default_rng(2024)
    chirp = synth_chirp(SPEC)
    sigma = np.sqrt(np.mean(chirp ** 2) / 10.0)
    misses = 0
    for _ in range(500):
        off = int(rng.integers(50, 500))
        x = np.zeros(1200)
        x[off:off + chirp.size] = chirp
        x += rng.normal(0, sigma, x.size)
        misses += abs(detect_chirp(x, SPEC).index - off) > 1
    assert misses == 0


def scenario(rng_m, snr=None, ams=None):
    return ScenarioConfig(
        WaterGeometry(10.0), [AnchorSpec((0.0, 0.0, 5.0), ams=ams)], [(0.0, rng_m, 0.0, 5.0)],
        noise_snr_db=snr, em_atten_db=8.0, max_reflections=0)


@pytest.mark.parametrize("r", [0.3, 1.0, 2.0, 20.0])
def test_em_marker_exact_noiseless(r, opt_cfg):
    scn = scenario(r, ams=opt_cfg)
    cap = simulate_capture(scn)
    em = detect_em_marker(cap, scn.chirp)
    # at 0.3 m the dispersed arrival starts inside the marker's chirp window
    tol = 1 if r / 1500 < 1.5 * scn.chirp.duration else 0
    assert abs(em.index - cap.em_marker_index) <= tol
    onset = acoustic_onset(cap, scn.chirp, em)
    assert onset > em.index
    assert (onset - em.index) / cap.sample_rate == pytest.approx(r / 1500, abs=2 / cap.sample_rate)


def test_em_precedes_acoustic_in_noise(opt_cfg):
    rng = np.random.default_rng(9)
    for k in range(10):
        r = float(rng.uniform(0.5, 9.0))
        scn = scenario(r, snr=15.0, ams=opt_cfg)
        cap = simulate_capture(scn, seed=k)
        em = detect_em_marker(cap, scn.chirp)
        assert em.index == cap.em_marker_index
        assert acoustic_onset(cap, scn.chirp, em) > em.index


def test_20m_offset():
    scn = scenario(20.0)
    cap = simulate_capture(scn)
    em = detect_em_marker(cap, scn.chirp)
    dt = (acoustic_onset(cap, scn.chirp, em) - em.index) / cap.sample_rate
    assert dt * 1e3 == pytest.approx(13.333, abs=1 / cap.sample_rate * 1e3)


def test_first_arrival_without_marker():
    scn = ScenarioConfig(WaterGeometry(10.0), [AnchorSpec((0.0, 0.0, 5.0))],
                         [(0.0, 1.2, 0.0, 5.0)], noise_snr_db=None, em_atten_db=None,
                         max_reflections=0)
    cap = simulate_capture(scn)
    onset = first_arrival(cap, scn.chirp, expect_marker=False)
    assert onset == pytest.approx(cap.em_marker_index + 1600, abs=1.0)
