import numpy as np
import pytest

from lungsound.audio_io import CLIP_LENGTH, RawRecording, StandardClip, standardize
from lungsound.augmentation import (
    AugmentPolicy,
    add_noise,
    augment,
    draw_plan,
    make_rng,
    pitch_shift,
    time_stretch,
)

from conftest import sine


def _clip(x, stage="zscored"):
    return standardize(RawRecording(np.asarray(x)[None], 16000), stage=stage)


def _peak_hz(x):
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x))))
    k = np.argmax(spec)
    # parabolic refinement on the log magnitude
    a, b, c = np.log(spec[k - 1:k + 2] + 1e-300)
    off = 0.5 * (a - c) / (a - 2 * b + c)
    return (k + off) * 16000 / len(x)


def _rms(a, b):
    return np.sqrt(np.mean((a - b) ** 2))


def test_identity_stretch():
    clip = _clip(sine(440))
    assert _rms(time_stretch(clip, 1.0).samples, clip.samples) < 1e-3


def test_stretch_keeps_pitch():
    out = time_stretch(_clip(sine(440)), 1.1)
    # the stretched tone fills 64000/1.1 samples; look only there
    assert _peak_hz(out.samples[:58000]) == pytest.approx(440, rel=0.01)


def test_stretch_moves_impulse_marker():
    x = np.zeros(CLIP_LENGTH)
    x[32000] = 1.0
    out = time_stretch(StandardClip(x, "peak_normalized"), 1.1)
    # phase-vocoder smearing spreads the marker over about one analysis window
    assert abs(int(np.argmax(np.abs(out.samples))) - 32000 / 1.1) <= 256


def test_stretch_hard_limits():
    clip = _clip(sine(440))
    for rate in (0.49, 2.01):
        with pytest.raises(ValueError):
            time_stretch(clip, rate)


def test_identity_pitch_shift():
    clip = _clip(sine(440))
    assert _rms(pitch_shift(clip, 0.0).samples, clip.samples) < 1e-3


def test_pitch_up_two_semitones():
    out = pitch_shift(_clip(sine(440)), 2.0)
    assert out.samples.shape == (CLIP_LENGTH,)
    assert _peak_hz(out.samples) == pytest.approx(440 * 2 ** (2 / 12), rel=0.01)


def test_pitch_round_trip():
    out = pitch_shift(pitch_shift(_clip(sine(440)), -2.0), 2.0)
    assert _peak_hz(out.samples) == pytest.approx(440, rel=0.01)


def test_pitch_out_of_range():
    with pytest.raises(ValueError):
        pitch_shift(_clip(sine(440)), 2.5)


def test_noise_variance_at_30db_on_unit_power():
    x = np.sqrt(2) * sine(440)  # unit power
    out = add_noise(StandardClip(x, "zscored"), 30.0, make_rng(0))
    assert np.var(out.samples - x) == pytest.approx(1e-3, rel=1e-2)
    assert np.mean((out.samples - x) ** 2) == pytest.approx(1e-3, rel=1e-12)


@pytest.mark.parametrize("snr", [15.0, 22.5, 30.0])
def test_noise_empirical_snr(snr):
    clip = _clip(sine(300) + 0.3 * sine(1200))
    out = add_noise(clip, snr, make_rng(5))
    noise = out.samples - clip.samples
    measured = 10 * np.log10(np.mean(clip.samples ** 2) / np.mean(noise ** 2))
    assert measured == pytest.approx(snr, abs=0.5)


def test_noise_deterministic_for_seed():
    clip = _clip(sine(300))
    a = add_noise(clip, 20.0, make_rng(9, 1, 2))
    b = add_noise(clip, 20.0, make_rng(9, 1, 2))
    assert np.array_equal(a.samples, b.samples)


def test_noise_on_silence_rejected():
    with pytest.raises(ValueError):
        add_noise(StandardClip(np.zeros(CLIP_LENGTH)), 20.0, make_rng(0))


def test_zero_probability_policy_is_identity():
    clip = _clip(sine(440))
    policy = AugmentPolicy(p_stretch=0, p_pitch=0, p_noise=0)
    out, plan = augment(clip, policy, make_rng(3))
    assert out is clip
    assert plan == {"stretch": None, "pitch": None, "noise": None}


def test_augment_deterministic_and_valid():
    clip = _clip(sine(440) + 0.2 * sine(900))
    policy = AugmentPolicy(p_stretch=1, p_pitch=1, p_noise=1)
    a, plan_a = augment(clip, policy, make_rng(11, 4, 7))
    b, plan_b = augment(clip, policy, make_rng(11, 4, 7))
    assert plan_a == plan_b
    assert np.array_equal(a.samples, b.samples)
    assert a.samples.shape == (CLIP_LENGTH,)
    assert a.stage == "zscored"
    assert abs(a.samples.mean()) < 1e-6
    assert abs(a.samples.var() - 1) < 1e-5


def test_application_frequency_monte_carlo():
    policy = AugmentPolicy(p_stretch=0.3, p_pitch=0.5, p_noise=0.8)
    rng = make_rng(2024)
    plans = [draw_plan(policy, rng) for _ in range(10000)]
    for key, p in (("stretch", 0.3), ("pitch", 0.5), ("noise", 0.8)):
        frac = np.mean([pl[key] is not None for pl in plans])
        assert frac == pytest.approx(p, abs=0.02)
    rates = [pl["stretch"] for pl in plans if pl["stretch"] is not None]
    assert 0.9 <= min(rates) and max(rates) <= 1.1


def test_substreams_independent_of_draw_order():
    first = make_rng(7, 3, 10).random(4)
    make_rng(7, 3, 9).random(100)
    assert np.array_equal(first, make_rng(7, 3, 10).random(4))
    assert not np.array_equal(first, make_rng(7, 3, 11).random(4))


def test_policy_validation_and_defaults():
    p = AugmentPolicy()
    assert (p.stretch_range, p.pitch_range_semitones, p.snr_range_db) == ((0.9, 1.1), (-2.0, 2.0), (15.0, 30.0))
    with pytest.raises(ValueError):
        AugmentPolicy(p_noise=1.5)
