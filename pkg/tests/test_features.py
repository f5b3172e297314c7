import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lungsound.audio_io import CLIP_LENGTH, StandardClip
from lungsound.features import (
    FEATURE_NAMES,
    N_FRAMES,
    PITCH_CLASSES,
    bin_frequencies,
    chroma,
    extract,
    hamming_window,
    handcrafted_vector,
    mel_centers_hz,
    mel_filterbank,
    mel_spectrogram,
    mfcc,
    read_feature_store,
    stft,
    write_feature_store,
    write_handcrafted_csv,
)

from conftest import sine


def _clip(x):
    return StandardClip(np.asarray(x, dtype=np.float64), "peak_normalized")


def test_frame_count():
    assert N_FRAMES == (64000 - 1024) // 256 + 1 == 247


def test_silent_stft_shape_and_zeros():
    spec = stft(_clip(np.zeros(CLIP_LENGTH)))
    assert spec.magnitudes.shape == (513, 247)
    assert not np.any(spec.magnitudes)
    assert spec.frame_times[1] == pytest.approx(256 / 16000)


def test_tone_lands_on_bin_64():
    spec = stft(_clip(sine(1000)))
    assert np.all(np.argmax(spec.magnitudes, axis=0) == round(1000 * 1024 / 16000))


def test_stft_matches_direct_dft(rng):
    x = rng.standard_normal(CLIP_LENGTH)
    spec = stft(_clip(x)).magnitudes
    w = hamming_window()
    n = np.arange(1024)
    basis = np.exp(-2j * np.pi * np.outer(np.arange(513), n) / 1024)
    for t in (0, 100, 246):
        frame = x[256 * t:256 * t + 1024] * w
        np.testing.assert_allclose(spec[:, t], np.abs(basis @ frame), rtol=1e-9, atol=1e-9)


def test_windowed_parseval(rng):
    x = rng.standard_normal(CLIP_LENGTH)
    mag = stft(_clip(x)).magnitudes
    w = hamming_window()
    # one-sided bins 1..511 stand for two two-sided bins each
    two_sided = mag[0] ** 2 + mag[-1] ** 2 + 2 * np.sum(mag[1:-1] ** 2, axis=0)
    for t in range(0, 247, 37):
        energy = np.sum((w * x[256 * t:256 * t + 1024]) ** 2)
        assert two_sided[t] / 1024 == pytest.approx(energy, rel=1e-6)


def test_filterbank_shape_and_rows():
    fb = mel_filterbank()
    assert fb.shape == (128, 513)
    assert np.all(fb >= 0)
    assert np.all(fb.sum(axis=1) > 0)
    # adjacent triangles overlap
    assert all(np.any((fb[m] > 0) & (fb[m + 1] > 0)) for m in range(127))
    assert len(mel_centers_hz()) == 128


def test_silent_mel_is_zero():
    mel = mel_spectrogram(_clip(np.zeros(CLIP_LENGTH)))
    assert mel.values.shape == (128, 247)
    assert not np.any(mel.values)


def test_mel_argmax_at_nearest_center():
    mel = mel_spectrogram(_clip(sine(1000))).values
    band = np.bincount(np.argmax(mel, axis=0)).argmax()
    assert band == np.argmin(np.abs(mel_centers_hz() - 1000))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), scale=st.floats(1e-3, 10))
def test_mel_is_zscored(seed, scale):
    x = scale * np.random.default_rng(seed).standard_normal(CLIP_LENGTH)
    v = mel_spectrogram(_clip(x)).values
    assert v.shape == (128, 247)
    assert abs(v.mean()) < 1e-5
    assert abs(v.var() - 1) < 1e-5


def test_handcrafted_layout_golden():
    expected = (
        [f"mfcc_mean_{i}" for i in range(20)]
        + [f"mfcc_std_{i}" for i in range(20)]
        + ["zcr_mean", "zcr_std", "centroid_mean", "centroid_std", "bandwidth_mean", "bandwidth_std"]
        + [f"chroma_mean_{p}" for p in PITCH_CLASSES]
        + [f"chroma_std_{p}" for p in PITCH_CLASSES]
    )
    assert list(FEATURE_NAMES) == expected
    assert len(FEATURE_NAMES) == 70


def test_handcrafted_layout_positions(rng):
    x = rng.standard_normal(CLIP_LENGTH)
    x /= np.abs(x).max()
    v = handcrafted_vector(_clip(x))
    power = stft(_clip(x)).magnitudes ** 2
    mf = mfcc(power)
    np.testing.assert_allclose(v[:20], mf.mean(axis=1), rtol=1e-10)
    np.testing.assert_allclose(v[20:40], mf.std(axis=1), rtol=1e-8)
    ch = chroma(power)
    np.testing.assert_allclose(v[46:58], ch.mean(axis=1), rtol=1e-10)
    np.testing.assert_allclose(v[58:70], ch.std(axis=1), rtol=1e-8, atol=1e-12)


def test_silent_handcrafted_degenerate_values():
    v = handcrafted_vector(_clip(np.zeros(CLIP_LENGTH)))
    names = list(FEATURE_NAMES)
    for k in ("zcr_mean", "zcr_std", "centroid_mean", "centroid_std", "bandwidth_mean", "bandwidth_std"):
        assert v[names.index(k)] == 0
    sigma = [i for i, n in enumerate(names) if "_std" in n]
    assert np.all(v[sigma] == 0)


def test_tone_centroid_and_bandwidth():
    v = handcrafted_vector(_clip(sine(1000)))
    names = list(FEATURE_NAMES)
    assert v[names.index("centroid_mean")] == pytest.approx(1000, abs=20)
    # Hamming main lobe is +-2 bins (+-31 Hz) wide
    assert v[names.index("bandwidth_mean")] < 31.25


def test_square_wave_zcr():
    x = np.sign(sine(500, phase=0.1))
    v = handcrafted_vector(_clip(x))
    assert v[list(FEATURE_NAMES).index("zcr_mean")] == pytest.approx(2 * 500 / 16000, rel=0.05)


@pytest.mark.parametrize("freq", [220.0, 261.63, 440.0, 523.25, 1000.0, 1760.0])
def test_tone_chroma_concentrates(freq):
    power = stft(_clip(sine(freq))).magnitudes ** 2
    mass = chroma(power).mean(axis=1) ** 2
    pc = int(np.round(12 * np.log2(freq / 440))) % 12
    near = mass[[(pc - 1) % 12, pc, (pc + 1) % 12]].sum()
    assert near / mass.sum() >= 0.6


def test_white_noise_mfcc0_dominates():
    hits = 0
    for seed in range(5):
        x = np.random.default_rng(seed).standard_normal(CLIP_LENGTH)
        m = handcrafted_vector(_clip(x / np.abs(x).max()))[:20]
        hits += np.all(np.abs(m[0]) > np.abs(m[1:]))
    assert hits == 5


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), f=st.floats(50, 7000))
def test_handcrafted_ranges(seed, f):
    rng = np.random.default_rng(seed)
    x = sine(f) + 0.3 * rng.standard_normal(CLIP_LENGTH)
    v = handcrafted_vector(_clip(x / np.abs(x).max()))
    names = list(FEATURE_NAMES)
    assert len(v) == 70 and np.all(np.isfinite(v))
    assert all(v[i] >= 0 for i, n in enumerate(names) if "_std" in n)
    assert 0 <= v[names.index("zcr_mean")] <= 1
    fmax = bin_frequencies()[-1]
    assert 0 <= v[names.index("centroid_mean")] <= fmax
    assert 0 <= v[names.index("bandwidth_mean")] <= fmax


def test_zscored_and_peak_stage_share_handcrafted(rng):
    x = rng.standard_normal(CLIP_LENGTH)
    peak = x / np.abs(x).max()
    z = (peak - peak.mean()) / peak.std()
    a = handcrafted_vector(StandardClip(peak, "peak_normalized"))
    b = handcrafted_vector(StandardClip(z, "zscored"))
    names = list(FEATURE_NAMES)
    for k in ("centroid_mean", "bandwidth_mean", "zcr_mean"):
        i = names.index(k)
        assert a[i] == pytest.approx(b[i], rel=1e-2)


def test_feature_store_round_trip(tmp_path, rng):
    records = []
    for i in range(3):
        mel, hand = extract(_clip(rng.uniform(-1, 1, CLIP_LENGTH)))
        records.append({"clip_id": f"c{i}", "label": "COPD", "patient_id": None, "mel": mel, "hand": hand})
    write_feature_store(tmp_path, records)
    index, mel, hand = read_feature_store(tmp_path)
    assert [r["clip_id"] for r in index] == ["c0", "c1", "c2"]
    for i, r in enumerate(records):
        assert np.array_equal(mel[i], r["mel"])
        assert np.array_equal(hand[i], r["hand"])
    assert (tmp_path / "features.bin").stat().st_size == 3 * 4 * (128 * 247 + 70)
    write_handcrafted_csv(tmp_path / "h.csv", [r["clip_id"] for r in records], hand)
    header = (tmp_path / "h.csv").read_text().splitlines()[0].split(",")
    assert header == ["clip_id"] + list(FEATURE_NAMES)
