"""Mel-spectrogram and 70-dim handcrafted descriptors of a standardized clip."""

import csv
import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.fft import dct

from .audio_io import CLIP_LENGTH, SAMPLE_RATE, peak_normalize

N_FFT = 1024
HOP = 256
N_BINS = N_FFT // 2 + 1  # 513
N_FRAMES = (CLIP_LENGTH - N_FFT) // HOP + 1  # 247
N_MELS = 128
N_MFCC = 20
N_CHROMA = 12
FMIN, FMAX = 20.0, 8000.0
DB_FLOOR = 1e-10
CHROMA_MIN_HZ = 32.0

PITCH_CLASSES = ("A", "A#", "B", "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#")

FEATURE_NAMES = tuple(
    [f"mfcc_mean_{i}" for i in range(N_MFCC)]
    + [f"mfcc_std_{i}" for i in range(N_MFCC)]
    + ["zcr_mean", "zcr_std", "centroid_mean", "centroid_std", "bandwidth_mean", "bandwidth_std"]
    + [f"chroma_mean_{p}" for p in PITCH_CLASSES]
    + [f"chroma_std_{p}" for p in PITCH_CLASSES]
)
N_HANDCRAFTED = len(FEATURE_NAMES)  # 70


@dataclass
class Spectrogram:
    magnitudes: np.ndarray  # (513, T)
    bin_hz: np.ndarray
    frame_times: np.ndarray


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (128, T)
    mel_centers_hz: np.ndarray


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def hamming_window():
    w = signal.get_window("hamming", N_FFT)  # periodic
    w.setflags(write=False)
    return w


def bin_frequencies():
    return np.arange(N_BINS) * SAMPLE_RATE / N_FFT


def _frames(x):
    n = (len(x) - N_FFT) // HOP + 1
    idx = np.arange(N_FFT)[None, :] + HOP * np.arange(n)[:, None]
    return x[idx]  # (T, N_FFT)


def stft(clip):
    """Magnitude STFT, Hamming window 1024, hop 256, frames start at sample 0."""
    x = clip.samples if hasattr(clip, "samples") else np.asarray(clip, dtype=np.float64)
    spec = np.abs(np.fft.rfft(_frames(x) * hamming_window(), axis=1)).T
    times = np.arange(spec.shape[1]) * HOP / SAMPLE_RATE
    return Spectrogram(spec, bin_frequencies(), times)


def _triangle_cdf(x, lo, c, hi):
    """Integral from -inf to x of the unit-peak triangle on (lo, c, hi)."""
    x = np.clip(x, lo, hi)
    rising = (np.minimum(x, c) - lo) ** 2 / (2 * (c - lo))
    falling = ((hi - c) ** 2 - (hi - np.maximum(x, c)) ** 2) / (2 * (hi - c))
    return rising + falling


@lru_cache(maxsize=None)
def mel_filterbank():
    """(128, 513) triangular mel weights, each bin weighted by the triangle's mean over the bin's cell.

    Averaging over the bin cell (instead of sampling at the bin centre) keeps
    the narrow low-frequency triangles from coming out empty.
    """
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(FMIN), hz_to_mel(FMAX), N_MELS + 2))
    df = SAMPLE_RATE / N_FFT
    f = bin_frequencies()
    lo_cell, hi_cell = f - df / 2, f + df / 2
    fb = np.empty((N_MELS, N_BINS))
    for m in range(N_MELS):
        lo, c, hi = edges_hz[m:m + 3]
        fb[m] = (_triangle_cdf(hi_cell, lo, c, hi) - _triangle_cdf(lo_cell, lo, c, hi)) / df
    fb.setflags(write=False)
    return fb


def mel_centers_hz():
    return mel_to_hz(np.linspace(hz_to_mel(FMIN), hz_to_mel(FMAX), N_MELS + 2))[1:-1]


def log_mel_energies(power):
    """10*log10 of mel-projected power, floored at 1e-10."""
    return 10.0 * np.log10(np.maximum(mel_filterbank() @ power, DB_FLOOR))


def _zscore_matrix(m):
    sd = m.std()
    if sd == 0:
        return np.zeros_like(m)
    return (m - m.mean()) / sd


def mel_spectrogram(clip):
    power = stft(clip).magnitudes ** 2
    return MelSpectrogram(_zscore_matrix(log_mel_energies(power)), mel_centers_hz())


# -------------------------------------------------------------- handcrafted


@lru_cache(maxsize=None)
def _chroma_map():
    f = bin_frequencies()
    cmap = np.zeros((N_CHROMA, N_BINS))
    ok = f >= CHROMA_MIN_HZ
    pc = np.mod(np.round(12 * np.log2(f[ok] / 440.0)).astype(int), 12)
    cmap[pc, np.nonzero(ok)[0]] = 1.0
    cmap.setflags(write=False)
    return cmap


def mfcc(power):
    """Orthonormal DCT-II of the log-mel energies, coefficients 0..19, shape (20, T)."""
    return dct(log_mel_energies(power), type=2, norm="ortho", axis=0)[:N_MFCC]


def zero_crossing_rate(x):
    """Per-frame fraction of adjacent sample pairs whose sign differs (0 counts as positive)."""
    s = np.signbit(_frames(x))
    return np.mean(s[:, 1:] != s[:, :-1], axis=1)


def spectral_moments(mag):
    """Magnitude-weighted centroid and spread per frame; silent frames give 0."""
    f = bin_frequencies()[:, None]
    total = mag.sum(axis=0)
    safe = np.where(total > 0, total, 1.0)
    centroid = np.where(total > 0, (f * mag).sum(axis=0) / safe, 0.0)
    spread = np.where(total > 0, ((f - centroid) ** 2 * mag).sum(axis=0) / safe, 0.0)
    return centroid, np.sqrt(spread)


def chroma(power):
    c = _chroma_map() @ power
    norm = np.linalg.norm(c, axis=0)
    return np.where(norm > 0, c / np.where(norm > 0, norm, 1.0), 0.0)


def _frame_std(a):
    # shifted by the first frame so exactly-constant rows give exactly 0
    d = a - a[..., :1]
    return np.sqrt(np.maximum(np.mean(d * d, axis=-1) - np.mean(d, axis=-1) ** 2, 0.0))


def handcrafted_vector(clip):
    """70 features: mean and std over frames of MFCC(20), ZCR, centroid, bandwidth, chroma(12).

    The waveform is rescaled to unit peak first, so a z-scored clip and its
    peak-normalized form share spectral-shape features.
    """
    x = peak_normalize(clip.samples if hasattr(clip, "samples") else np.asarray(clip, dtype=np.float64))
    mag = stft(x).magnitudes
    power = mag ** 2
    mf = mfcc(power)
    zcr = zero_crossing_rate(x)
    cen, bw = spectral_moments(mag)
    ch = chroma(power)
    parts = [
        mf.mean(axis=1), _frame_std(mf),
        [zcr.mean(), _frame_std(zcr)],
        [cen.mean(), _frame_std(cen)],
        [bw.mean(), _frame_std(bw)],
        ch.mean(axis=1), _frame_std(ch),
    ]
    return np.concatenate([np.atleast_1d(p) for p in parts])


def extract(clip):
    """(mel 128x247, handcrafted 70) for one clip, both float32."""
    return (
        mel_spectrogram(clip).values.astype(np.float32),
        handcrafted_vector(clip).astype(np.float32),
    )


# ---------------------------------------------------------------- store I/O
#
# features.json: {"format": ..., "mel_shape": [128, 247], "n_hand": 70,
#                 "records": [{"clip_id", "label", "patient_id", "offset"}]}
# features.bin:  per record, 128*247 mel floats (row-major) then 70 hand
#                floats, little-endian float32, records back to back.

STORE_FORMAT = "lungsound-features-v1"


def write_feature_store(directory, records):
    """``records``: iterable of dicts with clip_id, label, patient_id, mel, hand."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    with open(directory / "features.bin", "wb") as fh:
        for r in records:
            mel = np.asarray(r["mel"], dtype="<f4")
            hand = np.asarray(r["hand"], dtype="<f4")
            if mel.shape != (N_MELS, N_FRAMES) or hand.shape != (N_HANDCRAFTED,):
                raise ValueError(f"bad feature shapes for {r['clip_id']}: {mel.shape}, {hand.shape}")
            fh.write(mel.tobytes())
            fh.write(hand.tobytes())
            index.append({
                "clip_id": r["clip_id"],
                "label": r["label"],
                "patient_id": r.get("patient_id"),
                "offset": offset,
            })
            offset += 4 * (mel.size + hand.size)
    meta = {"format": STORE_FORMAT, "mel_shape": [N_MELS, N_FRAMES], "n_hand": N_HANDCRAFTED, "records": index}
    (directory / "features.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def read_feature_store(directory):
    """Returns (index records, mel array (n,128,247), hand array (n,70))."""
    directory = Path(directory)
    meta = json.loads((directory / "features.json").read_text())
    if meta.get("format") != STORE_FORMAT:
        raise ValueError(f"{directory}: not a feature store (format {meta.get('format')!r})")
    rec_len = N_MELS * N_FRAMES + N_HANDCRAFTED
    flat = np.fromfile(directory / "features.bin", dtype="<f4")
    n = len(meta["records"])
    if flat.size != n * rec_len:
        raise ValueError(f"{directory}: features.bin holds {flat.size} floats, expected {n * rec_len}")
    flat = flat.reshape(n, rec_len)
    mel = flat[:, :N_MELS * N_FRAMES].reshape(n, N_MELS, N_FRAMES).astype(np.float32)
    hand = flat[:, N_MELS * N_FRAMES:].astype(np.float32)
    return meta["records"], mel, hand


def write_handcrafted_csv(path, clip_ids, hand):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("clip_id",) + FEATURE_NAMES)
        for cid, row in zip(clip_ids, hand):
            w.writerow([cid] + [repr(float(v)) for v in row])
