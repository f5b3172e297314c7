"""WAV decoding, resampling to 16 kHz, fixed-length standardization and QC."""

import json
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal

SAMPLE_RATE = 16000
CLIP_SECONDS = 4
CLIP_LENGTH = SAMPLE_RATE * CLIP_SECONDS  # 64,000

STAGES = ("peak_normalized", "zscored")

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


class WavDecodeError(ValueError):
    """Malformed RIFF/WAVE content."""


class UnsupportedFormatError(WavDecodeError):
    """Well-formed WAV whose sample encoding is not handled."""


@dataclass
class RawRecording:
    samples: np.ndarray  # (channels, frames), float64
    sample_rate: int

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def channel_count(self):
        return self.samples.shape[0]

    @property
    def n_frames(self):
        return self.samples.shape[1]


@dataclass
class StandardClip:
    samples: np.ndarray  # (64000,)
    stage: str = "zscored"
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.shape != (CLIP_LENGTH,):
            raise ValueError(f"clip must hold exactly {CLIP_LENGTH} samples, got {self.samples.shape}")
        if self.stage not in STAGES:
            raise ValueError(f"unknown clip stage {self.stage!r}")


@dataclass
class QcReport:
    clipping_fraction: float
    snr_estimate_db: float
    verdict: str
    reason: str = ""

    def to_dict(self):
        return {
            "clipping_fraction": self.clipping_fraction,
            "snr_estimate_db": self.snr_estimate_db,
            "verdict": self.verdict,
            "reason": self.reason,
        }


@dataclass
class QcThresholds:
    clip: float = 0.01
    snr_db: float = 5.0


# ---------------------------------------------------------------- WAV codec


def decode_wav(data):
    """Decode RIFF/WAVE bytes (PCM 16/24/32 or IEEE float32) into a RawRecording."""
    if len(data) < 12:
        raise WavDecodeError("RIFF: file shorter than the 12-byte RIFF header")
    if data[:4] != b"RIFF":
        raise WavDecodeError("RIFF: missing 'RIFF' magic")
    if data[8:12] != b"WAVE":
        raise WavDecodeError("RIFF: form type is not 'WAVE'")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        size = struct.unpack_from("<I", data, pos + 4)[0]
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavDecodeError(f"{cid.decode('latin-1')!r}: chunk truncated ({len(body)} of {size} bytes)")
        if cid == b"fmt ":
            fmt = _parse_fmt(body)
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)

    if fmt is None:
        raise WavDecodeError("'fmt ': chunk missing")
    if payload is None:
        raise WavDecodeError("'data': chunk missing")

    tag, channels, rate, bits = fmt
    width = bits // 8
    frame = width * channels
    if len(payload) % frame:
        # channel streams would end at different lengths
        raise WavDecodeError(
            f"'data': {len(payload)} bytes is not a whole number of {channels}-channel frames; "
            "channel lengths differ"
        )
    if tag == _IEEE_FLOAT:
        x = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    elif bits == 16:
        x = np.frombuffer(payload, dtype="<i2") / 32768.0
    elif bits == 32:
        x = np.frombuffer(payload, dtype="<i4") / 2147483648.0
    else:  # 24-bit
        b = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v / 8388608.0
    return RawRecording(x.reshape(-1, channels).T.copy(), rate)


def _parse_fmt(body):
    if len(body) < 16:
        raise WavDecodeError(f"'fmt ': chunk is {len(body)} bytes, need at least 16")
    tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", body)
    if tag == _EXTENSIBLE:
        if len(body) < 40:
            raise WavDecodeError("'fmt ': WAVE_FORMAT_EXTENSIBLE chunk too short")
        tag = struct.unpack_from("<H", body, 24)[0]
    if channels < 1:
        raise WavDecodeError("'fmt ': channel count is zero")
    if rate < 1:
        raise WavDecodeError("'fmt ': sample rate is zero")
    ok = (tag == _PCM and bits in (16, 24, 32)) or (tag == _IEEE_FLOAT and bits == 32)
    if not ok:
        raise UnsupportedFormatError(f"unsupported WAV encoding: format tag {tag}, {bits} bits per sample")
    return tag, channels, rate, bits


def encode_wav(samples, sample_rate, encoding="float32"):
    """Encode a (channels, frames) or (frames,) array as WAV bytes.

    ``encoding`` is one of "pcm16", "pcm24", "pcm32", "float32".
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    channels = x.shape[0]
    inter = x.T.reshape(-1)
    if encoding == "float32":
        tag, bits = _IEEE_FLOAT, 32
        payload = inter.astype("<f4").tobytes()
    elif encoding in ("pcm16", "pcm24", "pcm32"):
        tag, bits = _PCM, int(encoding[3:])
        full = 2 ** (bits - 1)
        q = np.clip(np.round(inter * full), -full, full - 1).astype(np.int64)
        if bits == 16:
            payload = q.astype("<i2").tobytes()
        elif bits == 32:
            payload = q.astype("<i4").tobytes()
        else:
            u = (q & 0xFFFFFF).astype(np.uint32)
            payload = np.stack([u & 0xFF, (u >> 8) & 0xFF, (u >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, sample_rate, sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def read_wav(path):
    return decode_wav(Path(path).read_bytes())


# ---------------------------------------------------------- standardization


def resample(x, orig_sr, target_sr=SAMPLE_RATE, taps_per_phase=64, beta=8.6):
    """Polyphase windowed-sinc resampling (Kaiser window, fixed taps per phase)."""
    if orig_sr == target_sr:
        return np.asarray(x, dtype=np.float64).copy()
    ratio = Fraction(target_sr, orig_sr)
    up, down = ratio.numerator, ratio.denominator
    n_taps = taps_per_phase * up
    cutoff = 1.0 / max(up, down)
    h = signal.firwin(n_taps + 1, cutoff, window=("kaiser", beta)) * up
    return signal.resample_poly(np.asarray(x, dtype=np.float64), up, down, window=h)


def fit_length(x, length=CLIP_LENGTH):
    """Center-cut long signals; append trailing zeros to short ones."""
    n = len(x)
    if n > length:
        start = (n - length) // 2
        return x[start:start + length].copy()
    out = np.zeros(length, dtype=np.float64)
    out[:n] = x
    return out


def peak_normalize(x):
    peak = np.max(np.abs(x)) if len(x) else 0.0
    return x / peak if peak > 0 else np.zeros_like(x)


def zscore(x):
    sd = x.std()
    if sd == 0:
        return np.zeros_like(x)
    return (x - x.mean()) / sd


def standardize(rec, stage="zscored"):
    """Mono mix, resample to 16 kHz, fit to 64,000 samples, peak-normalize, z-score.

    ``stage="peak_normalized"`` stops before z-scoring.  Accepts a
    RawRecording or an existing StandardClip (re-standardization is a no-op
    up to rounding).
    """
    if isinstance(rec, StandardClip):
        rec = RawRecording(rec.samples[None, :], rec.sample_rate)
    if rec.n_frames == 0:
        raise ValueError("cannot standardize a zero-length recording")
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    mono = rec.samples.mean(axis=0)
    mono = resample(mono, rec.sample_rate, SAMPLE_RATE)
    x = peak_normalize(fit_length(mono))
    if stage == "zscored":
        x = zscore(x)
    return StandardClip(x, stage)


# ----------------------------------------------------------------------- QC


def estimate_snr_db(x, sample_rate=SAMPLE_RATE, nperseg=512):
    """Spectral noise-floor SNR estimate.

    The noise PSD is taken as the median bin of a Welch periodogram (tonal or
    narrowband content occupies few bins so the median tracks the broadband
    floor); noise power is that level integrated over the band and the rest of
    the signal power is attributed to signal.
    """
    x = np.asarray(x, dtype=np.float64)
    x = x - x.mean()
    total = np.mean(x * x)
    if total == 0:
        return float("-inf")
    _, pxx = signal.welch(x, fs=sample_rate, window="hann", nperseg=nperseg, detrend=False)
    noise = np.median(pxx) * sample_rate / 2
    sig = max(total - noise, 0.0)
    if noise <= 0:
        return float("inf")
    if sig == 0:
        return float("-inf")
    return float(10 * np.log10(sig / noise))


def quality_check(clip, thresholds=None):
    thresholds = thresholds or QcThresholds()
    x = clip.samples
    if clip.stage != "peak_normalized":
        x = peak_normalize(x)
    clipping = float(np.mean(np.abs(x) >= 0.999))
    snr = estimate_snr_db(x)
    reasons = []
    if clipping > thresholds.clip:
        reasons.append(f"clipping fraction {clipping:.4f} exceeds {thresholds.clip}")
    if snr < thresholds.snr_db:
        reasons.append(f"estimated SNR {snr:.2f} dB below {thresholds.snr_db} dB")
    verdict = "reject" if reasons else "accept"
    return QcReport(clipping, snr, verdict, "; ".join(reasons))


# -------------------------------------------------------------- persistence


def save_clip(clip, path, source="", qc_verdict=""):
    """Write raw little-endian float32 samples plus a one-line JSON sidecar."""
    path = Path(path)
    path.write_bytes(clip.samples.astype("<f4").tobytes())
    side = {"source": str(source), "stage": clip.stage, "qc_verdict": qc_verdict}
    path.with_suffix(".json").write_text(json.dumps(side, sort_keys=True) + "\n")


def load_clip(path):
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    x = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
    return StandardClip(x, side["stage"])
