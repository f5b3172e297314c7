"""Training-time waveform perturbations: time stretch, pitch shift, additive noise."""

from dataclasses import asdict, dataclass

import numpy as np
from scipy import signal

from .audio_io import CLIP_LENGTH, StandardClip, fit_length, peak_normalize, zscore

N_FFT = 1024
HOP = 256


def make_rng(seed, *keys):
    """Counter-based generator for the substream named by ``keys``.

    ``make_rng(seed, epoch, sample)`` always yields the same stream, regardless
    of how many other substreams were drawn before it.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class AugmentPolicy:
    p_stretch: float = 0.5
    p_pitch: float = 0.5
    p_noise: float = 0.5
    stretch_range: tuple = (0.9, 1.1)
    pitch_range_semitones: tuple = (-2.0, 2.0)
    snr_range_db: tuple = (15.0, 30.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("p_stretch", "p_pitch", "p_noise"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        for name in ("stretch_range", "pitch_range_semitones", "snr_range_db"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
            setattr(self, name, (float(lo), float(hi)))

    def to_dict(self):
        d = asdict(self)
        for k in ("stretch_range", "pitch_range_semitones", "snr_range_db"):
            d[k] = list(d[k])
        return d


# ------------------------------------------------------------ phase vocoder


def _stft(x):
    win = signal.get_window("hann", N_FFT)
    xp = np.pad(x, N_FFT // 2, mode="reflect")
    n_frames = 1 + (len(xp) - N_FFT) // HOP
    idx = np.arange(N_FFT)[None, :] + HOP * np.arange(n_frames)[:, None]
    return np.fft.rfft(xp[idx] * win, axis=1).T  # (bins, frames)


def _istft(spec, length):
    win = signal.get_window("hann", N_FFT)
    n_frames = spec.shape[1]
    frames = np.fft.irfft(spec.T, n=N_FFT, axis=1) * win
    total = N_FFT + HOP * (n_frames - 1)
    y = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        s = t * HOP
        y[s:s + N_FFT] += frames[t]
        norm[s:s + N_FFT] += win * win
    nz = norm > 1e-10
    y[nz] /= norm[nz]
    y = y[N_FFT // 2:]
    if len(y) >= length:
        return y[:length]
    return np.pad(y, (0, length - len(y)))


def stretch_signal(x, rate):
    """Phase-vocoder stretch returning ``round(len(x) / rate)`` samples."""
    spec = _stft(np.asarray(x, dtype=np.float64))
    n_bins, n_frames = spec.shape
    steps = np.arange(0, n_frames, rate)
    advance = np.linspace(0, np.pi * HOP, n_bins)
    padded = np.pad(spec, ((0, 0), (0, 2)))
    out = np.empty((n_bins, len(steps)), dtype=complex)
    acc = np.angle(spec[:, 0])
    for t, step in enumerate(steps):
        i = int(step)
        c0, c1 = padded[:, i], padded[:, i + 1]
        frac = step - i
        mag = (1 - frac) * np.abs(c0) + frac * np.abs(c1)
        out[:, t] = mag * np.exp(1j * acc)
        dphase = np.angle(c1) - np.angle(c0) - advance
        dphase -= 2 * np.pi * np.round(dphase / (2 * np.pi))
        acc = acc + advance + dphase
    return _istft(out, int(round(len(x) / rate)))


def _restage(x, stage):
    return StandardClip(zscore(x) if stage == "zscored" else peak_normalize(x), stage)


# -------------------------------------------------------------- operations


def time_stretch(clip, rate):
    """Tempo change by ``rate`` (>1 is faster) with pitch preserved, refit to 4 s."""
    if not 0.5 <= rate <= 2.0:
        raise ValueError(f"stretch rate {rate} outside the hard limit [0.5, 2.0]")
    y = fit_length(stretch_signal(clip.samples, rate))
    return _restage(y, clip.stage)


def pitch_shift(clip, semitones, max_semitones=2.0):
    if abs(semitones) > max_semitones:
        raise ValueError(f"pitch shift {semitones} exceeds +/-{max_semitones} semitones")
    rate = 2.0 ** (-semitones / 12.0)
    y = stretch_signal(clip.samples, rate)
    y = signal.resample(y, CLIP_LENGTH)
    return _restage(y, clip.stage)


def add_noise(clip, snr_db, rng):
    """Add white Gaussian noise whose empirical power sets the SNR exactly.

    The result is not re-standardized so that the added noise is recoverable
    as ``out - clip``; ``augment`` re-z-scores.
    """
    x = clip.samples
    p_signal = np.mean(x * x)
    if p_signal == 0:
        raise ValueError("SNR is undefined for an all-zero clip")
    noise = rng.standard_normal(len(x))
    noise *= np.sqrt(p_signal / 10 ** (snr_db / 10) / np.mean(noise * noise))
    return StandardClip(x + noise, clip.stage)


def draw_plan(policy, rng):
    """Coin flips and parameters for one sample; all draws happen unconditionally."""
    coins = rng.random(3)
    rate = rng.uniform(*policy.stretch_range)
    semis = rng.uniform(*policy.pitch_range_semitones)
    snr = rng.uniform(*policy.snr_range_db)
    return {
        "stretch": rate if coins[0] < policy.p_stretch else None,
        "pitch": semis if coins[1] < policy.p_pitch else None,
        "noise": snr if coins[2] < policy.p_noise else None,
    }


def augment(clip, policy, rng, plan=None):
    """Apply each perturbation independently with its probability; re-z-score.

    Returns ``(clip, plan)``.  When nothing fires the input clip object is
    returned as is.
    """
    plan = plan if plan is not None else draw_plan(policy, rng)
    if not any(v is not None for v in plan.values()):
        return clip, plan
    out = clip
    if plan["stretch"] is not None:
        out = time_stretch(out, plan["stretch"])
    if plan["pitch"] is not None:
        out = pitch_shift(out, plan["pitch"], max(abs(v) for v in policy.pitch_range_semitones))
    if plan["noise"] is not None and np.any(out.samples):
        out = add_noise(out, plan["noise"], rng)
    return StandardClip(zscore(out.samples), "zscored"), plan
