"""Separable-by-construction tone corpus: class k is a pure tone at 300 * 2**k Hz."""

from pathlib import Path

import numpy as np

from .audio_io import encode_wav
from .augmentation import make_rng
from .model import CLASSES
from .training import DatasetManifest, ManifestEntry

BASE_HZ = 300.0


def tone_frequency(k):
    return BASE_HZ * 2.0 ** k


def tone(freq, seconds=4.0, sr=16000, amplitude=0.5, phase=0.0, noise=0.0, rng=None):
    t = np.arange(int(round(seconds * sr))) / sr
    x = amplitude * np.sin(2 * np.pi * freq * t + phase)
    if noise:
        x = x + noise * rng.standard_normal(len(x))
    return x


def write_tone_dataset(directory, per_class=20, seed=0, sr=16000, seconds=4.0, noise=0.01):
    """Write ``per_class`` WAVs per class plus ``manifest.csv``; returns the manifest.

    Amplitude and phase vary per clip so that no two clips are identical.
    """
    directory = Path(directory)
    (directory / "audio").mkdir(parents=True, exist_ok=True)
    entries = []
    for k, label in enumerate(CLASSES):
        for i in range(per_class):
            rng = make_rng(seed, k, i)
            x = tone(
                tone_frequency(k), seconds, sr,
                amplitude=rng.uniform(0.2, 0.8), phase=rng.uniform(0, 2 * np.pi),
                noise=noise, rng=rng,
            )
            clip_id = f"{label.lower()}_{i:03d}"
            rel = Path("audio") / f"{clip_id}.wav"
            (directory / rel).write_bytes(encode_wav(x[None, :], sr, "pcm16"))
            entries.append(ManifestEntry(clip_id, str(rel), label, None))
    manifest = DatasetManifest(entries)
    manifest.write_csv(directory / "manifest.csv")
    return DatasetManifest.read_csv(directory / "manifest.csv")
