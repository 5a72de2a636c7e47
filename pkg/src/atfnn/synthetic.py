"""Synthetic two-class audio fixture.

Generates a small corpus of band-limited noise "speech": one class keeps
its dominant energy below roughly 1.8 kHz, the other above. Band position,
band width, level, and a weaker opposite-band distractor are all drawn per
utterance, so no single energy template separates the classes; a model has
to learn which side of the split the dominant band sits on. Each synthetic
speaker also gets a private gain so folds are not literal copies of one
another. Output is 16-bit mono WAV at 16 kHz plus a manifest CSV the
evaluation harness can consume directly.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .features import SAMPLE_RATE, mel_to_hz

# (lo_min, lo_max, width_min, width_max) per class, all in mel, so both
# classes cover the same share of their half of the 80-band grid; class 0
# ("bass") stays below the ~1.74 kHz half split, class 1 ("treble") above
CLASS_BANDS = {
    "bass": (150.0, 330.0, 560.0, 980.0),
    "treble": (1490.0, 1840.0, 560.0, 980.0),
}
DISTRACTOR_RATIO = 0.7
SIGNAL_RMS = 0.035   # per 1000 mel of bandwidth
FLOOR_RMS = 0.058


def band_noise(rng: np.random.Generator, n_samples: int,
               lo_hz: float, hi_hz: float, rms: float) -> np.ndarray:
    """Noise masked to [lo_hz, hi_hz], spectrally tilted so every mel band
    it covers reads at about the same log-mel level (mel bandwidth grows
    like 700 + f, and narrow low filters log-average a little lower, so the
    exponent leans slightly past the pure 1/(700+f) power profile)."""
    white = rng.standard_normal(n_samples)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n_samples, 1.0 / SAMPLE_RATE)
    spec /= (700.0 + freqs) ** 0.6
    spec[(freqs < lo_hz) | (freqs > hi_hz)] = 0.0
    x = np.fft.irfft(spec, n=n_samples)
    scale = rms / max(np.sqrt(np.mean(x * x)), 1e-12)
    return x * scale


def _draw_band(rng: np.random.Generator, label_name: str) -> tuple[float, float, float]:
    """Random (lo_hz, hi_hz, rms_scale) for one class; the scale holds
    per-mel-band power constant across band geometries, since wider (in
    mel) bands need proportionally more total power."""
    lo_min, lo_max, w_min, w_max = CLASS_BANDS[label_name]
    lo = rng.uniform(lo_min, lo_max)
    width = rng.uniform(w_min, w_max)
    hi = min(lo + width, 2800.0)
    return float(mel_to_hz(lo)), float(mel_to_hz(hi)), float(np.sqrt((hi - lo) / 1000.0))


def generate_dataset(root, n_speakers: int = 8, utterances_per_speaker: int = 16,
                     seed: int = 2024, duration_range: tuple[float, float] = (2.4, 3.2),
                     speakers_per_session: int = 2) -> Path:
    """Write WAVs plus manifest.csv under ``root``; returns the manifest path.

    Utterance counts are split evenly between the two classes so every
    speaker's test fold is class-balanced.
    """
    if utterances_per_speaker % len(CLASS_BANDS):
        raise ValueError("utterances_per_speaker must split evenly across classes")
    root = Path(root)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    per_class = utterances_per_speaker // len(CLASS_BANDS)
    names = sorted(CLASS_BANDS)
    for s in range(n_speakers):
        speaker = f"spk{s}"
        session = f"sess{s // speakers_per_session}"
        gain = rng.uniform(0.7, 1.3)
        for ci, label_name in enumerate(names):
            for k in range(per_class):
                dur = rng.uniform(*duration_range)
                n = int(round(dur * SAMPLE_RATE))
                level = SIGNAL_RMS * gain * rng.uniform(0.7, 1.4)
                lo, hi, scale = _draw_band(rng, label_name)
                signal = band_noise(rng, n, lo, hi, rms=level * scale)
                # a weaker random band from the opposite class keeps the
                # margin narrow: the class is where energy dominates, not
                # where it exists
                lo, hi, scale = _draw_band(rng, names[1 - ci])
                signal += band_noise(rng, n, lo, hi,
                                     rms=DISTRACTOR_RATIO * level * scale)
                # the broadband floor pins off-band log-mels near zero, so
                # the grid is near-zero where the classes carry no energy
                signal += band_noise(rng, n, 0.0, SAMPLE_RATE / 2, rms=FLOOR_RMS)
                signal = np.clip(signal, -0.99, 0.99)
                uid = f"{speaker}_{label_name}{k:02d}"
                rel = f"audio/{uid}.wav"
                wavfile.write(root / rel, SAMPLE_RATE,
                              (signal * 32767.0).astype(np.int16))
                rows.append((uid, rel, speaker, session, label_name))
    manifest = root / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["utterance_id", "path", "speaker_id", "session_id", "label_name"])
        writer.writerows(rows)
    return manifest
