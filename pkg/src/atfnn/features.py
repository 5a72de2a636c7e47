"""Log-mel spectrogram extraction for 16 kHz speech.

The pipeline is deliberately plain: Hamming-windowed frames, a 512-point
power spectrum, an 80-band triangular mel filterbank up to 8 kHz, and a
natural log with a small additive floor. Utterances are then cut into
fixed 80x128 segments, densely with overlap for training and butted
end-to-end with zero padding for scoring.
"""

from __future__ import annotations

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000
FRAME_LEN = 320          # 20 ms at 16 kHz
FRAME_HOP = 160          # 10 ms
N_FFT = 512
N_MELS = 80
FMIN = 0.0
FMAX = 8000.0
LOG_FLOOR = 1e-6
SEG_FRAMES = 128
TRAIN_SEG_HOP = 64


def load_wav(path) -> np.ndarray:
    """Read a mono 16 kHz PCM or float WAV as float64 in [-1, 1]."""
    rate, data = wavfile.read(path)
    if rate != SAMPLE_RATE:
        raise ValueError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate}")
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float64) / 2147483648.0
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    return data.astype(np.float64)


def frame_signal(signal: np.ndarray, frame_len: int = FRAME_LEN, hop: int = FRAME_HOP) -> np.ndarray:
    """Slice a 1-D signal into overlapping frames, dropping any tail
    shorter than a full frame. Returns (n_frames, frame_len)."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1:
        raise ValueError(f"expected 1-D signal, got shape {signal.shape}")
    if signal.size < frame_len:
        raise ValueError(f"signal length {signal.size} shorter than one frame ({frame_len})")
    n = 1 + (signal.size - frame_len) // hop
    view = np.lib.stride_tricks.sliding_window_view(signal, frame_len)[::hop]
    return view[:n].copy()


def power_spectrum(frames: np.ndarray, n_fft: int = N_FFT) -> np.ndarray:
    """Hamming-window each frame and take the one-sided power spectrum.

    Frames shorter than n_fft are zero-padded on the right before the
    transform. Returns (n_frames, n_fft // 2 + 1).
    """
    frames = np.asarray(frames, dtype=np.float64)
    win = np.hamming(frames.shape[1])
    spec = np.fft.rfft(frames * win, n=n_fft, axis=1)
    return (spec.real ** 2 + spec.imag ** 2)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT,
                   sample_rate: int = SAMPLE_RATE,
                   fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Triangular mel filterbank with unit peaks, (n_mels, n_fft//2 + 1).

    Band edges are spaced evenly on the mel scale between fmin and fmax
    and evaluated at the FFT bin centre frequencies.
    """
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        lo, mid, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        rising = (bin_hz - lo) / (mid - lo)
        falling = (hi - bin_hz) / (hi - mid)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def log_mel_spectrogram(signal: np.ndarray, filterbank: np.ndarray | None = None) -> np.ndarray:
    """Full pipeline from waveform to (N_MELS, n_frames) log-mel energies."""
    if filterbank is None:
        filterbank = mel_filterbank()
    pspec = power_spectrum(frame_signal(signal))
    return np.log(pspec @ filterbank.T + LOG_FLOOR).T


def segment(spec: np.ndarray, mode: str = "train",
            seg_frames: int = SEG_FRAMES, train_hop: int = TRAIN_SEG_HOP) -> np.ndarray:
    """Cut a (N_MELS, T) spectrogram into (n_seg, N_MELS, seg_frames) blocks.

    "train" slides a full window by ``train_hop`` and keeps only complete
    windows, zero-padding solely when the utterance is shorter than one
    window. "eval" tiles non-overlapping windows and zero-pads the final
    partial block so every frame is scored exactly once.
    """
    spec = np.asarray(spec, dtype=np.float64)
    n_mels, total = spec.shape
    if mode == "train":
        if total < seg_frames:
            padded = np.zeros((n_mels, seg_frames))
            padded[:, :total] = spec
            return padded[None]
        starts = range(0, total - seg_frames + 1, train_hop)
        return np.stack([spec[:, s:s + seg_frames] for s in starts])
    if mode == "eval":
        n_seg = -(-total // seg_frames)
        padded = np.zeros((n_mels, n_seg * seg_frames))
        padded[:, :total] = spec
        return padded.reshape(n_mels, n_seg, seg_frames).transpose(1, 0, 2).copy()
    raise ValueError(f"unknown segmentation mode {mode!r}")


def extract_segments(path, mode: str = "train",
                     filterbank: np.ndarray | None = None) -> np.ndarray:
    """Waveform file straight to stacked segments for one utterance."""
    return segment(log_mel_spectrogram(load_wav(path), filterbank), mode=mode)
