"""Log-mel spectrogram frontend."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .audio import SAMPLE_RATE, AudioBuffer

N_FFT = 2048
HOP = 128
N_MELS = 512
FMIN = 20.0
FMAX = 7600.0
LOG_FLOOR = 1e-6
FRAME_HOP_S = HOP / SAMPLE_RATE
_SUBSAMPLES = 32  # quadrature points per FFT bin when integrating filters


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Peak frequency of each triangular filter (HTK mel scale, equal mel spacing)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return edges[1:-1]


@lru_cache(maxsize=8)
def _filterbank(n_fft, n_mels, fmin, fmax, sample_rate):
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    n_bins = n_fft // 2 + 1
    df = sample_rate / n_fft
    centers = np.arange(n_bins) * df
    # Average each triangle over the frequency extent of every FFT bin, so that
    # filters narrower than one bin still receive weight.
    offsets = (np.arange(_SUBSAMPLES) + 0.5) / _SUBSAMPLES - 0.5
    weights = np.zeros((n_mels, n_bins))
    inside = np.nonzero((centers >= fmin) & (centers <= fmax))[0]
    for k in inside:
        f = np.clip(centers[k] + offsets * df, fmin, fmax)[None, :]
        tri = np.maximum(0.0, np.minimum((f - lo) / (mid - lo), (hi - f) / (hi - mid)))
        weights[:, k] = tri.mean(axis=1)
    weights /= weights.sum(axis=1, keepdims=True)
    weights.setflags(write=False)
    return weights


def mel_filterbank(n_fft: int = N_FFT, n_mels: int = N_MELS, fmin: float = FMIN,
                   fmax: float = FMAX, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular HTK-mel filters as an ``[n_mels, n_fft // 2 + 1]`` matrix.

    Rows are normalized to unit sum. Bins centred outside ``[fmin, fmax]`` get
    zero weight.
    """
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ValueError(f"need 0 <= fmin < fmax <= {sample_rate / 2}, got {fmin}, {fmax}")
    if n_mels < 1 or n_fft < 2:
        raise ValueError("n_mels and n_fft must be positive")
    return _filterbank(n_fft, n_mels, float(fmin), float(fmax), int(sample_rate))


def num_frames(n_samples: int, hop: int = HOP) -> int:
    return math.ceil(n_samples / hop)


def log_mel(audio: AudioBuffer | np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """``[ceil(len / 128), 512]`` log-mel frames from 16 kHz audio.

    Hann-windowed magnitude STFT (2048-point, hop 128, centred with reflection
    padding), mel filtering, then ``log(x + 1e-6)``.
    """
    if isinstance(audio, AudioBuffer):
        samples, sample_rate = audio.samples, audio.sample_rate
    else:
        samples = np.asarray(audio)
    if sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {sample_rate}")
    samples = np.asarray(samples, dtype=np.float64)
    n = num_frames(len(samples))
    if n == 0:
        return np.zeros((0, N_MELS))
    pad = N_FFT // 2
    padded = np.pad(samples, pad, mode="reflect") if len(samples) > 1 else np.pad(samples, pad)
    frames = np.lib.stride_tricks.sliding_window_view(padded, N_FFT)[::HOP][:n]
    spec = np.abs(np.fft.rfft(frames * np.hanning(N_FFT + 1)[:-1], axis=1))
    return np.log(spec @ mel_filterbank().T + LOG_FLOOR)
