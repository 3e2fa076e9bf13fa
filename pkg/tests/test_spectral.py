"""Log-mel frontend and filterbank."""

from __future__ import annotations

import numpy as np
import pytest

from amtmem.audio import AudioBuffer, synthesize_additive
from amtmem.midi_io import NoteEvent, NoteSequence
from amtmem.spectral import (FMAX, FMIN, LOG_FLOOR, N_FFT, N_MELS, log_mel, mel_filterbank,
                             num_frames)


def htk_centers(n_mels, fmin, fmax):
    """Filter peaks computed straight from the HTK formula, independent of the module."""
    mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)
    m = np.linspace(mel(fmin), mel(fmax), n_mels + 2)[1:-1]
    return 700.0 * (10 ** (m / 2595.0) - 1.0)


def tone(freq: float, seconds: float = 0.5, sr: int = 16000) -> AudioBuffer:
    t = np.arange(int(seconds * sr)) / sr
    return AudioBuffer(0.5 * np.sin(2 * np.pi * freq * t), sr)


def test_frame_count():
    assert log_mel(np.zeros(256000)).shape == (2000, N_MELS)
    assert num_frames(129) == 2 and num_frames(128) == 1
    assert log_mel(np.zeros(1000)).shape == (8, N_MELS)


def test_empty_audio():
    assert log_mel(np.zeros(0)).shape == (0, N_MELS)


def test_silence_hits_floor():
    frames = log_mel(np.zeros(4000))
    assert np.all(frames == np.log(LOG_FLOOR))


@pytest.mark.parametrize("freq", [440.0, 1000.0, 3000.0])
def test_sine_peaks_at_nearest_center(freq):
    frames = log_mel(tone(freq))
    expected = int(np.argmin(np.abs(htk_centers(N_MELS, FMIN, FMAX) - freq)))
    peaks = frames[8:-8].argmax(axis=1)
    assert np.all(peaks == expected)


def test_filterbank_shape_and_normalization():
    fb = mel_filterbank()
    assert fb.shape == (N_MELS, N_FFT // 2 + 1)
    assert np.all(fb >= 0)
    assert np.allclose(fb.sum(axis=1), 1.0)


def test_filterbank_covers_band_and_is_zero_outside():
    fb = mel_filterbank()
    freqs = np.arange(N_FFT // 2 + 1) * 16000 / N_FFT
    inside = (freqs >= FMIN) & (freqs <= FMAX)
    assert np.all(fb[:, inside].sum(axis=0) > 0)
    assert np.all(fb[:, ~inside] == 0)


def test_filter_peaks_increase():
    peaks = mel_filterbank().argmax(axis=1)
    assert np.all(np.diff(peaks) >= 0)
    assert np.all(np.diff(htk_centers(N_MELS, FMIN, FMAX)) > 0)


@pytest.mark.parametrize("fmin, fmax", [(100, 50), (20, 9000), (-1, 100)])
def test_filterbank_rejects_bad_range(fmin, fmax):
    with pytest.raises(ValueError):
        mel_filterbank(fmin=fmin, fmax=fmax)


def test_louder_means_larger():
    audio = synthesize_additive(NoteSequence([NoteEvent(0.0, 0.5, 60, 0)]))
    quiet = log_mel(AudioBuffer(audio.samples * 0.25, 16000))
    loud = log_mel(AudioBuffer(audio.samples * 0.5, 16000))
    strong = quiet > np.log(LOG_FLOOR) + 6
    assert strong.any()
    assert np.all(loud[strong] > quiet[strong])


def test_deterministic_and_rate_checked():
    x = tone(330.0).samples
    assert np.array_equal(log_mel(x), log_mel(x.copy()))
    with pytest.raises(ValueError):
        log_mel(AudioBuffer(x, 8000))
