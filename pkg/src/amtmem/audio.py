"""Deterministic additive synthesis of note sequences, and 16-bit WAV I/O."""

from __future__ import annotations

import io
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .midi_io import NoteSequence

SAMPLE_RATE = 16_000
RAMP_S = 0.010
DRUM_BURST_S = 0.030

# Harmonic amplitudes (fundamental first) per MIDI class, i.e. program // 8.
# Programs inside one class share a timbre and are indistinguishable by ear.
OVERTONES = np.array([
    [1.00, 0.50, 0.25, 0.12],  # piano
    [1.00, 0.05, 0.30, 0.02],  # chromatic percussion
    [1.00, 0.70, 0.50, 0.40],  # organ
    [1.00, 0.40, 0.15, 0.05],  # guitar
    [1.00, 0.80, 0.20, 0.10],  # bass
    [1.00, 0.30, 0.45, 0.20],  # strings
    [1.00, 0.20, 0.40, 0.30],  # ensemble
    [1.00, 0.10, 0.60, 0.05],  # brass
    [1.00, 0.60, 0.05, 0.30],  # reed
    [1.00, 0.02, 0.02, 0.01],  # pipe
    [1.00, 0.90, 0.80, 0.70],  # synth lead
    [1.00, 0.25, 0.10, 0.50],  # synth pad
    [1.00, 0.45, 0.35, 0.05],  # synth effects
    [1.00, 0.15, 0.05, 0.60],  # ethnic
    [1.00, 0.05, 0.50, 0.50],  # percussive
    [1.00, 0.35, 0.35, 0.35],  # sound effects
])


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


def pitch_to_hz(pitch: float) -> float:
    return 440.0 * 2.0 ** ((pitch - 69) / 12)


def _max_polyphony(seq: NoteSequence) -> int:
    edges = []
    for n in seq.notes:
        end = n.onset_s + DRUM_BURST_S if n.is_drum else n.offset_s
        edges.append((n.onset_s, 1))
        edges.append((end, -1))
    best = cur = 0
    for _, step in sorted(edges):  # ends sort before starts at equal times
        cur += step
        best = max(best, cur)
    return best


def synthesize_additive(seq: NoteSequence, sample_rate: int = SAMPLE_RATE,
                        duration_s: float | None = None) -> AudioBuffer:
    """Render ``seq`` with sine partials; drums are pitch-seeded noise bursts.

    Each melodic note gets 10 ms linear attack and release ramps; the mix is
    scaled by 1/sqrt(max simultaneous notes) and clipped to [-1, 1].
    """
    if sample_rate < 8000:
        raise ValueError("sample_rate must be at least 8000 Hz")
    total_s = seq.duration_s if duration_s is None else duration_s
    out = np.zeros(int(round(total_s * sample_rate)), dtype=np.float64)
    ramp = max(1, int(round(RAMP_S * sample_rate)))
    nyquist = sample_rate / 2

    for n in seq.notes:
        start = int(round(n.onset_s * sample_rate))
        if start >= len(out):
            continue
        if n.is_drum:
            length = int(round(DRUM_BURST_S * sample_rate))
            burst = np.random.default_rng(n.pitch).uniform(-1.0, 1.0, length)
            burst *= np.linspace(1.0, 0.0, length)
            seg = burst
        else:
            length = max(int(round(n.offset_s * sample_rate)) - start, 2)
            t = np.arange(length) / sample_rate
            f0 = pitch_to_hz(n.pitch)
            seg = np.zeros(length)
            for h, amp in enumerate(OVERTONES[n.program // 8], start=1):
                if h * f0 < nyquist:
                    seg += amp * np.sin(2 * np.pi * h * f0 * t)
            seg /= OVERTONES[n.program // 8].sum()
            r = min(ramp, length // 2)
            env = np.ones(length)
            env[:r] = np.arange(r) / r
            env[length - r:] = np.arange(r, 0, -1) / r
            seg *= env
        stop = min(start + len(seg), len(out))
        out[start:stop] += seg[:stop - start]

    poly = _max_polyphony(seq)
    if poly > 1:
        out /= np.sqrt(poly)
    np.clip(out, -1.0, 1.0, out=out)
    return AudioBuffer(out, sample_rate)


def write_wav(audio: AudioBuffer, path: str | Path | None = None) -> bytes:
    """Encode as 16-bit little-endian mono PCM; also writes ``path`` if given."""
    pcm = np.round(np.clip(audio.samples, -1.0, 1.0) * 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(audio.sample_rate))
        w.writeframes(pcm.tobytes())
    data = buf.getvalue()
    if path is not None:
        Path(path).write_bytes(data)
    return data


def resample_linear(samples: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    if src_rate == dst_rate or len(samples) == 0:
        return samples
    n_out = int(round(len(samples) * dst_rate / src_rate))
    t_out = np.arange(n_out) * (src_rate / dst_rate)
    return np.interp(t_out, np.arange(len(samples)), samples)


def read_wav(source: str | Path | bytes, target_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """Read 16-bit PCM WAV (mono, or downmixed) and resample to ``target_rate``."""
    fh = io.BytesIO(source) if isinstance(source, (bytes, bytearray)) else open(source, "rb")
    try:
        with fh, wave.open(fh, "rb") as w:
            if w.getsampwidth() != 2:
                raise ValueError("only 16-bit PCM WAV is supported")
            channels, rate = w.getnchannels(), w.getframerate()
            raw = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    except (wave.Error, EOFError) as exc:
        raise ValueError(f"unreadable WAV data: {exc}") from exc
    raw = raw[:len(raw) - len(raw) % channels]
    samples = raw.reshape(-1, channels).mean(axis=1) / 32767.0
    return AudioBuffer(resample_linear(samples, rate, target_rate), target_rate)
