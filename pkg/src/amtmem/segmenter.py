"""Cut tracks into frame windows paired with target and prior (memory) tokens."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import codec
from .audio import AudioBuffer
from .codec import SegmentWindow, Vocabulary
from .midi_io import NoteSequence
from .spectral import FRAME_HOP_S, N_MELS, log_mel


@dataclass(frozen=True)
class SegmentConfig:
    n_frames: int = 256          # frames per model window
    n_tokens: int = 1024         # padded token length
    frames_per_segment: int = 2000  # frames in one 256k-sample audio segment
    max_hop: int = 1             # largest prior-window distance, in windows
    batch_segments: int = 12

    def __post_init__(self):
        if self.n_frames < 1 or self.n_tokens < 2 or self.max_hop < 1 or self.batch_segments < 1:
            raise ValueError(f"invalid segment config: {self}")


@dataclass
class TrainingPair:
    frames: np.ndarray   # [n_frames, n_mels], zero rows past n_valid
    target: np.ndarray   # [n_tokens] int64 ids, PAD-padded
    prior: np.ndarray    # [n_tokens] int64 ids, all PAD when there is no prior window
    hop: int
    n_valid: int
    window: SegmentWindow


def window_grid(total_frames: int, n_frames: int) -> list[int]:
    """Start frames 0, N, 2N, ... covering ``total_frames``; the last may be partial."""
    if total_frames < 0 or n_frames < 1:
        raise ValueError("total_frames must be >= 0 and n_frames >= 1")
    return list(range(0, total_frames, n_frames))


def frame_window(start: int, stop: int) -> SegmentWindow:
    return SegmentWindow(start * FRAME_HOP_S, stop * FRAME_HOP_S)


def prior_window(i: int, hop: int, n_frames: int) -> tuple[int, int]:
    """Frames ``[i - hop*N, i + (1 - hop)*N)``: the window ``hop`` steps before ``i``."""
    return i - hop * n_frames, i + (1 - hop) * n_frames


def sample_prior_window(i: int, cfg: SegmentConfig, rng: np.random.Generator
                        ) -> tuple[int, int, int]:
    """Draw the hop uniformly from ``1..cfg.max_hop``; returns (start, end, hop).

    A negative start means there is nothing to remember and the pair gets an
    all-PAD prior.
    """
    hop = int(rng.integers(1, cfg.max_hop + 1))
    start, end = prior_window(i, hop, cfg.n_frames)
    return start, end, hop


def pad_ids(ids: Sequence[int], length: int) -> np.ndarray:
    if len(ids) > length:
        raise ValueError(f"{len(ids)} tokens exceed padded length {length}")
    out = np.zeros(length, dtype=np.int64)
    out[:len(ids)] = ids
    return out


def encode_ids(notes: NoteSequence, window: SegmentWindow, n_tokens: int,
               vocab: Vocabulary = codec.DEFAULT_VOCAB) -> np.ndarray:
    tokens = codec.encode_segment(notes, window, max_tokens=n_tokens, vocab=vocab)
    return pad_ids(vocab.encode(tokens), n_tokens)


def make_training_pairs(audio: AudioBuffer | np.ndarray, notes: NoteSequence, cfg: SegmentConfig,
                        rng: np.random.Generator, vocab: Vocabulary = codec.DEFAULT_VOCAB
                        ) -> list[TrainingPair]:
    """One pair per grid window. ``audio`` may be precomputed log-mel frames."""
    frames = audio if isinstance(audio, np.ndarray) and audio.ndim == 2 else log_mel(audio)
    total = len(frames)
    pairs = []
    for i in window_grid(total, cfg.n_frames):
        stop = min(i + cfg.n_frames, total)
        chunk = np.zeros((cfg.n_frames, frames.shape[1] if total else N_MELS), dtype=np.float32)
        chunk[:stop - i] = frames[i:stop]
        window = frame_window(i, stop)
        target = encode_ids(notes, window, cfg.n_tokens, vocab)
        p_start, p_end, hop = sample_prior_window(i, cfg, rng)
        if p_start < 0:
            prior = np.zeros(cfg.n_tokens, dtype=np.int64)
        else:
            prior = encode_ids(notes, frame_window(p_start, p_end), cfg.n_tokens, vocab)
        pairs.append(TrainingPair(chunk, target, prior, hop, stop - i, window))
    return pairs


def batch_consecutive(tracks: Sequence[Sequence[TrainingPair]], rng: np.random.Generator,
                      size: int = 12) -> list[TrainingPair]:
    """``size`` temporally consecutive pairs from a randomly chosen track.

    When the chosen track has fewer than ``size`` pairs, all of them are taken
    and the batch is topped up from another randomly drawn track (tracks repeat
    only once every track has been used).
    """
    candidates = [t for t in tracks if len(t)]
    if not candidates:
        raise ValueError("need at least one non-empty track")
    batch: list[TrainingPair] = []
    unused = list(range(len(candidates)))
    while len(batch) < size:
        if not unused:
            unused = list(range(len(candidates)))
        track = candidates[unused.pop(int(rng.integers(len(unused))))]
        need = size - len(batch)
        if len(track) >= need:
            start = int(rng.integers(0, len(track) - need + 1))
            batch.extend(track[start:start + need])
        else:
            batch.extend(track)
    return batch
