"""Autoregressive transcription of whole tracks, window by window."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import codec
from .audio import AudioBuffer
from .codec import Vocabulary
from .midi_io import NoteSequence
from .model import MemoryTransformer
from .segmenter import frame_window, pad_ids, window_grid
from .spectral import FRAME_HOP_S, log_mel


@dataclass
class Transcription:
    notes: NoteSequence
    window_tokens: list[list[int]] = field(default_factory=list)  # predicted ids per window
    violations: Counter = field(default_factory=Counter)


def _as_frames(x) -> np.ndarray:
    if isinstance(x, AudioBuffer):
        return log_mel(x)
    return np.asarray(x)


@torch.no_grad()
def transcribe_tracks(model: MemoryTransformer, tracks: Sequence[AudioBuffer | np.ndarray],
                      vocab: Vocabulary = codec.DEFAULT_VOCAB, max_len: int | None = None
                      ) -> list[Transcription]:
    """Greedy transcription; tracks are batched together at each window index.

    Window 0 sees an all-PAD memory, window k sees the ids the model predicted
    for window k-1. Held notes are threaded between windows through the tie
    section and closed at the end of the last window.
    """
    cfg = model.cfg
    was = model.training
    model.eval()
    frames = [_as_frames(t).astype(np.float32) for t in tracks]
    grids = [window_grid(len(f), cfg.n_frames) for f in frames]
    results = [Transcription(NoteSequence()) for _ in frames]
    notes: list[list] = [[] for _ in frames]
    held: list[dict] = [{} for _ in frames]
    prev = [np.zeros(cfg.n_tokens, dtype=np.int64) for _ in frames]
    n_windows = max((len(g) for g in grids), default=0)

    for k in range(n_windows):
        active = [j for j, g in enumerate(grids) if k < len(g)]
        chunks, masks = [], []
        for j in active:
            i = grids[j][k]
            stop = min(i + cfg.n_frames, len(frames[j]))
            chunk = np.zeros((cfg.n_frames, frames[j].shape[1]), dtype=np.float32)
            chunk[:stop - i] = frames[j][i:stop]
            chunks.append(chunk)
            masks.append(np.arange(cfg.n_frames) < stop - i)
        prior = torch.from_numpy(np.stack([prev[j] for j in active]))
        out = model.greedy_decode(torch.from_numpy(np.stack(chunks)), prior,
                                  torch.from_numpy(np.stack(masks)), max_len=max_len)
        for j, ids in zip(active, out):
            i = grids[j][k]
            stop = min(i + cfg.n_frames, len(frames[j]))
            window = frame_window(i, stop)
            ids = [t for t in ids if 0 <= t < vocab.size]
            res = codec.decode_tokens(vocab.decode(ids), window, held[j])
            notes[j].extend(res.notes.notes)
            held[j] = res.held
            results[j].violations.update(res.violations)
            results[j].window_tokens.append(ids)
            prev[j] = pad_ids(ids[:cfg.n_tokens], cfg.n_tokens)

    for j, f in enumerate(frames):
        end = len(f) * FRAME_HOP_S
        notes[j].extend(codec.close_held(held[j], end))
        results[j].notes = NoteSequence(notes[j], end)
    model.train(was)
    return results


def transcribe_track(model: MemoryTransformer, audio: AudioBuffer | np.ndarray,
                     vocab: Vocabulary = codec.DEFAULT_VOCAB, max_len: int | None = None
                     ) -> Transcription:
    return transcribe_tracks(model, [audio], vocab, max_len)[0]
