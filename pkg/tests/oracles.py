"""Independent reference computations shared by the unit and acceptance tests."""

from __future__ import annotations

import math
from fractions import Fraction
from functools import lru_cache

import numpy as np

from amtmem import codec
from amtmem.codec import decode_tokens, encode_segment
from amtmem.midi_io import NoteEvent, NoteSequence, drum
from amtmem.segmenter import frame_window

N_F, HOP_S = 256, Fraction(8, 1000)
WINDOW_S = N_F * HOP_S  # exactly 2.048
STEP = Fraction(1, 100)
T_MAX = 205


def random_track(rng: np.random.Generator, n_windows: int, n_notes: int = 14) -> NoteSequence:
    """Times on a 0.5 ms lattice (so exact half steps occur); same-key notes keep a gap."""
    span = n_windows * 2.048
    notes: list[NoteEvent] = []
    programs = [int(p) for p in rng.choice(128, size=int(rng.integers(1, 4)), replace=False)]
    for _ in range(20 * n_notes):
        if len(notes) >= n_notes:
            break
        onset = int(rng.integers(0, int(span * 2000) - 40)) / 2000
        if rng.random() < 0.15:
            cand = drum(onset, int(rng.integers(35, 50)))
        else:
            dur = int(rng.integers(1, 3000)) / 2000
            offset = min(onset + dur, span - 0.005)
            if offset <= onset:
                continue
            cand = NoteEvent(onset, offset, int(rng.integers(30, 90)), int(rng.choice(programs)))
        if not cand.is_drum and any(
                n.instrument == cand.instrument and n.pitch == cand.pitch
                and n.onset_s - 0.04 < cand.offset_s and cand.onset_s < n.offset_s + 0.04
                for n in notes):
            continue
        notes.append(cand)
    return NoteSequence(notes, span)


def _oracle_point(t: float) -> tuple[int, int]:
    """(window index, bin) of time ``t`` using exact rational arithmetic."""
    x = Fraction(t).limit_denominator(10**6)
    k = math.floor(x / WINDOW_S)
    rel = (x - k * WINDOW_S) / STEP
    return k, min(math.floor(rel + Fraction(1, 2)), T_MAX - 1)


def _time(k: int, b: int) -> float:
    return float(k * WINDOW_S + b * STEP)


def quantize_oracle(seq: NoteSequence) -> list[tuple]:
    out = []
    for n in seq.notes:
        ka, ba = _oracle_point(n.onset_s)
        if n.is_drum:
            out.append((_time(ka, ba), _time(ka, ba), n.pitch, 0, True))
            continue
        kb, bb = _oracle_point(n.offset_s)
        if Fraction(n.offset_s).limit_denominator(10**6) == kb * WINDOW_S:
            off = _time(kb, 0)  # ends exactly at a window start
        else:
            if kb == ka and bb <= ba:
                bb = ba + 1
            off = _time(kb + 1, 0) if bb >= T_MAX else _time(kb, bb)
        out.append((_time(ka, ba), off, n.pitch, n.program, False))
    return sorted(out, key=lambda r: (round(r[0], 9), r[4], r[3], r[2]))


def codec_round_trip(seq: NoteSequence, n_windows: int):
    held: dict = {}
    notes = []
    for k in range(n_windows):
        window = frame_window(k * N_F, (k + 1) * N_F)
        res = decode_tokens(encode_segment(seq, window), window, held)
        assert not res.violations, res.violations
        notes += res.notes.notes
        held = res.held
    notes += codec.close_held(held, frame_window(0, n_windows * N_F).end_s)
    got = NoteSequence(notes)
    return [(n.onset_s, n.offset_s, n.pitch, n.program, n.is_drum) for n in got.notes]


def same_notes(a, b):
    return len(a) == len(b) and all(
        abs(x[0] - y[0]) < 1e-9 and abs(x[1] - y[1]) < 1e-9 and x[2:] == y[2:] for x, y in zip(a, b))


def exhaustive_max_matching(adj: list[list[bool]]) -> int:
    """Largest matching by trying every assignment of reference rows."""
    n_est = len(adj[0]) if adj else 0

    @lru_cache(maxsize=None)
    def best(row: int, used: frozenset) -> int:
        if row == len(adj):
            return 0
        top = best(row + 1, used)  # leave this reference note unmatched
        for col in range(n_est):
            if adj[row][col] and col not in used:
                top = max(top, 1 + best(row + 1, used | {col}))
        return top

    return best(0, frozenset())


def oracle_counts(ref, est, gran, tol=0.05):
    adj = [[r.pitch == e.pitch and gran.instrument_class(r) == gran.instrument_class(e)
            and abs(r.onset_s - e.onset_s) <= tol + 1e-9 for e in est.notes] for r in ref.notes]
    tp = exhaustive_max_matching(adj) if ref.notes and est.notes else 0
    return tp, len(est.notes) - tp, len(ref.notes) - tp


# (i, hop) -> prior [start, end), worked out by hand from
# start = i - hop * N_f and end = i + (1 - hop) * N_f
PRIOR_TABLE = [
    (256, 1, 0, 256), (512, 1, 256, 512), (512, 2, 0, 256), (768, 1, 512, 768),
    (768, 2, 256, 512), (768, 3, 0, 256), (1024, 1, 768, 1024), (1024, 2, 512, 768),
    (1024, 3, 256, 512), (1024, 4, 0, 256), (1280, 2, 768, 1024), (1280, 5, 0, 256),
    (1792, 1, 1536, 1792), (1792, 7, 0, 256), (1792, 4, 768, 1024), (2048, 8, 0, 256),
    (0, 1, -256, 0), (256, 2, -256, 0), (512, 3, -256, 0), (0, 4, -1024, -768),
]
