"""Event-token language for one audio window.

A token sequence has two parts::

    tie section    (PROGRAM PITCH)* TIE
    event section  (TIME (PROGRAM NOTE_OFF PITCH)* (PROGRAM NOTE_ON PITCH)*)* EOS

The tie section lists notes that are still sounding when the window begins.
Inside a time step, note-off groups come before note-on groups and each section
is sorted by (program, pitch). Drums use program 128 and never emit NOTE_OFF.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .midi_io import NoteEvent, NoteSequence

TIME_STEP_S = 0.010
DRUM_PROGRAM = 128
N_PROGRAMS = 129
N_PITCHES = 128
MAX_TOKENS = 1024


class GrammarError(ValueError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index  # offending token position, when known


class Token(NamedTuple):
    kind: str
    value: int | None = None

    def __str__(self):
        if self.kind == "TIME":
            return f"T{self.value}"
        if self.kind == "PROGRAM":
            return f"P{self.value}"
        if self.kind == "PITCH":
            return f"N{self.value}"
        return _SHORT.get(self.kind, self.kind)


_SHORT = {"NOTE_ON": "ON", "NOTE_OFF": "OFF"}
_LONG = {"ON": "NOTE_ON", "OFF": "NOTE_OFF"}
PAD, SOS, EOS, TIE = Token("PAD"), Token("SOS"), Token("EOS"), Token("TIE")
NOTE_ON, NOTE_OFF = Token("NOTE_ON"), Token("NOTE_OFF")


def TIME(t: int) -> Token:
    return Token("TIME", t)


def PROGRAM(p: int) -> Token:
    return Token("PROGRAM", p)


def PITCH(n: int) -> Token:
    return Token("PITCH", n)


@dataclass(frozen=True)
class SegmentWindow:
    start_s: float
    end_s: float

    def __post_init__(self):
        if not self.end_s > self.start_s:
            raise ValueError(f"window end {self.end_s} must exceed start {self.start_s}")


def time_bins_for(seconds: float) -> int:
    return math.ceil(round(seconds / TIME_STEP_S, 9))


class Vocabulary:
    """Contiguous id layout: PAD, SOS, EOS, TIE, TIME*, PROGRAM*129, ON, OFF, PITCH*128."""

    def __init__(self, t_max: int = time_bins_for(2.048)):
        self.t_max = t_max
        self.time_base = 4
        self.program_base = self.time_base + t_max
        self.note_on = self.program_base + N_PROGRAMS
        self.note_off = self.note_on + 1
        self.pitch_base = self.note_off + 1
        self.size = self.pitch_base + N_PITCHES

    pad_id, sos_id, eos_id, tie_id = 0, 1, 2, 3

    def __len__(self):
        return self.size

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and other.t_max == self.t_max

    def __hash__(self):
        return hash(self.t_max)

    def token_to_id(self, tok: Token) -> int:
        kind, v = tok
        fixed = {"PAD": 0, "SOS": 1, "EOS": 2, "TIE": 3}
        if kind in fixed:
            return fixed[kind]
        if kind == "NOTE_ON":
            return self.note_on
        if kind == "NOTE_OFF":
            return self.note_off
        limits = {"TIME": (self.time_base, self.t_max), "PROGRAM": (self.program_base, N_PROGRAMS),
                  "PITCH": (self.pitch_base, N_PITCHES)}
        if kind not in limits:
            raise ValueError(f"unknown token kind {kind!r}")
        base, count = limits[kind]
        if v is None or not 0 <= v < count:
            raise ValueError(f"{kind} value out of range: {v}")
        return base + v

    def id_to_token(self, i: int) -> Token:
        i = int(i)
        if not 0 <= i < self.size:
            raise ValueError(f"token id {i} outside vocabulary of size {self.size}")
        if i < 4:
            return (PAD, SOS, EOS, TIE)[i]
        if i < self.program_base:
            return TIME(i - self.time_base)
        if i < self.note_on:
            return PROGRAM(i - self.program_base)
        if i == self.note_on:
            return NOTE_ON
        if i == self.note_off:
            return NOTE_OFF
        return PITCH(i - self.pitch_base)

    def encode(self, tokens) -> list[int]:
        return [self.token_to_id(t) for t in tokens]

    def decode(self, ids) -> list[Token]:
        return [self.id_to_token(i) for i in ids]


DEFAULT_VOCAB = Vocabulary()


def vocab_size(vocab: Vocabulary = DEFAULT_VOCAB) -> int:
    return vocab.size


def token_to_id(tok: Token, vocab: Vocabulary = DEFAULT_VOCAB) -> int:
    return vocab.token_to_id(tok)


def id_to_token(i: int, vocab: Vocabulary = DEFAULT_VOCAB) -> Token:
    return vocab.id_to_token(i)


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------

def tokens_to_text(tokens) -> str:
    return " ".join(str(t) for t in tokens)


def tokens_from_text(text: str) -> list[Token]:
    """Parse the space-separated text form; raises ``GrammarError`` naming the column."""
    out = []
    col = 0
    for word in text.split(" "):
        if word:
            out.append(_parse_word(word, col + 1))
        col += len(word) + 1
    return out


def _parse_word(word: str, col: int) -> Token:
    if word in ("PAD", "SOS", "EOS", "TIE"):
        return Token(word)
    if word in _LONG:
        return Token(_LONG[word])
    prefix = {"T": "TIME", "P": "PROGRAM", "N": "PITCH"}
    if word[0] in prefix and word[1:].isdigit():
        tok = Token(prefix[word[0]], int(word[1:]))
        limit = {"TIME": 10**9, "PROGRAM": N_PROGRAMS, "PITCH": N_PITCHES}[tok.kind]
        if tok.value < limit:
            return tok
        raise GrammarError(f"column {col}: {word!r} out of range")
    raise GrammarError(f"column {col}: unknown token {word!r}")


# ---------------------------------------------------------------------------
# Structured form used by encode / shuffle / canonicalize
# ---------------------------------------------------------------------------

@dataclass
class _Parsed:
    sos: bool
    ties: list[tuple[int, int]]
    steps: list[tuple[int, list[tuple[int, int]], list[tuple[int, int]]]]  # (bin, offs, ons)
    eos: bool

    def emit(self) -> list[Token]:
        out = [SOS] if self.sos else []
        for prog, pitch in self.ties:
            out += [PROGRAM(prog), PITCH(pitch)]
        out.append(TIE)
        for t, offs, ons in self.steps:
            out.append(TIME(t))
            for prog, pitch in offs:
                out += [PROGRAM(prog), NOTE_OFF, PITCH(pitch)]
            for prog, pitch in ons:
                out += [PROGRAM(prog), NOTE_ON, PITCH(pitch)]
        if self.eos:
            out.append(EOS)
        return out


def _parse(tokens) -> _Parsed:
    toks = [t for t in tokens]
    while toks and toks[-1] == PAD:
        toks.pop()
    i, n = 0, len(toks)
    sos = bool(toks) and toks[0] == SOS
    i += sos

    def fail(msg):
        raise GrammarError(f"token {i}: {msg}", i)

    ties = []
    while True:
        if i >= n:
            fail("missing TIE")
        if toks[i] == TIE:
            i += 1
            break
        if toks[i].kind != "PROGRAM" or i + 1 >= n or toks[i + 1].kind != "PITCH":
            fail(f"expected PROGRAM PITCH or TIE in tie section, got {toks[i]}")
        if toks[i].value == DRUM_PROGRAM:
            fail("drums cannot be tied")
        ties.append((toks[i].value, toks[i + 1].value))
        i += 2

    steps = []
    eos = False
    last_t = -1
    while i < n:
        tok = toks[i]
        if tok == EOS:
            eos = True
            i += 1
            if i != n:
                fail("tokens after EOS")
            break
        if tok.kind != "TIME":
            fail(f"expected TIME, got {tok}")
        if tok.value <= last_t:
            fail("TIME values must strictly increase")
        last_t = tok.value
        i += 1
        offs, ons = [], []
        while i < n and toks[i].kind == "PROGRAM":
            if i + 2 >= n or toks[i + 1] not in (NOTE_ON, NOTE_OFF) or toks[i + 2].kind != "PITCH":
                fail("malformed event group")
            group = (toks[i].value, toks[i + 2].value)
            if toks[i + 1] == NOTE_OFF:
                if ons:
                    fail("NOTE_OFF group after NOTE_ON group in one time step")
                if group[0] == DRUM_PROGRAM:
                    fail("drums cannot emit NOTE_OFF")
                offs.append(group)
            else:
                ons.append(group)
            i += 3
        if not offs and not ons:
            fail("TIME without event groups")
        steps.append((last_t, offs, ons))
    return _Parsed(sos, ties, steps, eos)


def check_grammar(tokens) -> None:
    """Raise ``GrammarError`` (with ``index`` set) unless ``tokens`` is a well-formed segment."""
    _parse(tokens)


def is_grammar_valid(tokens) -> bool:
    try:
        _parse(tokens)
    except GrammarError:
        return False
    return True


def canonicalize(tokens) -> list[Token]:
    """Sort tie pairs and each on/off section by (program, pitch). Idempotent."""
    p = _parse(tokens)
    p.ties.sort()
    for _, offs, ons in p.steps:
        offs.sort()
        ons.sort()
    return p.emit()


def shuffle_tokens(tokens, rng: np.random.Generator) -> list[Token]:
    """Permute tie pairs and, independently, the groups of every on/off section.

    The decoded notes are unchanged; only the within-section order moves.
    """
    p = _parse(tokens)

    def permute(items):
        if len(items) > 1:
            order = rng.permutation(len(items))
            items[:] = [items[k] for k in order]

    permute(p.ties)
    for _, offs, ons in p.steps:
        permute(offs)
        permute(ons)
    return p.emit()


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def time_bin(t: float, window: SegmentWindow, t_max: int) -> int:
    """Nearest 10 ms step from the window start (half rounds up), capped at ``t_max - 1``."""
    rel = (t - window.start_s) / TIME_STEP_S
    return min(int(math.floor(round(rel, 9) + 0.5)), t_max - 1)


def bin_time(b: int, window: SegmentWindow) -> float:
    return window.start_s + b * TIME_STEP_S


def encode_segment(seq: NoteSequence, window: SegmentWindow, *, max_tokens: int = MAX_TOKENS,
                   vocab: Vocabulary = DEFAULT_VOCAB) -> list[Token]:
    """Tokens for the notes of ``seq`` that fall into ``window``.

    Onsets are kept when they lie in ``[start_s, end_s)`` and offsets when they lie
    in ``(start_s, end_s)``. A melodic note
    whose quantized offset would not come after its quantized onset is stretched
    to one time step. If the result exceeds ``max_tokens``, whole event groups are
    dropped from the tail and EOS is kept as the final token.
    """
    start, end = window.start_s, window.end_s
    ties = []
    steps: dict[int, tuple[list, list]] = {}

    def at(b):
        return steps.setdefault(b, ([], []))

    for n in seq.notes:
        prog = DRUM_PROGRAM if n.is_drum else n.program
        on_in = start <= n.onset_s < end
        if on_in:
            b_on = time_bin(n.onset_s, window, vocab.t_max)
            at(b_on)[1].append((prog, n.pitch))
        if n.is_drum:
            continue
        if n.onset_s < start < n.offset_s:
            ties.append((prog, n.pitch))
        if start < n.offset_s < end:  # an offset exactly at ``start`` ended the previous window
            b_off = time_bin(n.offset_s, window, vocab.t_max)
            if on_in and b_off <= b_on:
                b_off = b_on + 1
                if b_off >= vocab.t_max:
                    continue  # stays open past the window; the next window ties it
            at(b_off)[0].append((prog, n.pitch))

    parsed = _Parsed(False, sorted(ties), [], True)
    for b in sorted(steps):
        offs, ons = steps[b]
        parsed.steps.append((b, sorted(offs), sorted(ons)))
    return _truncate(parsed, max_tokens)


def _truncate(p: _Parsed, max_tokens: int) -> list[Token]:
    tokens = p.emit()
    if len(tokens) <= max_tokens:
        return tokens
    budget = max_tokens - 1  # reserve EOS
    out = []
    for prog, pitch in p.ties:
        if len(out) + 3 > budget:  # pair + TIE
            break
        out += [PROGRAM(prog), PITCH(pitch)]
    out.append(TIE)
    for t, offs, ons in p.steps:
        if len(out) + 4 > budget:
            break
        out.append(TIME(t))
        for prog, pitch in offs:
            if len(out) + 3 > budget:
                break
            out += [PROGRAM(prog), NOTE_OFF, PITCH(pitch)]
        for prog, pitch in ons:
            if len(out) + 3 > budget:
                break
            out += [PROGRAM(prog), NOTE_ON, PITCH(pitch)]
    out.append(EOS)
    return out


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

@dataclass
class DecodeResult:
    notes: NoteSequence
    held: dict[tuple[int, int], float]
    violations: Counter
    closed: dict[tuple[int, int], float]  # held notes ended at the window start


def decode_tokens(tokens, window: SegmentWindow, held=None) -> DecodeResult:
    """Turn (possibly malformed) tokens back into notes.

    ``held`` maps (program, pitch) to the onset of notes still sounding from the
    previous window; a plain set is accepted when onsets are unknown (such
    notes can only be reported in ``closed``). Held notes missing from the tie section end at the window
    start. Notes still open at the end are returned in ``DecodeResult.held``
    instead of being closed. Malformed tokens are skipped and tallied by
    category in ``violations``.
    """
    if held is None:
        held = {}
    elif not isinstance(held, dict):
        held = {k: window.start_s for k in held}
    toks = [t for t in tokens]
    viol: Counter = Counter()
    notes: list[NoteEvent] = []
    open_notes: dict[tuple[int, int], float] = {}

    i = 0
    if toks and toks[0] == SOS:
        i = 1

    def close(key, t):
        onset = open_notes.pop(key)
        if t > onset:
            notes.append(NoteEvent(onset, t, key[1], key[0], False))
        else:
            viol["zero_length"] += 1

    # tie section
    tied = set()
    prog = None
    n = len(toks)
    saw_tie = False
    while i < n:
        tok = toks[i]
        if tok == TIE:
            saw_tie = True
            i += 1
            break
        if tok.kind == "TIME" or tok == EOS:
            break
        if tok.kind == "PROGRAM":
            if prog is not None:
                viol["program_without_pitch"] += 1
            prog = tok.value
        elif tok.kind == "PITCH":
            if prog is None:
                viol["pitch_without_group"] += 1
            elif prog == DRUM_PROGRAM:
                viol["drum_tie"] += 1
            else:
                tied.add((prog, tok.value))
            prog = None
        else:
            viol["bad_tie_token"] += 1
        i += 1
    if prog is not None:
        viol["program_without_pitch"] += 1
    if not saw_tie:
        viol["missing_tie"] += 1

    closed = {}
    for key in sorted(held):
        open_notes[key] = held[key]
        if key not in tied:
            closed[key] = window.start_s
            if window.start_s > held[key]:
                close(key, window.start_s)
            else:
                del open_notes[key]
    for key in sorted(tied - set(held)):
        viol["tie_not_held"] += 1
        open_notes[key] = window.start_s

    # event section
    t = None
    prog = marker = None
    while i < n:
        tok = toks[i]
        i += 1
        if tok == EOS:
            break
        if tok.kind == "TIME":
            if prog is not None:
                viol["incomplete_group"] += 1
                prog = marker = None
            if t is not None and tok.value < t:
                viol["time_reversed"] += 1
                continue
            t = tok.value
        elif tok.kind == "PROGRAM":
            if prog is not None:
                viol["incomplete_group"] += 1
            prog, marker = tok.value, None
        elif tok in (NOTE_ON, NOTE_OFF):
            if prog is None or marker is not None:
                viol["marker_without_program"] += 1
                prog = marker = None
                continue
            marker = tok
        elif tok.kind == "PITCH":
            if prog is None or marker is None:
                viol["pitch_without_group"] += 1
                prog = marker = None
                continue
            if t is None:
                viol["event_before_time"] += 1
                prog = marker = None
                continue
            now = bin_time(t, window)
            key = (prog, tok.value)
            if prog == DRUM_PROGRAM:
                if marker == NOTE_OFF:
                    viol["drum_note_off"] += 1
                else:
                    notes.append(NoteEvent(now, now, tok.value, 0, True))
            elif marker == NOTE_ON:
                if key in open_notes:
                    viol["note_on_while_open"] += 1
                    close(key, now)
                open_notes[key] = now
            elif key in open_notes:
                close(key, now)
            else:
                viol["off_without_open"] += 1
            prog = marker = None
        else:
            viol["unexpected_" + tok.kind.lower()] += 1
    if prog is not None:
        viol["incomplete_group"] += 1

    return DecodeResult(NoteSequence(notes), dict(open_notes), viol, closed)


def close_held(held: dict[tuple[int, int], float], t: float) -> list[NoteEvent]:
    """Finish notes left open after the last window."""
    return [NoteEvent(on, t, pitch, prog, False)
            for (prog, pitch), on in sorted(held.items()) if t > on]
