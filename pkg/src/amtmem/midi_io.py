"""Standard MIDI File reading/writing and the note containers used everywhere else.

Only note on/off, program change and tempo events are interpreted; every other
event is skipped. Velocities are dropped.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)

DRUM_CHANNEL = 9  # channel 10, 1-indexed
DEFAULT_TEMPO = 500_000  # µs per quarter note (120 bpm)


class MidiParseError(ValueError):
    """Malformed SMF content. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class NoteEvent:
    onset_s: float
    offset_s: float
    pitch: int
    program: int
    is_drum: bool = False

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch out of range: {self.pitch}")
        if not 0 <= self.program <= 127:
            raise ValueError(f"program out of range: {self.program}")
        if self.onset_s < 0:
            raise ValueError(f"negative onset: {self.onset_s}")
        if self.is_drum:
            if self.offset_s != self.onset_s:
                raise ValueError("drum notes are onset-only (offset_s must equal onset_s)")
        elif not self.offset_s > self.onset_s:
            raise ValueError(f"offset {self.offset_s} must exceed onset {self.onset_s}")

    @property
    def instrument(self) -> int:
        """Program number, or 128 for drums."""
        return 128 if self.is_drum else self.program

    def sort_key(self):
        return (self.onset_s, self.is_drum, self.program, self.pitch, self.offset_s)


def drum(onset_s: float, pitch: int) -> NoteEvent:
    return NoteEvent(onset_s, onset_s, pitch, 0, True)


@dataclass
class NoteSequence:
    notes: list[NoteEvent] = field(default_factory=list)
    duration_s: float = 0.0

    def __post_init__(self):
        self.notes = sorted(self.notes, key=NoteEvent.sort_key)
        end = max((n.offset_s for n in self.notes), default=0.0)
        self.duration_s = max(float(self.duration_s), end)

    def __len__(self):
        return len(self.notes)

    def __iter__(self):
        return iter(self.notes)

    @property
    def instruments(self) -> set[int]:
        return {n.instrument for n in self.notes}

    def to_dict(self) -> dict:
        return {
            "duration_s": self.duration_s,
            "notes": [
                [n.onset_s, n.offset_s, n.pitch, n.program, n.is_drum] for n in self.notes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> NoteSequence:
        notes = [NoteEvent(float(a), float(b), int(p), int(g), bool(dr)) for a, b, p, g, dr in d["notes"]]
        return cls(notes, d.get("duration_s", 0.0))


@dataclass
class ParseStats:
    dangling_notes: int = 0
    zero_length_notes: int = 0
    tracks: int = 0


# ---------------------------------------------------------------------------
# Reading
# ---------------------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes, pos: int = 0, end: int | None = None):
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise MidiParseError(f"unexpected end of data reading {n} bytes", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def byte(self) -> int:
        return self.take(1)[0]

    def varlen(self) -> int:
        value = 0
        for _ in range(4):
            b = self.byte()
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise MidiParseError("variable-length quantity longer than 4 bytes", self.pos)


def _read_track(r: _Reader):
    """Yield (tick, kind, payload) tuples for the events we care about."""
    tick = 0
    status = None
    events = []
    while r.pos < r.end:
        tick += r.varlen()
        start = r.pos
        b = r.byte()
        if b == 0xFF:
            kind = r.byte()
            data = r.take(r.varlen())
            if kind == 0x51:
                if len(data) != 3:
                    raise MidiParseError("tempo meta event must carry 3 bytes", start)
                events.append((tick, "tempo", int.from_bytes(data, "big")))
            elif kind == 0x2F:
                events.append((tick, "end", None))
                break
            status = None
            continue
        if b in (0xF0, 0xF7):
            r.take(r.varlen())
            status = None
            continue
        if b & 0x80:
            if b >= 0xF0:
                raise MidiParseError(f"unsupported system message 0x{b:02X}", start)
            status = b
            d1 = r.byte()
        else:
            if status is None:
                raise MidiParseError("data byte without running status", start)
            d1 = b
        kind, ch = status & 0xF0, status & 0x0F
        if kind in (0xC0, 0xD0):
            d2 = None
        else:
            d2 = r.byte()
        if d1 > 127 or (d2 is not None and d2 > 127):
            raise MidiParseError("data byte has high bit set", start)
        if kind == 0x90 and d2 > 0:
            events.append((tick, "on", (ch, d1)))
        elif kind == 0x80 or kind == 0x90:
            events.append((tick, "off", (ch, d1)))
        elif kind == 0xC0:
            events.append((tick, "program", (ch, d1)))
    else:
        events.append((tick, "end", None))
    return events


class _TempoMap:
    def __init__(self, changes: list[tuple[int, int]], division: int, smpte: float | None):
        self.division = division
        self.smpte = smpte  # ticks per second when the header uses SMPTE timing
        pts = [(0, DEFAULT_TEMPO)]
        for tick, tempo in sorted(changes, key=lambda c: c[0]):
            if tick == pts[-1][0]:
                pts[-1] = (tick, tempo)
            else:
                pts.append((tick, tempo))
        self.points = []
        seconds = 0.0
        for k, (tick, tempo) in enumerate(pts):
            if k:
                prev_tick, prev_tempo = pts[k - 1]
                seconds += (tick - prev_tick) * prev_tempo / 1e6 / division
            self.points.append((tick, tempo, seconds))

    def seconds(self, tick: int) -> float:
        if self.smpte is not None:
            return tick / self.smpte
        base_tick, tempo, base_s = self.points[0]
        for p in self.points:
            if p[0] > tick:
                break
            base_tick, tempo, base_s = p
        return base_s + (tick - base_tick) * tempo / 1e6 / self.division


def parse_smf_with_stats(data: bytes) -> tuple[NoteSequence, ParseStats]:
    """Parse format-0/1 SMF bytes; see :func:`parse_smf`."""
    try:
        return _parse(bytes(data))
    except MidiParseError:
        raise
    except (ValueError, IndexError, struct.error) as exc:  # pragma: no cover - defensive
        raise MidiParseError(f"malformed SMF: {exc}", 0) from exc


def parse_smf(data: bytes) -> NoteSequence:
    """Parse SMF bytes into a canonical :class:`NoteSequence`.

    Same-pitch note-ons on one channel pair FIFO with note-offs; a note-on with
    velocity 0 is a note-off. Notes on channel 10 become onset-only drums. Notes
    still sounding at end-of-track are closed there and counted as dangling.
    """
    seq, stats = parse_smf_with_stats(data)
    if stats.dangling_notes:
        logger.warning("closed %d dangling note(s) at end of track", stats.dangling_notes)
    return seq


def _parse(data: bytes) -> tuple[NoteSequence, ParseStats]:
    r = _Reader(data)
    if r.take(4) != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    hlen = struct.unpack(">I", r.take(4))[0]
    if hlen < 6:
        raise MidiParseError("header chunk shorter than 6 bytes", 4)
    fmt, ntrks, division = struct.unpack(">HHH", r.take(6))
    r.take(hlen - 6)
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)
    smpte = None
    if division & 0x8000:
        fps = 256 - (division >> 8)
        smpte = float(fps * (division & 0xFF))
        if smpte <= 0:
            raise MidiParseError("invalid SMPTE division", 12)
    elif division == 0:
        raise MidiParseError("division of zero ticks per quarter note", 12)

    tracks = []
    while r.pos < len(data) and len(tracks) < ntrks:
        chunk_at = r.pos
        tag = r.take(4)
        length = struct.unpack(">I", r.take(4))[0]
        if r.pos + length > len(data):
            raise MidiParseError("chunk length exceeds file size", chunk_at + 4)
        if tag == b"MTrk":
            tracks.append(_read_track(_Reader(data, r.pos, r.pos + length)))
        elif not all(32 <= c < 127 for c in tag):
            raise MidiParseError(f"invalid chunk tag {tag!r}", chunk_at)
        r.pos += length
    if len(tracks) < ntrks:
        raise MidiParseError(f"header declares {ntrks} tracks, found {len(tracks)}", r.pos)

    tempo_map = _TempoMap(
        [(t, v) for trk in tracks for t, k, v in trk if k == "tempo"], division, smpte
    )
    # (tick, track, index) orders program changes across the merged timeline
    programs: dict[int, list[tuple[tuple[int, int, int], int]]] = {}
    for ti, trk in enumerate(tracks):
        for ei, (tick, kind, payload) in enumerate(trk):
            if kind == "program":
                programs.setdefault(payload[0], []).append(((tick, ti, ei), payload[1]))
    for changes in programs.values():
        changes.sort()

    def program_at(ch: int, key: tuple[int, int, int]) -> int:
        current = 0
        for k, prog in programs.get(ch, ()):
            if k > key:
                break
            current = prog
        return current

    stats = ParseStats(tracks=len(tracks))
    notes: list[NoteEvent] = []
    last_tick = 0

    def emit(ch, pitch, on_tick, off_tick, prog):
        on_s = tempo_map.seconds(on_tick)
        if ch == DRUM_CHANNEL:
            notes.append(NoteEvent(on_s, on_s, pitch, 0, True))
            return
        off_s = tempo_map.seconds(off_tick)
        if off_s <= on_s:
            stats.zero_length_notes += 1
            return
        notes.append(NoteEvent(on_s, off_s, pitch, prog, False))

    for ti, trk in enumerate(tracks):
        open_notes: dict[tuple[int, int], list[tuple[int, int]]] = {}
        end_tick = 0
        for ei, (tick, kind, payload) in enumerate(trk):
            end_tick = tick
            if kind == "on":
                prog = program_at(payload[0], (tick, ti, ei))
                open_notes.setdefault(payload, []).append((tick, prog))
            elif kind == "off":
                queue = open_notes.get(payload)
                if queue:
                    on_tick, prog = queue.pop(0)
                    emit(payload[0], payload[1], on_tick, tick, prog)
        for (ch, pitch), queue in open_notes.items():
            for on_tick, prog in queue:
                stats.dangling_notes += 1
                emit(ch, pitch, on_tick, end_tick, prog)
        last_tick = max(last_tick, end_tick)

    duration = tempo_map.seconds(last_tick) if tracks else 0.0
    return NoteSequence(notes, duration), stats


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------

def _varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def _chunk(tag: bytes, body: bytes) -> bytes:
    return tag + struct.pack(">I", len(body)) + body


def _track(events: list[tuple[int, int, bytes]], end_tick: int) -> bytes:
    # events: (tick, order, message); order puts note-offs before note-ons at a tick
    out = bytearray()
    now = 0
    for tick, _, msg in sorted(events, key=lambda e: (e[0], e[1])):
        out += _varlen(tick - now) + msg
        now = tick
    out += _varlen(max(end_tick - now, 0)) + b"\xff\x2f\x00"
    return bytes(out)


def write_smf(seq: NoteSequence, ppq: int = 480) -> bytes:
    """Serialize as format-1 SMF at a fixed 120 bpm, one track per instrument.

    Melodic instruments take channels 1-16 except 10 (at most 15 programs);
    drums go to channel 10.
    """
    if ppq < 24 or ppq > 0x7FFF:
        raise ValueError(f"ppq must be in [24, 32767], got {ppq}")
    ticks_per_s = ppq * 1e6 / DEFAULT_TEMPO

    def tick(t: float) -> int:
        return int(t * ticks_per_s + 0.5)

    groups: dict[tuple[bool, int], list[NoteEvent]] = {}
    for n in seq.notes:
        groups.setdefault((n.is_drum, n.program), []).append(n)
    melodic = sorted(p for d, p in groups if not d)
    if len(melodic) > 15:
        raise ValueError("at most 15 melodic programs can be written to one SMF")
    channels = [c for c in range(16) if c != DRUM_CHANNEL]
    end_tick = tick(seq.duration_s)

    tempo = b"\x00\xff\x51\x03" + DEFAULT_TEMPO.to_bytes(3, "big")
    timesig = b"\x00\xff\x58\x04\x04\x02\x18\x08"
    chunks = [_chunk(b"MTrk", tempo + timesig + _varlen(end_tick) + b"\xff\x2f\x00")]

    for (is_drum, program), notes in sorted(groups.items()):
        ch = DRUM_CHANNEL if is_drum else channels[melodic.index(program)]
        events = [] if is_drum else [(0, 0, bytes([0xC0 | ch, program]))]
        for n in notes:
            on = tick(n.onset_s)
            off = on + 1 if is_drum else max(tick(n.offset_s), on + 1)
            events.append((on, 2, bytes([0x90 | ch, n.pitch, 100])))
            events.append((off, 1, bytes([0x80 | ch, n.pitch, 64])))
            end_tick = max(end_tick, off)
        chunks.append(_chunk(b"MTrk", _track(events, end_tick)))

    header = _chunk(b"MThd", struct.pack(">HHH", 1, len(chunks), ppq))
    return header + b"".join(chunks)
