"""Synthetic multi-instrument corpora and the line-delimited dataset manifest.

``disambiguation`` mode produces twin tracks that differ only in which of two
same-timbre programs plays them. A short cue note in the first window (a
different pitch per program) is the only acoustic hint, so later windows can
only be attributed correctly by remembering earlier ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, synthesize_additive, write_wav
from .midi_io import NoteEvent, NoteSequence, parse_smf, write_smf

SPLITS = ("train", "val", "test")
SPLIT_RATIO = (90, 5, 5)
TWIN_PROGRAMS = (0, 1)          # same MIDI class, hence identical synthesized timbre
CUE_PITCHES = {0: 36, 1: 96}    # first-window cue that identifies the program
DRUM_PITCHES = (36, 38, 42, 46)


@dataclass(frozen=True)
class SyntheticSpec:
    n_tracks: int = 20
    track_seconds: float = 4.096
    max_instruments: int = 2        # melodic programs per track, 1..4
    drums: bool = False
    notes_per_track: int = 8
    polyphony: int = 2
    seed: int = 0
    mode: str = "standard"          # or "disambiguation"
    pitch_range: tuple[int, int] = (48, 84)
    min_duration_s: float = 0.15
    max_duration_s: float = 0.6

    def __post_init__(self):
        if self.n_tracks < 1 or not 1 <= self.max_instruments <= 4 or self.polyphony < 1:
            raise ValueError(f"invalid synthetic spec: {self}")
        if self.mode not in ("standard", "disambiguation"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "disambiguation" and self.n_tracks % 2:
            raise ValueError("disambiguation corpora need an even number of tracks (twin pairs)")
        if self.track_seconds < 1.0:
            raise ValueError("tracks must last at least one second")


def split_counts(n: int, ratio=SPLIT_RATIO) -> tuple[int, ...]:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier split."""
    quotas = [n * r / sum(ratio) for r in ratio]
    counts = [int(q) for q in quotas]
    order = sorted(range(len(ratio)), key=lambda k: (-(quotas[k] - counts[k]), k))
    for k in order[: n - sum(counts)]:
        counts[k] += 1
    return tuple(counts)


def _fits(notes: list[NoteEvent], cand: NoteEvent, polyphony: int) -> bool:
    overlapping = [n for n in notes if not n.is_drum and n.onset_s < cand.offset_s
                   and cand.onset_s < n.offset_s]
    if any(n.pitch == cand.pitch and n.program == cand.program for n in overlapping):
        return False
    return len(overlapping) < polyphony


def _melody(rng: np.random.Generator, spec: SyntheticSpec, programs, count: int,
            start: float, end: float, notes=None) -> list[NoteEvent]:
    notes = list(notes or [])
    lo, hi = spec.pitch_range
    placed = tries = 0
    while placed < count and tries < 200 * max(count, 1):
        tries += 1
        onset = round(float(rng.uniform(start, end - spec.min_duration_s)), 3)
        dur = float(rng.uniform(spec.min_duration_s, spec.max_duration_s))
        offset = round(min(onset + dur, end), 3)
        if offset - onset < spec.min_duration_s / 2:
            continue
        cand = NoteEvent(onset, offset, int(rng.integers(lo, hi + 1)),
                         int(programs[int(rng.integers(len(programs)))]))
        if _fits(notes, cand, spec.polyphony):
            notes.append(cand)
            placed += 1
    return notes


def generate_track(spec: SyntheticSpec, index: int) -> NoteSequence:
    """Notes of track ``index``; deterministic in (spec.seed, index)."""
    if spec.mode == "disambiguation":
        return _twin_track(spec, index // 2, TWIN_PROGRAMS[index % 2])
    rng = np.random.default_rng([spec.seed, index])
    n_inst = int(rng.integers(1, spec.max_instruments + 1))
    programs = rng.choice(128, size=n_inst, replace=False)
    notes = _melody(rng, spec, programs, spec.notes_per_track, 0.0, spec.track_seconds)
    if spec.drums:
        for _ in range(max(1, spec.notes_per_track // 4)):
            t = round(float(rng.uniform(0.0, spec.track_seconds - 0.05)), 3)
            notes.append(NoteEvent(t, t, int(rng.choice(DRUM_PITCHES)), 0, True))
    return NoteSequence(notes, spec.track_seconds)


def _twin_track(spec: SyntheticSpec, pair: int, program: int) -> NoteSequence:
    rng = np.random.default_rng([spec.seed, pair])
    body = _melody(rng, spec, [program], spec.notes_per_track, 1.2, spec.track_seconds)
    cue = NoteEvent(0.1, 0.7, CUE_PITCHES[program], program)
    return NoteSequence([cue] + body, spec.track_seconds)


def track_name(spec: SyntheticSpec, index: int) -> str:
    if spec.mode == "disambiguation":
        return f"pair{index // 2:04d}{'ab'[index % 2]}"
    return f"track{index:04d}"


def assign_splits(spec: SyntheticSpec) -> list[str]:
    """Per-track split labels; twin pairs always share a split."""
    unit = 2 if spec.mode == "disambiguation" else 1
    n_units = spec.n_tracks // unit
    order = np.random.default_rng([spec.seed, 10**6]).permutation(n_units)
    labels = [""] * n_units
    pos = 0
    for split, count in zip(SPLITS, split_counts(n_units)):
        for u in order[pos:pos + count]:
            labels[u] = split
        pos += count
    return [labels[k // unit] for k in range(spec.n_tracks)]


def make_dataset(spec: SyntheticSpec, out_dir: str | Path, sample_rate: int = SAMPLE_RATE
                 ) -> Path:
    """Write MIDI + WAV per track and ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    (out / "tracks").mkdir(parents=True, exist_ok=True)
    splits = assign_splits(spec)
    records = []
    for k in range(spec.n_tracks):
        name = track_name(spec, k)
        notes = generate_track(spec, k)
        midi = write_smf(notes)
        (out / "tracks" / f"{name}.mid").write_bytes(midi)
        # render from the parsed file so audio and MIDI agree to the tick
        audio = synthesize_additive(parse_smf(midi), sample_rate, duration_s=spec.track_seconds)
        write_wav(audio, out / "tracks" / f"{name}.wav")
        records.append({"name": name, "audio_path": f"tracks/{name}.wav",
                        "midi_path": f"tracks/{name}.mid", "split": splits[k]})
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    (out / "spec.json").write_text(json.dumps(spec.__dict__, sort_keys=True, indent=2) + "\n")
    return manifest


@dataclass
class ManifestRecord:
    name: str
    audio_path: Path
    midi_path: Path
    split: str


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            rec = ManifestRecord(d.get("name") or Path(d["audio_path"]).stem,
                                 path.parent / d["audio_path"], path.parent / d["midi_path"],
                                 d["split"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
        if rec.split not in SPLITS:
            raise ValueError(f"{path}:{lineno}: unknown split {rec.split!r}")
        records.append(rec)
    return records
