"""Transcription scores: onset F1 per instrument granularity, leakage ratio, instrument detection."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .midi_io import NoteEvent, NoteSequence

ONSET_TOLERANCE_S = 0.050
_SLACK = 1e-9  # absorbs float error so that e.g. 1.05 - 1.00 counts as 50 ms


class Granularity(str, Enum):
    FLAT = "flat"
    MIDI_CLASS = "midi_class"
    FULL = "full"

    def instrument_class(self, note: NoteEvent) -> int:
        if self is Granularity.FLAT:
            return 1 if note.is_drum else 0
        if self is Granularity.MIDI_CLASS:
            return 16 if note.is_drum else note.program // 8
        return 128 if note.is_drum else note.program


GRANULARITIES = (Granularity.FLAT, Granularity.MIDI_CLASS, Granularity.FULL)


@dataclass
class PRF:
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> PRF:
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        return cls(p, r, harmonic_f1(p, r), tp, fp, fn)


def harmonic_f1(p: float, r: float) -> float:
    # The textbook denominator is P + R; a product there would give F1 = 2 at P = R = 1.
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def onset_match(ref: NoteSequence, est: NoteSequence, gran: Granularity = Granularity.FLAT,
                tol_s: float = ONSET_TOLERANCE_S) -> tuple[int, int, int]:
    """(TP, FP, FN) under a maximum-cardinality matching of onsets.

    A reference and an estimated note may match when pitch and instrument class
    agree and their onsets differ by at most ``tol_s``. Offsets are ignored.
    """
    r_notes, e_notes = list(ref.notes), list(est.notes)
    if not r_notes or not e_notes:
        return 0, len(e_notes), len(r_notes)
    r_key = np.array([(n.pitch, gran.instrument_class(n)) for n in r_notes])
    e_key = np.array([(n.pitch, gran.instrument_class(n)) for n in e_notes])
    r_on = np.array([n.onset_s for n in r_notes])
    e_on = np.array([n.onset_s for n in e_notes])
    hit = ((r_key[:, None, :] == e_key[None, :, :]).all(-1)
           & (np.abs(r_on[:, None] - e_on[None, :]) <= tol_s + _SLACK))
    if not hit.any():
        return 0, len(e_notes), len(r_notes)
    matching = maximum_bipartite_matching(csr_matrix(hit.astype(np.int8)), perm_type="column")
    tp = int((matching >= 0).sum())
    return tp, len(e_notes) - tp, len(r_notes) - tp


def onset_prf(ref, est, gran=Granularity.FLAT, tol_s=ONSET_TOLERANCE_S) -> PRF:
    return PRF.from_counts(*onset_match(ref, est, gran, tol_s))


def instrument_set(seq: NoteSequence) -> set[int]:
    """Distinct programs, with drums counted as instrument 128."""
    return {n.instrument for n in seq.notes}


def leakage_counts(pairs: Sequence[tuple[NoteSequence, NoteSequence]]) -> tuple[int, int]:
    num = sum(len(instrument_set(est)) for _, est in pairs)
    den = sum(len(instrument_set(ref)) for ref, _ in pairs)
    return num, den


def instrument_leakage_ratio(pairs: Sequence[tuple[NoteSequence, NoteSequence]]) -> float:
    """Predicted instruments over ground-truth instruments, both summed over the corpus."""
    num, den = leakage_counts(pairs)
    if den == 0:
        raise ValueError("leakage ratio undefined: the reference corpus has no instruments")
    return num / den


def instrument_detection_prf(ref: NoteSequence, est: NoteSequence) -> PRF:
    i_gt, i_tr = instrument_set(ref), instrument_set(est)
    common = len(i_gt & i_tr)
    p = common / len(i_tr) if i_tr else 0.0
    if i_gt:
        r = common / len(i_gt)
    else:
        r = 1.0 if not i_tr else 0.0
    return PRF(p, r, harmonic_f1(p, r), common, len(i_tr) - common, len(i_gt) - common)


@dataclass
class TrackMetrics:
    name: str
    onset: dict[str, PRF]
    instruments: PRF
    n_tr: int
    n_gt: int


@dataclass
class MetricReport:
    tracks: list[TrackMetrics] = field(default_factory=list)
    onset: dict[str, PRF] = field(default_factory=dict)  # micro-averaged per granularity
    phi: float | None = None
    phi_num: int = 0
    phi_den: int = 0
    instruments: PRF = field(default_factory=PRF)         # macro-averaged over tracks
    tolerance_s: float = ONSET_TOLERANCE_S
    violations: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> MetricReport:
        tracks = [TrackMetrics(t["name"], {g: PRF(**v) for g, v in t["onset"].items()},
                               PRF(**t["instruments"]), t["n_tr"], t["n_gt"]) for t in d["tracks"]]
        return cls(tracks, {g: PRF(**v) for g, v in d["onset"].items()}, d["phi"], d["phi_num"],
                   d["phi_den"], PRF(**d["instruments"]), d["tolerance_s"], dict(d["violations"]))

    @classmethod
    def from_json(cls, text: str) -> MetricReport:
        return cls.from_dict(json.loads(text))

    def table(self) -> str:
        """CSV rows per (track, granularity), plus corpus rows under track ``ALL``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["track", "granularity", "P", "R", "F1", "phi_num", "phi_den",
                    "inst_P", "inst_R", "inst_F1"])
        rows = [(t.name, t.onset, t.n_tr, t.n_gt, t.instruments) for t in self.tracks]
        rows.append(("ALL", self.onset, self.phi_num, self.phi_den, self.instruments))
        for name, onset, num, den, inst in rows:
            for g in GRANULARITIES:
                s = onset[g.value]
                w.writerow([name, g.value, f"{s.precision:.6f}", f"{s.recall:.6f}", f"{s.f1:.6f}",
                            num, den, f"{inst.precision:.6f}", f"{inst.recall:.6f}",
                            f"{inst.f1:.6f}"])
        return buf.getvalue()


def evaluate_corpus(pairs: Sequence[tuple[NoteSequence, NoteSequence]],
                    tol_s: float = ONSET_TOLERANCE_S, names: Sequence[str] | None = None,
                    violations: Counter | None = None) -> MetricReport:
    """All metric families for a list of (reference, estimate) tracks.

    Onset scores are micro-averaged (summed TP/FP/FN); instrument detection is
    the per-track mean. Tracks are folded in the order given.
    """
    if not pairs:
        raise ValueError("evaluate_corpus needs at least one pair")
    names = list(names) if names is not None else [f"track{k:04d}" for k in range(len(pairs))]
    report = MetricReport(tolerance_s=tol_s, violations=dict(violations or {}))
    totals = {g.value: [0, 0, 0] for g in GRANULARITIES}
    for name, (ref, est) in zip(names, pairs):
        onset = {}
        for g in GRANULARITIES:
            counts = onset_match(ref, est, g, tol_s)
            onset[g.value] = PRF.from_counts(*counts)
            totals[g.value] = [a + b for a, b in zip(totals[g.value], counts)]
        report.tracks.append(TrackMetrics(name, onset, instrument_detection_prf(ref, est),
                                          len(instrument_set(est)), len(instrument_set(ref))))
    report.onset = {g: PRF.from_counts(*c) for g, c in totals.items()}
    report.phi_num, report.phi_den = leakage_counts(pairs)
    report.phi = report.phi_num / report.phi_den if report.phi_den else None
    n = len(report.tracks)
    p = sum(t.instruments.precision for t in report.tracks) / n
    r = sum(t.instruments.recall for t in report.tracks) / n
    f = sum(t.instruments.f1 for t in report.tracks) / n
    report.instruments = PRF(p, r, f, sum(t.instruments.tp for t in report.tracks),
                             sum(t.instruments.fp for t in report.tracks),
                             sum(t.instruments.fn for t in report.tracks))
    return report
