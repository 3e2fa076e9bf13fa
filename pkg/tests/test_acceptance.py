"""Acceptance criteria 1-9, each reported as one PASS/FAIL line.

The lines are collected in ``RESULTS`` and printed in the terminal summary by
``conftest.py``; each test also asserts its criterion so failures show up in
the normal pytest report. Criteria 7 and 8 train small models and take
several minutes on one CPU core.
"""

from __future__ import annotations

import time
from collections import Counter

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from amtmem import codec
from amtmem.audio import AudioBuffer, read_wav
from amtmem.codec import canonicalize, decode_tokens, encode_segment, shuffle_tokens
from amtmem.dataset import SyntheticSpec, make_dataset, read_manifest
from amtmem.gradcheck import gradient_check
from amtmem.inference import transcribe_tracks
from amtmem.metrics import (GRANULARITIES, evaluate_corpus, harmonic_f1,
                            instrument_detection_prf, instrument_leakage_ratio, onset_match)
from amtmem.midi_io import NoteEvent, NoteSequence, drum, parse_smf, write_smf
from amtmem.model import MemoryTransformer, ModelConfig
from amtmem.segmenter import SegmentConfig, frame_window, sample_prior_window
from amtmem.spectral import log_mel
from amtmem.training import Schedule, TrackPairs, evaluate_batches, fit, fixed_batches
from oracles import (PRIOR_TABLE, codec_round_trip, oracle_counts, quantize_oracle, random_track,
                     same_notes)

RESULTS: dict[int, str] = {}

# Toy training recipe shared by criteria 7 and 8.
LR_PEAK, LR_FLOOR, WARMUP = 1e-3, 1e-4, 50
OVERFIT_STEPS = 400
MEMORY_STEPS = 600
CPU_BUDGET_S = 600.0
AMBIGUOUS_FROM_S = 2.048  # the second window carries no acoustic cue


def verdict(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    assert ok, RESULTS[n]


def load_tracks(manifest, split=None):
    seg = SegmentConfig()
    return [TrackPairs(log_mel(read_wav(r.audio_path)), parse_smf(r.midi_path.read_bytes()), seg,
                       name=r.name)
            for r in read_manifest(manifest) if split is None or r.split == split]


def train(tracks, l_agg, steps, dropout, seed=0):
    torch.manual_seed(seed)
    model = MemoryTransformer(ModelConfig(l_agg=l_agg, dropout=dropout))
    cpu0 = time.process_time()
    fit(model, tracks, steps=steps, schedule=Schedule(LR_PEAK, LR_FLOOR, WARMUP, steps), seed=seed,
        shuffle_augment=True)
    return model.eval(), time.process_time() - cpu0


# ---------------------------------------------------------------------------
# 1-6, 9: exact and property checks
# ---------------------------------------------------------------------------

def test_criterion_1_codec_round_trip():
    t0 = time.perf_counter()
    failures = 0
    for seed in range(200):
        seq = random_track(np.random.default_rng(10_000 + seed), 4)
        try:
            if not same_notes(codec_round_trip(seq, 4), quantize_oracle(seq)):
                failures += 1
        except AssertionError:  # grammar violations while decoding
            failures += 1
    secs = time.perf_counter() - t0
    verdict(1, failures == 0 and secs < 30, f"{failures} failures in 200 x 4 windows, {secs:.1f} s")


def test_criterion_2_shuffle_invariance():
    t0 = time.perf_counter()
    bad = 0
    for s in range(50):
        rng = np.random.default_rng(20_000 + s)
        seq = random_track(rng, 2, n_notes=20)
        window = frame_window(256, 512)
        toks = encode_segment(seq, window)
        tie_keys = [(toks[k].value, toks[k + 1].value) for k in range(0, toks.index(codec.TIE), 2)]
        held = {key: 1.0 for key in tie_keys}
        ref = decode_tokens(toks, window, held)
        ref_midi = write_smf(NoteSequence(ref.notes.notes + codec.close_held(ref.held, 4.096)))
        for _ in range(20):
            shuffled = shuffle_tokens(toks, rng)
            out = decode_tokens(shuffled, window, held)
            midi = write_smf(NoteSequence(out.notes.notes + codec.close_held(out.held, 4.096)))
            if midi != ref_midi or canonicalize(shuffled) != canonicalize(toks):
                bad += 1
    secs = time.perf_counter() - t0
    verdict(2, bad == 0 and secs < 30, f"{bad} mismatches in 1000 shuffles, {secs:.1f} s")


class _FixedHop:
    def __init__(self, hop):
        self.hop = hop

    def integers(self, lo, hi):
        return self.hop


def test_criterion_3_prior_window():
    cfg = SegmentConfig(max_hop=8)
    wrong = [row for row in PRIOR_TABLE
             if sample_prior_window(row[0], cfg, _FixedHop(row[1])) != (row[2], row[3], row[1])]
    rng = np.random.default_rng(3)
    cfg4 = SegmentConfig(max_hop=4)
    hops = [sample_prior_window(1024, cfg4, rng)[2] for _ in range(100_000)]
    counts = np.bincount(hops, minlength=5)[1:]
    p = chisquare(counts).pvalue
    verdict(3, not wrong and p > 0.01 and counts.sum() == 100_000,
            f"{len(PRIOR_TABLE) - len(wrong)}/{len(PRIOR_TABLE)} table rows, chi-square p = {p:.3f}")


def _random_side(rng, n):
    notes = []
    for _ in range(n):
        onset = float(rng.choice([0.0, 0.02, 0.05, 0.07, 0.1, 0.13]))
        if rng.random() < 0.15:
            notes.append(drum(onset, int(rng.choice([36, 38]))))
        else:
            notes.append(NoteEvent(onset, onset + 0.2, int(rng.choice([60, 61, 62])),
                                   int(rng.choice([0, 1, 9, 40]))))
    return NoteSequence(notes)


def _programs(progs):
    return NoteSequence([drum(0.1 * k, 36) if p == 128 else NoteEvent(0.1 * k, 0.1 * k + 0.1, 60, p)
                         for k, p in enumerate(progs)])


def test_criterion_4_metric_oracle():
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(500):
        ref = _random_side(rng, int(rng.integers(0, 9)))
        est = _random_side(rng, int(rng.integers(0, 9)))
        for g in GRANULARITIES:
            mismatches += onset_match(ref, est, g) != oracle_counts(ref, est, g)
    gt = _programs([0, 32])
    det = instrument_detection_prf(gt, _programs([0, 32, 48]))
    phi_one = instrument_leakage_ratio([(gt, _programs([0, 32, 48]))])
    phi_two = instrument_leakage_ratio([(_programs([0, 1]), _programs([0, 1, 2])),
                                        (_programs([5, 6]), _programs([5]))])
    fixtures = (abs(det.precision - 2 / 3) <= 1e-12 and abs(det.recall - 1) <= 1e-12
                and abs(det.f1 - 0.8) <= 1e-12 and abs(phi_one - 1.5) <= 1e-12
                and abs(phi_two - 1.0) <= 1e-12)
    verdict(4, mismatches == 0 and fixtures,
            f"{mismatches} oracle mismatches over 500 x 3 granularities, fixtures "
            f"{'match' if fixtures else 'differ'}")


def test_criterion_5_gradient_check():
    t0 = time.perf_counter()
    reports = [gradient_check(seed) for seed in range(5)]
    secs = time.perf_counter() - t0
    worst = max(reports, key=lambda r: r.max_rel_error)
    tensor = max(worst.per_tensor, key=worst.per_tensor.get)
    has_memory = all(any(k.startswith("memory.") for k in r.per_tensor) for r in reports)
    errors = ", ".join(f"{r.max_rel_error:.1e}" for r in reports)
    verdict(5, worst.max_rel_error < 1e-4 and has_memory and secs < 120,
            f"max relative error per seed [{errors}], worst in {tensor} (seed {worst.seed}), "
            f"max absolute error {max(r.max_abs_error for r in reports):.1e}, {secs:.0f} s")


def test_criterion_6_shapes():
    lengths = {}
    for l_agg in (0, 32, 64):
        torch.manual_seed(0)
        model = MemoryTransformer(ModelConfig(l_agg=l_agg)).eval()
        with torch.no_grad():
            enc = model.encode_frames(torch.zeros(1, 256, 512))
            ctx, _ = model.context(enc, None, model.embed_memory(torch.zeros(1, 1024, dtype=torch.long)))
        lengths[l_agg] = ctx.shape[1]
    frames = log_mel(AudioBuffer(np.zeros(256_000), 16_000)).shape[0]
    ok = lengths == {0: 256, 32: 288, 64: 320} and frames == 2000
    verdict(6, ok, f"key lengths {lengths}, 256000 samples -> {frames} frames")


def test_criterion_9_detection_f1_denominator():
    # The score uses precision + recall in the denominator. A printed variant with
    # "Precision x Recall" there instead would give 2PR/(PR) = 2 at P = R = 1.
    f1 = harmonic_f1(1.0, 1.0)
    gt = _programs([0, 32, 128])
    perfect = instrument_detection_prf(gt, gt).f1
    verdict(9, f1 == 1.0 and perfect == 1.0, f"F1 at P = R = 1 is {f1}")


# ---------------------------------------------------------------------------
# 7: toy overfit
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    manifest = make_dataset(SyntheticSpec(n_tracks=16, seed=7), root)
    tracks = load_tracks(manifest, "train")
    model, cpu_s = train(tracks, l_agg=64, steps=OVERFIT_STEPS, dropout=0.0)
    return model, tracks, cpu_s


def test_criterion_7_toy_overfit(overfit):
    model, tracks, cpu_s = overfit
    _, acc = evaluate_batches(model, fixed_batches(tracks, 12))
    out = transcribe_tracks(model, [t.frames for t in tracks[:4]])
    f1 = evaluate_corpus([(t.notes, o.notes) for t, o in zip(tracks[:4], out)]).onset["flat"].f1
    verdict(7, acc >= 0.99 and cpu_s < CPU_BUDGET_S and f1 >= 0.90,
            f"train token accuracy {acc:.4f} after {cpu_s:.0f} CPU-s on {len(tracks)} tracks, "
            f"Flat onset F1 {f1:.3f} on 4 tracks")


def test_silent_audio_stays_quiet(overfit):
    model, _, _ = overfit
    (out,) = transcribe_tracks(model, [AudioBuffer(np.zeros(4 * 16000), 16000)])
    assert len(out.notes.notes) <= 2


# ---------------------------------------------------------------------------
# 8: memory causality on the disambiguation corpus
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def disambiguation(tmp_path_factory):
    root = tmp_path_factory.mktemp("twins")
    train_tracks = load_tracks(make_dataset(SyntheticSpec(n_tracks=80, mode="disambiguation",
                                                          seed=8), root / "train"), "train")
    held = load_tracks(make_dataset(SyntheticSpec(n_tracks=40, mode="disambiguation", seed=88),
                                    root / "held"))
    models = {l_agg: train(train_tracks, l_agg, MEMORY_STEPS, dropout=0.1)[0] for l_agg in (64, 0)}
    return models, held


def context_correct(model, held) -> tuple[float, float]:
    """Share of ambiguous windows whose majority predicted program is right, and phi."""
    out = transcribe_tracks(model, [t.frames for t in held])
    right = 0
    for t, o in zip(held, out):
        truth = t.notes.notes[0].program  # the cue note
        progs = Counter(n.program for n in o.notes.notes
                        if n.onset_s >= AMBIGUOUS_FROM_S and not n.is_drum)
        right += bool(progs) and progs.most_common(1)[0][0] == truth
    phi = evaluate_corpus([(t.notes, o.notes) for t, o in zip(held, out)]).phi
    return right / len(held), phi


def test_criterion_8_memory_causality(disambiguation):
    models, held = disambiguation
    with_mem, phi_mem = context_correct(models[64], held)
    without, phi_plain = context_correct(models[0], held)
    verdict(8, with_mem >= 0.70 and without <= 0.55 and phi_mem <= phi_plain,
            f"context-correct program {with_mem:.0%} with memory vs {without:.0%} without "
            f"on {len(held)} held-out windows, phi {phi_mem:.3f} vs {phi_plain:.3f}")


def test_memory_prior_changes_program_logits(disambiguation):
    models, held = disambiguation
    model = models[64]
    track = held[0]
    pair = track.pair(1, hop=1)
    prior = torch.from_numpy(pair.prior)[None]
    swapped = prior.clone()
    p0, p1 = (codec.token_to_id(codec.PROGRAM(p)) for p in (0, 1))
    swapped[prior == p0], swapped[prior == p1] = p1, p0
    frames = torch.from_numpy(pair.frames)[None]
    mask = torch.ones(1, frames.shape[1], dtype=torch.bool)
    sos = torch.ones(1, 1, dtype=torch.long)
    with torch.no_grad():
        a = model(frames, sos, prior, mask)[0, -1, [p0, p1]]
        b = model(frames, sos, swapped, mask)[0, -1, [p0, p1]]
    assert (a[0] - a[1] - (b[0] - b[1])).abs() > 0
