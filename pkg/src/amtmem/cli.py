"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(unreadable or malformed input), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import codec
from .audio import read_wav
from .config import ENV_PREFIX, ConfigError, RunConfig, load_config
from .dataset import SyntheticSpec, make_dataset, read_manifest
from .midi_io import MidiParseError, NoteSequence, parse_smf, write_smf
from .segmenter import frame_window, window_grid
from .spectral import FRAME_HOP_S, log_mel

logger = logging.getLogger("amtmem")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Token text utilities
# ---------------------------------------------------------------------------

def tokenize_midi(seq: NoteSequence, n_frames: int = 256, max_tokens: int = 1024,
                  duration_s: float | None = None) -> list[str]:
    """Token text per window, one line each. An empty file still yields one window."""
    duration = seq.duration_s if duration_s is None else duration_s
    total = max(1, math.ceil(round(duration / FRAME_HOP_S, 9)))
    lines = []
    for i in window_grid(total, n_frames):
        window = frame_window(i, i + n_frames)
        lines.append(codec.tokens_to_text(codec.encode_segment(seq, window, max_tokens=max_tokens)))
    return lines


def _column(line: str, index: int) -> int:
    col, k = 1, 0
    for word in line.split(" "):
        if word:
            if k == index:
                return col
            k += 1
        col += len(word) + 1
    return col


def parse_token_line(line: str, where: str) -> list[codec.Token]:
    try:
        tokens = codec.tokens_from_text(line)
    except codec.GrammarError as exc:
        raise DataError(f"{where}: {exc}") from None
    try:
        codec.check_grammar(tokens)
    except codec.GrammarError as exc:
        col = _column(line, exc.index if exc.index is not None else len(tokens))
        raise DataError(f"{where}:{col}: {exc}") from None
    return tokens


def detokenize_lines(lines: list[str], n_frames: int = 256, source: str = "<tokens>"
                     ) -> NoteSequence:
    """Inverse of :func:`tokenize_midi`; line k is the window starting at frame k*n_frames."""
    held: dict = {}
    notes = []
    for k, line in enumerate(lines):
        tokens = parse_token_line(line, f"{source}:{k + 1}")
        window = frame_window(k * n_frames, (k + 1) * n_frames)
        res = codec.decode_tokens(tokens, window, held)
        notes.extend(res.notes.notes)
        held = res.held
    end = len(lines) * n_frames * FRAME_HOP_S
    notes.extend(codec.close_held(held, end))
    return NoteSequence(notes)


def _read_lines(path: str) -> list[str]:
    text = sys.stdin.read() if path == "-" else Path(path).read_text()
    return [ln.strip() for ln in text.splitlines() if ln.strip()]


def _write_text(path: str | None, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_make_dataset(args, cfg: RunConfig) -> int:
    spec = SyntheticSpec(n_tracks=args.tracks, track_seconds=args.seconds,
                         max_instruments=args.instruments, drums=args.drums,
                         notes_per_track=args.notes, polyphony=args.polyphony, seed=cfg.seed,
                         mode=args.mode)
    manifest = make_dataset(spec, args.out_dir)
    counts = {}
    for rec in read_manifest(manifest):
        counts[rec.split] = counts.get(rec.split, 0) + 1
    print(f"wrote {manifest} ({', '.join(f'{k}={v}' for k, v in sorted(counts.items()))})")
    return EXIT_OK


def cmd_tokenize(args, cfg: RunConfig) -> int:
    seq = parse_smf(Path(args.midi).read_bytes())
    lines = tokenize_midi(seq, cfg.n_frames, cfg.n_tokens, args.duration)
    _write_text(args.out, "".join(ln + "\n" for ln in lines))
    return EXIT_OK


def cmd_detokenize(args, cfg: RunConfig) -> int:
    seq = detokenize_lines(_read_lines(args.tokens), cfg.n_frames, args.tokens)
    Path(args.out).write_bytes(write_smf(seq))
    print(f"wrote {args.out} ({len(seq.notes)} notes)")
    return EXIT_OK


def cmd_augment(args, cfg: RunConfig) -> int:
    rng = np.random.default_rng(cfg.seed)
    out = []
    for k, line in enumerate(_read_lines(args.tokens)):
        tokens = parse_token_line(line, f"{args.tokens}:{k + 1}")
        for _ in range(args.copies):
            out.append(codec.tokens_to_text(codec.shuffle_tokens(tokens, rng)))
    _write_text(args.out, "".join(ln + "\n" for ln in out))
    return EXIT_OK


def _load_split(records, split, seg):
    from .training import TrackPairs

    tracks = []
    for rec in records:
        if rec.split == split:
            frames = log_mel(read_wav(rec.audio_path))
            tracks.append(TrackPairs(frames, parse_smf(rec.midi_path.read_bytes()), seg,
                                     name=rec.name))
    return tracks


def _onset_f1(model, tracks) -> float:
    from .inference import transcribe_tracks
    from .metrics import evaluate_corpus

    out = transcribe_tracks(model, [t.frames for t in tracks])
    report = evaluate_corpus([(t.notes, o.notes) for t, o in zip(tracks, out)])
    return report.onset["flat"].f1


def cmd_train(args, cfg: RunConfig) -> int:
    import torch

    from .model import MemoryTransformer
    from .training import (NumericalError, evaluate_batches, fit, fixed_batches, load_checkpoint,
                           make_optimizer, save_checkpoint)

    manifest = args.manifest or cfg.manifest
    if not manifest:
        raise UsageError("train: no manifest given (--manifest or the manifest config key)")
    out = Path(args.out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.render())
    seg = cfg.segment_config()
    records = read_manifest(manifest)
    train, val = _load_split(records, "train", seg), _load_split(records, "val", seg)
    if not train:
        raise DataError(f"{manifest}: no training tracks")
    schedule = cfg.schedule()
    torch.manual_seed(cfg.seed)
    start = 0
    if args.resume:
        model, opt, state = load_checkpoint(args.resume, lambda m: make_optimizer(m, schedule))
        start = int(state.get("step", 0))
        logger.info("resumed from %s at step %d", args.resume, start)
    else:
        model = MemoryTransformer(cfg.model_config())
        opt = make_optimizer(model, schedule)
    best = {"val_loss": math.inf, "step": None}

    def on_eval(step, val_loss, val_acc, m, o):
        logger.info("step %d val loss %.4f val accuracy %.4f", step, val_loss, val_acc)
        if val_loss < best["val_loss"]:
            best.update(val_loss=val_loss, step=step)
            save_checkpoint(out / "best.npz", m, o, {"step": step, "val_loss": val_loss})

    steps = cfg.train_steps - start if args.steps is None else args.steps
    try:
        result = fit(model, train, steps=max(steps, 0), schedule=schedule, seed=cfg.seed,
                     batch_size=cfg.batch_size, shuffle_augment=cfg.shuffle_augment, val=val,
                     eval_every=cfg.eval_every, optimizer=opt, start_step=start,
                     log_path=out / "train_log.jsonl", on_eval=on_eval)
    except NumericalError as exc:
        save_checkpoint(out / "failed.npz", model, opt, {"step": start, "error": str(exc)})
        raise
    save_checkpoint(out / "last.npz", model, opt, {"step": result.step})
    if best["step"] is None:
        save_checkpoint(out / "best.npz", model, opt, {"step": result.step})
        best["step"] = result.step

    summary = {"steps": result.step, "seconds": round(result.seconds, 3), "checkpoints": {}}
    scored = val or train
    batches = fixed_batches(scored, cfg.batch_size)
    for name in ("best", "last"):
        m, _, state = load_checkpoint(out / f"{name}.npz")
        loss, acc = evaluate_batches(m, batches)
        summary["checkpoints"][name] = {"step": state.get("step"), "loss": loss,
                                        "token_accuracy": acc, "onset_f1": _onset_f1(m, scored)}
    ck = summary["checkpoints"]
    summary["scored_on"] = "val" if val else "train"
    summary["selected"] = {
        "token_accuracy": max(("best", "last"), key=lambda k: ck[k]["token_accuracy"]),
        "onset_f1": max(("best", "last"), key=lambda k: ck[k]["onset_f1"]),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for name in ("best", "last"):
        c = ck[name]
        print(f"{name}: step {c['step']} token_accuracy {c['token_accuracy']:.4f} "
              f"onset_f1 {c['onset_f1']:.4f}")
    print(f"token accuracy criterion uses the {summary['selected']['token_accuracy']} checkpoint; "
          f"onset F1 criterion uses the {summary['selected']['onset_f1']} checkpoint")
    return EXIT_OK


def cmd_transcribe(args, cfg: RunConfig) -> int:
    from .inference import transcribe_tracks
    from .training import load_checkpoint

    model, _, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    audio = [read_wav(p) for p in args.audio]
    for path, res in zip(args.audio, transcribe_tracks(model, audio)):
        dest = out / f"{Path(path).stem}.mid"
        dest.write_bytes(write_smf(res.notes))
        if args.tokens:
            text = "".join(codec.tokens_to_text(codec.DEFAULT_VOCAB.decode(ids)) + "\n"
                           for ids in res.window_tokens)
            (out / f"{Path(path).stem}.tokens").write_text(text)
        bad = sum(res.violations.values())
        print(f"{path} -> {dest} ({len(res.notes.notes)} notes, {bad} grammar repairs)")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    from .metrics import evaluate_corpus

    ref_dir, est_dir = Path(args.ref_dir), Path(args.est_dir)
    for d in (ref_dir, est_dir):
        if not d.is_dir():
            raise DataError(f"{d}: not a directory")
    refs = {p.stem: p for p in sorted(ref_dir.glob("*.mid"))}
    ests = {p.stem: p for p in sorted(est_dir.glob("*.mid"))}
    for stem in sorted(set(refs) ^ set(ests)):
        side = "reference" if stem in refs else "estimate"
        logger.warning("unmatched %s %s excluded", side, stem)
    names = sorted(set(refs) & set(ests))
    if not names:
        raise DataError("no matching stems between the two directories")
    pairs = [(parse_smf(refs[n].read_bytes()), parse_smf(ests[n].read_bytes())) for n in names]
    tol = cfg.tolerance_s if args.tolerance is None else args.tolerance
    report = evaluate_corpus(pairs, tol, names)
    _write_text(args.out, report.to_json() + "\n")
    if args.table:
        Path(args.table).write_text(report.table())
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import gradient_check

    worst = 0.0
    for seed in range(cfg.seed, cfg.seed + args.seeds):
        rep = gradient_check(seed)
        tensor = max(rep.per_tensor, key=rep.per_tensor.get)
        print(f"seed {seed}: max relative error {rep.max_rel_error:.3e} ({tensor})")
        worst = max(worst, rep.max_rel_error)
    ok = worst < args.threshold
    print(f"{'PASS' if ok else 'FAIL'}: max relative error {worst:.3e} "
          f"(threshold {args.threshold:.0e})")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# Wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="amtmem", description="Multi-instrument transcription toolkit.",
                epilog=f"Config keys may also be set through {ENV_PREFIX}<KEY> environment "
                       "variables; precedence is defaults < config file < environment < flags.")
    p.add_argument("--config", metavar="PATH", help="flat key=value config file")
    p.add_argument("--seed", type=int, help="random seed (config key seed)")
    p.add_argument("--threads", type=int, help="torch intra-op threads (config key threads)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-dataset", help="synthesize a MIDI+WAV corpus with a manifest")
    s.add_argument("out_dir")
    s.add_argument("--tracks", type=int, default=20, help="number of tracks")
    s.add_argument("--seconds", type=float, default=4.096, help="track length in seconds")
    s.add_argument("--instruments", type=int, default=2, help="max melodic programs per track")
    s.add_argument("--drums", action="store_true", help="add a drum part")
    s.add_argument("--notes", type=int, default=8, help="melodic notes per track")
    s.add_argument("--polyphony", type=int, default=2, help="max simultaneous melodic notes")
    s.add_argument("--mode", choices=("standard", "disambiguation"), default="standard")
    s.set_defaults(func=cmd_make_dataset)

    s = sub.add_parser("tokenize", help="MIDI file to token text, one line per window")
    s.add_argument("midi")
    s.add_argument("-o", "--out", help="output file (default stdout)")
    s.add_argument("--duration", type=float, help="track length in seconds (default: last offset)")
    s.set_defaults(func=cmd_tokenize)

    s = sub.add_parser("detokenize", help="token text (one window per line) to a MIDI file")
    s.add_argument("tokens", help="token text file, or - for stdin")
    s.add_argument("-o", "--out", required=True, help="output MIDI path")
    s.set_defaults(func=cmd_detokenize)

    s = sub.add_parser("augment", help="shuffle token text within sections")
    s.add_argument("tokens", help="token text file, or - for stdin")
    s.add_argument("-o", "--out", help="output file (default stdout)")
    s.add_argument("--copies", type=int, default=1, help="shuffled copies per input line")
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("train", help="train a model from a manifest")
    s.add_argument("--manifest", help="manifest.jsonl (config key manifest)")
    s.add_argument("--out-dir", help="run directory (config key out_dir)")
    s.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint and its step")
    s.add_argument("--steps", type=int, help="steps to run (default: up to train_steps)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("transcribe", help="audio files to MIDI with a trained checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("audio", nargs="+", help="WAV files")
    s.add_argument("-o", "--out-dir", required=True)
    s.add_argument("--tokens", action="store_true", help="also write predicted token text")
    s.set_defaults(func=cmd_transcribe)

    s = sub.add_parser("evaluate", help="score estimated MIDI files against references by stem")
    s.add_argument("ref_dir")
    s.add_argument("est_dir")
    s.add_argument("--tolerance", type=float, help="onset tolerance in seconds")
    s.add_argument("-o", "--out", help="JSON report path (default stdout)")
    s.add_argument("--table", help="CSV table path")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", help="finite-difference gradient check of a tiny model")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--threshold", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)
    return p


def _resolve(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _resolve(args)
    except (ConfigError, OSError) as exc:
        print(f"amtmem: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logger.info("resolved config: %s", " ".join(cfg.render().split()))
    import torch

    torch.set_num_threads(max(1, cfg.threads))
    from .training import CheckpointError, NumericalError

    try:
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"amtmem: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"amtmem: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, MidiParseError, CheckpointError, codec.GrammarError, OSError,
            ValueError) as exc:
        print(f"amtmem: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
