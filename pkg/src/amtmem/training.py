"""Teacher-forced training, evaluation helpers and checkpoint files."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import codec
from .codec import Vocabulary
from .model import PAD_ID, MemoryTransformer, ModelConfig, shift_right, token_loss
from .segmenter import (SegmentConfig, TrainingPair, batch_consecutive, encode_ids, frame_window,
                        sample_prior_window, window_grid)

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class Schedule:
    peak: float = 2e-4
    floor: float = 2e-5
    warmup: int = 64_500
    total: int = 1_000_000

    def __call__(self, step: int) -> float:
        """Learning rate for 0-based ``step``: linear warm-up, then cosine decay to ``floor``."""
        if step < self.warmup:
            return self.peak * (step + 1) / self.warmup
        span = max(self.total - self.warmup, 1)
        progress = min((step - self.warmup) / span, 1.0)
        return self.floor + 0.5 * (self.peak - self.floor) * (1 + math.cos(math.pi * progress))


def make_optimizer(model: torch.nn.Module, schedule: Schedule):
    opt = torch.optim.Adam(model.parameters(), lr=schedule.peak, betas=(0.9, 0.98), eps=1e-9)
    return opt


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    frames: torch.Tensor      # [B, N_f, n_mels]
    frame_mask: torch.Tensor  # [B, N_f]
    target: torch.Tensor      # [B, L] trimmed to the longest non-PAD target
    prior: torch.Tensor       # [B, N_t]

    @property
    def size(self):
        return self.frames.shape[0]


def collate(pairs: Sequence[TrainingPair], shuffle_rng: np.random.Generator | None = None,
            vocab: Vocabulary = codec.DEFAULT_VOCAB, dtype=torch.float32) -> Batch:
    """Stack pairs into tensors, optionally shuffling target tokens within sections."""
    targets = []
    for p in pairs:
        ids = p.target
        if shuffle_rng is not None:
            used = ids[ids != PAD_ID]
            shuffled = vocab.encode(codec.shuffle_tokens(vocab.decode(used), shuffle_rng))
            ids = np.zeros_like(ids)
            ids[:len(shuffled)] = shuffled
        targets.append(ids)
    target = np.stack(targets)
    length = max(int((target != PAD_ID).sum(1).max()), 1)
    n_frames = pairs[0].frames.shape[0]
    mask = np.arange(n_frames)[None, :] < np.array([p.n_valid for p in pairs])[:, None]
    return Batch(
        torch.from_numpy(np.stack([p.frames for p in pairs])).to(dtype),
        torch.from_numpy(mask),
        torch.from_numpy(target[:, :length]),
        torch.from_numpy(np.stack([p.prior for p in pairs])),
    )


class TrackPairs:
    """Training windows of one track with cached token encodings.

    Every call to :meth:`pairs` draws fresh prior hops, so the prior window of a
    given target varies across epochs.
    """

    def __init__(self, frames: np.ndarray, notes, cfg: SegmentConfig,
                 vocab: Vocabulary = codec.DEFAULT_VOCAB, name: str = ""):
        self.frames = frames.astype(np.float32)
        self.notes = notes
        self.cfg = cfg
        self.vocab = vocab
        self.name = name
        self.starts = window_grid(len(frames), cfg.n_frames)
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def __len__(self):
        return len(self.starts)

    def _ids(self, start: int, stop: int) -> np.ndarray:
        key = (start, stop)
        if key not in self._cache:
            self._cache[key] = encode_ids(self.notes, frame_window(start, stop), self.cfg.n_tokens,
                                          self.vocab)
        return self._cache[key]

    def pair(self, k: int, rng: np.random.Generator | None = None, hop: int | None = None
             ) -> TrainingPair:
        cfg, total = self.cfg, len(self.frames)
        i = self.starts[k]
        stop = min(i + cfg.n_frames, total)
        chunk = np.zeros((cfg.n_frames, self.frames.shape[1]), dtype=np.float32)
        chunk[:stop - i] = self.frames[i:stop]
        if hop is None:
            p_start, p_end, hop = sample_prior_window(i, cfg, rng)
        else:
            p_start, p_end = i - hop * cfg.n_frames, i + (1 - hop) * cfg.n_frames
        prior = (np.zeros(cfg.n_tokens, dtype=np.int64) if p_start < 0
                 else self._ids(p_start, p_end))
        return TrainingPair(chunk, self._ids(i, stop), prior, hop, stop - i, frame_window(i, stop))

    def pairs(self, rng: np.random.Generator | None = None, hop: int | None = None
              ) -> list[TrainingPair]:
        return [self.pair(k, rng, hop) for k in range(len(self))]

    def lazy(self, rng: np.random.Generator) -> _LazyPairs:
        return _LazyPairs(self, rng)


class _LazyPairs:
    """Sequence view that only builds the pairs a batch actually uses."""

    def __init__(self, track: TrackPairs, rng):
        self.track, self.rng = track, rng

    def __len__(self):
        return len(self.track)

    def __getitem__(self, k):
        if isinstance(k, slice):
            return [self.track.pair(j, self.rng) for j in range(*k.indices(len(self)))]
        return self.track.pair(range(len(self))[k], self.rng)

    def __iter__(self):
        return iter(self[:])


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------

def compute_loss(model: MemoryTransformer, batch: Batch) -> torch.Tensor:
    logits = model(batch.frames, shift_right(batch.target), batch.prior, batch.frame_mask)
    return token_loss(logits, batch.target)


def train_step(model: MemoryTransformer, optimizer, batch: Batch, lr: float | None = None) -> float:
    """One Adam update on ``batch``; returns the loss before the update."""
    model.train()
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss = compute_loss(model, batch)
    if not torch.isfinite(loss):
        ids = batch.target.tolist()
        raise NumericalError(f"non-finite loss {loss.item()}; batch target ids: {json.dumps(ids)}")
    loss.backward()
    optimizer.step()
    return loss.item()


@torch.no_grad()
def evaluate_batches(model: MemoryTransformer, batches: Sequence[Batch]) -> tuple[float, float]:
    """Teacher-forced (mean loss, token accuracy over non-PAD targets)."""
    was = model.training
    model.eval()
    total_loss = correct = count = 0.0
    for b in batches:
        logits = model(b.frames, shift_right(b.target), b.prior, b.frame_mask)
        keep = b.target != PAD_ID
        n = int(keep.sum())
        total_loss += float(token_loss(logits, b.target)) * n
        correct += int(((logits.argmax(-1) == b.target) & keep).sum())
        count += n
    model.train(was)
    return total_loss / max(count, 1), correct / max(count, 1)


def fixed_batches(tracks: Sequence[TrackPairs], size: int, hop: int = 1) -> list[Batch]:
    """Deterministic evaluation batches with the immediately preceding window as prior."""
    pairs = [p for t in tracks for p in t.pairs(hop=hop)]
    return [collate(pairs[k:k + size]) for k in range(0, len(pairs), size)]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "amtmem-checkpoint-1"


def save_checkpoint(path: str | Path, model: MemoryTransformer, optimizer=None,
                    state: dict | None = None) -> None:
    """Write named parameter arrays, shapes and a JSON header to an ``.npz`` file."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if st:
                    n = names[id(p)]
                    arrays[f"adam/{n}/exp_avg"] = st["exp_avg"].cpu().numpy()
                    arrays[f"adam/{n}/exp_avg_sq"] = st["exp_avg_sq"].cpu().numpy()
                    arrays[f"adam/{n}/step"] = np.asarray(float(st["step"]))
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "shapes": {k: list(v.shape) for k, v in arrays.items() if k.startswith("param/")},
        "state": state or {},
    }
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path, optimizer_factory: Callable | None = None):
    """Return (model, optimizer or None, state). Every parameter shape is validated."""
    with np.load(Path(path)) as data:
        arrays = {k: data[k] for k in data.files}
    try:
        header = json.loads(arrays.pop("__header__").tobytes().decode())
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing header") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    cfg = ModelConfig.from_dict(header["config"])
    model = MemoryTransformer(cfg)
    expected = model.state_dict()
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    if set(params) != set(expected):
        raise CheckpointError(f"{path}: parameter names do not match the config "
                              f"(missing {sorted(set(expected) - set(params))}, "
                              f"unexpected {sorted(set(params) - set(expected))})")
    for k, v in expected.items():
        if tuple(params[k].shape) != tuple(v.shape):
            raise CheckpointError(f"{path}: {k} has shape {params[k].shape}, expected {tuple(v.shape)}")
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in params.items()})
    optimizer = None
    if optimizer_factory is not None:
        optimizer = optimizer_factory(model)
        for n, p in model.named_parameters():
            if f"adam/{n}/exp_avg" in arrays:
                optimizer.state[p] = {
                    "step": torch.tensor(float(arrays[f"adam/{n}/step"])),
                    "exp_avg": torch.from_numpy(np.array(arrays[f"adam/{n}/exp_avg"])),
                    "exp_avg_sq": torch.from_numpy(np.array(arrays[f"adam/{n}/exp_avg_sq"])),
                }
    return model, optimizer, header.get("state", {})


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    model: MemoryTransformer
    step: int
    losses: list[float] = field(default_factory=list)
    best_val_loss: float = math.inf
    best_step: int = -1
    seconds: float = 0.0


def fit(model: MemoryTransformer, train: Sequence[TrackPairs], *, steps: int, schedule: Schedule,
        seed: int = 0, batch_size: int = 12, shuffle_augment: bool = False,
        val: Sequence[TrackPairs] = (), eval_every: int = 0, optimizer=None, start_step: int = 0,
        log_path: str | Path | None = None, on_eval: Callable | None = None,
        max_seconds: float | None = None, stop_at_accuracy: float | None = None) -> FitResult:
    """Run ``steps`` training steps from ``start_step``.

    ``on_eval(step, val_loss, val_acc, model, optimizer)`` is called every
    ``eval_every`` steps and at the end. With ``stop_at_accuracy`` set, training
    also evaluates on ``train`` at each evaluation and stops once teacher-forced
    accuracy reaches it.
    """
    optimizer = optimizer or make_optimizer(model, schedule)
    rng = np.random.default_rng([seed, start_step])
    shuffle_rng = np.random.default_rng([seed, start_step, 1]) if shuffle_augment else None
    log = open(log_path, "a") if log_path else None
    result = FitResult(model, start_step)
    val_batches = fixed_batches(val, batch_size) if val else []
    train_batches = fixed_batches(train, batch_size) if stop_at_accuracy is not None else []
    t0 = time.perf_counter()

    def evaluate(step):
        if stop_at_accuracy is not None:
            _, acc = evaluate_batches(model, train_batches)
            logger.info("step %d train accuracy %.4f", step, acc)
            if acc >= stop_at_accuracy:
                return True
        if val_batches:
            vl, va = evaluate_batches(model, val_batches)
            if vl < result.best_val_loss:
                result.best_val_loss, result.best_step = vl, step
            if on_eval:
                on_eval(step, vl, va, model, optimizer)
        return False

    try:
        for step in range(start_step, start_step + steps):
            lr = schedule(step)
            pairs = batch_consecutive([t.lazy(rng) for t in train], rng, batch_size)
            loss = train_step(model, optimizer, collate(pairs, shuffle_rng), lr)
            result.losses.append(loss)
            result.step = step + 1
            if log:
                log.write(json.dumps({"step": step + 1, "loss": loss, "lr": lr,
                                      "seconds": round(time.perf_counter() - t0, 3)}) + "\n")
            out_of_time = max_seconds is not None and time.perf_counter() - t0 > max_seconds
            if eval_every and (step + 1) % eval_every == 0 or out_of_time:
                if evaluate(step + 1) or out_of_time:
                    break
        else:
            if not (eval_every and result.step % eval_every == 0):
                evaluate(result.step)
    finally:
        if log:
            log.close()
    result.seconds = time.perf_counter() - t0
    return result
