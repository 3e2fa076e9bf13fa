"""Encoder-decoder transformer with a token memory from the previous window.

The memory path embeds the previous window's tokens, runs one self-attention
layer over them and keeps the first ``l_agg`` output rows. Those rows are
appended after the encoder states, so the decoder cross-attends to
``n_frames + l_agg`` keys.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F
from torch import nn

from .codec import DEFAULT_VOCAB

PAD_ID, SOS_ID, EOS_ID = 0, 1, 2


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 96
    encoder_layers: int = 2
    decoder_layers: int = 2
    attn_heads: int = 6
    ff_dim: int = 192
    memory_heads: int = 6
    l_agg: int = 64
    n_tokens: int = 1024
    n_frames: int = 256
    n_mels: int = 512
    vocab_size: int = DEFAULT_VOCAB.size
    dropout: float = 0.1
    share_memory_embedding: bool = False

    def __post_init__(self):
        if self.d_model % self.attn_heads or self.d_model % self.memory_heads:
            raise ValueError("d_model must be divisible by attn_heads and memory_heads")
        if not 0 <= self.l_agg <= self.n_tokens:
            raise ValueError("l_agg must lie in [0, n_tokens]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def sinusoids(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    rate = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    out = torch.zeros(length, dim, dtype=torch.float64)
    out[:, 0::2] = torch.sin(pos * rate)
    out[:, 1::2] = torch.cos(pos * rate[: dim // 2])
    return out.to(dtype)


class Attention(nn.Module):
    """Multi-head attention; queries whose keys are all masked return zeros."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim, bias=False)  # a key bias cannot change softmax output
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def project_kv(self, x):
        return self.split(self.k(x)), self.split(self.v(x))

    def forward(self, x, kv=None, key_mask=None, causal=False, cache=None, precomputed=None):
        """``key_mask`` is ``[B, Lk]`` with True marking usable keys.

        ``cache`` (a dict) accumulates keys/values for incremental decoding;
        ``precomputed`` supplies fixed (k, v) for cross-attention.
        """
        q = self.split(self.q(x))
        if precomputed is not None:
            k, v = precomputed
        else:
            k, v = self.project_kv(x if kv is None else kv)
            if cache is not None:
                if "k" in cache:
                    k = torch.cat([cache["k"], k], dim=2)
                    v = torch.cat([cache["v"], v], dim=2)
                cache["k"], cache["v"] = k, v
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        lq, lk = scores.shape[-2:]
        allowed = torch.ones(1, 1, lq, lk, dtype=torch.bool, device=x.device)
        if key_mask is not None:
            allowed = allowed & key_mask[:, None, None, :]
        if causal:
            offset = lk - lq
            allowed = allowed & torch.ones(lq, lk, dtype=torch.bool, device=x.device).tril(offset)
        any_key = allowed.any(-1, keepdim=True)
        scores = scores.masked_fill(~(allowed | ~any_key), float("-inf"))
        att = self.dropout(scores.softmax(-1))
        out = (att @ v) * any_key
        b, h, n, dh = out.shape
        return self.o(out.transpose(1, 2).reshape(b, n, h * dh))


class FeedForward(nn.Sequential):
    def __init__(self, dim, hidden, dropout):
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Dropout(dropout), nn.Linear(hidden, dim))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.attn_heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.ff_dim, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        x = x + self.drop(self.attn(self.norm1(x), key_mask=mask))
        return x + self.drop(self.ff(self.norm2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = Attention(cfg.d_model, cfg.attn_heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = Attention(cfg.d_model, cfg.attn_heads, cfg.dropout)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.ff_dim, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, ctx, ctx_mask, cache=None, ctx_kv=None):
        x = x + self.drop(self.self_attn(self.norm1(x), causal=True, cache=cache))
        x = x + self.drop(self.cross_attn(self.norm2(x), ctx, key_mask=ctx_mask, precomputed=ctx_kv))
        return x + self.drop(self.ff(self.norm3(x)))


class MemoryRetention(nn.Module):
    """Embed prior tokens, self-attend once (PAD keys masked), keep ``l_agg`` rows."""

    def __init__(self, cfg: ModelConfig, embedding: nn.Embedding | None = None):
        super().__init__()
        self.l_agg = cfg.l_agg
        self.embed = embedding if embedding is not None else nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.memory_heads, cfg.dropout)
        self.norm = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)
        self.register_buffer("pos", sinusoids(cfg.n_tokens, cfg.d_model), persistent=False)

    def forward(self, prior: torch.Tensor) -> torch.Tensor:
        valid = prior != PAD_ID
        # keys past the last non-PAD column are masked for every row; drop them
        used = int(valid.any(0).nonzero().max()) + 1 if valid.any() else 0
        keep = max(used, self.l_agg)
        x = self.embed(prior[:, :keep]) + self.pos[:keep]
        q = x[:, :self.l_agg]
        out = q + self.drop(self.attn(q, x, key_mask=valid[:, :keep]))
        return self.norm(out)


class MemoryTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.frame_norm = nn.LayerNorm(cfg.n_mels)  # log-mel rows sit near -13.8 in silence
        self.frame_proj = nn.Linear(cfg.n_mels, d)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.encoder_layers))
        self.encoder_norm = nn.LayerNorm(d)
        self.token_embed = nn.Embedding(cfg.vocab_size, d)
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.decoder_layers))
        self.decoder_norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, cfg.vocab_size)
        self.drop = nn.Dropout(cfg.dropout)
        self.register_buffer("frame_pos", sinusoids(cfg.n_frames, d), persistent=False)
        self.register_buffer("token_pos", sinusoids(cfg.n_tokens, d), persistent=False)
        # built last so the other parameters initialise identically for any l_agg
        self.memory = None
        if cfg.l_agg > 0:
            shared = self.token_embed if cfg.share_memory_embedding else None
            self.memory = MemoryRetention(cfg, shared)

    # -- pieces ------------------------------------------------------------

    def encode_frames(self, frames: torch.Tensor, frame_mask: torch.Tensor | None = None):
        """``[B, N_f, n_mels]`` -> ``[B, N_f, d_model]``; ``frame_mask`` marks real frames."""
        if not torch.isfinite(frames).all():
            raise ValueError("non-finite values in input frames")
        n = frames.shape[1]
        if n > self.cfg.n_frames:
            raise ValueError(f"{n} frames exceed n_frames={self.cfg.n_frames}")
        x = self.drop(self.frame_proj(self.frame_norm(frames)) + self.frame_pos[:n])
        for layer in self.encoder:
            x = layer(x, frame_mask)
        return self.encoder_norm(x)

    def embed_memory(self, prior: torch.Tensor) -> torch.Tensor | None:
        """``[B, N_t]`` PAD-padded prior ids -> ``[B, l_agg, d_model]`` (None without memory)."""
        if prior.shape[-1] != self.cfg.n_tokens:
            raise ValueError(f"prior must have exactly {self.cfg.n_tokens} ids, got {prior.shape[-1]}")
        if self.memory is None:
            return None
        return self.memory(prior)

    def context(self, enc, frame_mask, mem):
        """Cross-attention keys: encoder states, then memory rows."""
        b, n = enc.shape[:2]
        if frame_mask is None:
            frame_mask = torch.ones(b, n, dtype=torch.bool, device=enc.device)
        if mem is None:
            return enc, frame_mask
        mem_mask = torch.ones(b, mem.shape[1], dtype=torch.bool, device=enc.device)
        return torch.cat([enc, mem], 1), torch.cat([frame_mask, mem_mask], 1)

    def decode_logits(self, target_in, enc, mem=None, frame_mask=None):
        """Causal decoder over ``target_in`` (starting with SOS) -> ``[B, len, vocab]``."""
        if target_in.shape[1] > self.cfg.n_tokens:
            raise ValueError(f"decoder input longer than n_tokens={self.cfg.n_tokens}")
        ctx, ctx_mask = self.context(enc, frame_mask, mem)
        x = self.drop(self.token_embed(target_in) + self.token_pos[:target_in.shape[1]])
        for layer in self.decoder:
            x = layer(x, ctx, ctx_mask)
        return self.out(self.decoder_norm(x))

    def forward(self, frames, target_in, prior=None, frame_mask=None):
        enc = self.encode_frames(frames, frame_mask)
        mem = self.embed_memory(prior) if prior is not None else None
        return self.decode_logits(target_in, enc, mem, frame_mask)

    # -- inference ---------------------------------------------------------

    @torch.no_grad()
    def greedy_decode(self, frames, prior=None, frame_mask=None, max_len=None):
        """Argmax decoding until every row emits EOS; returns a list of id lists (no SOS)."""
        max_len = min(max_len or self.cfg.n_tokens, self.cfg.n_tokens)
        enc = self.encode_frames(frames, frame_mask)
        mem = self.embed_memory(prior) if prior is not None else None
        ctx, ctx_mask = self.context(enc, frame_mask, mem)
        ctx_kv = [layer.cross_attn.project_kv(ctx) for layer in self.decoder]
        caches = [{} for _ in self.decoder]
        b = frames.shape[0]
        tok = torch.full((b, 1), SOS_ID, dtype=torch.long, device=frames.device)
        done = torch.zeros(b, dtype=torch.bool, device=frames.device)
        out = []
        for step in range(max_len):
            x = self.token_embed(tok) + self.token_pos[step:step + 1]
            for layer, cache, kv in zip(self.decoder, caches, ctx_kv):
                x = layer(x, ctx, ctx_mask, cache=cache, ctx_kv=kv)
            logits = self.out(self.decoder_norm(x))[:, -1]
            logits[:, [PAD_ID, SOS_ID]] = float("-inf")  # never legal outputs
            nxt = logits.argmax(-1)
            nxt = torch.where(done, torch.full_like(nxt, PAD_ID), nxt)
            out.append(nxt)
            done |= nxt == EOS_ID
            if done.all():
                break
            tok = nxt[:, None]
        ids = torch.stack(out, 1).tolist() if out else [[] for _ in range(b)]
        return [[i for i in row if i != PAD_ID] for row in ids]


def shift_right(target: torch.Tensor) -> torch.Tensor:
    """Decoder input for teacher forcing: SOS followed by the target minus its last id."""
    sos = torch.full_like(target[:, :1], SOS_ID)
    return torch.cat([sos, target[:, :-1]], 1)


def token_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over non-PAD target positions."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1),
                           ignore_index=PAD_ID)
