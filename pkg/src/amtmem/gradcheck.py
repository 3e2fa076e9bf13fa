"""Finite-difference check of the model's analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .model import PAD_ID, MemoryTransformer, ModelConfig, shift_right, token_loss

TINY = ModelConfig(d_model=12, encoder_layers=1, decoder_layers=1, attn_heads=6, ff_dim=16,
                   memory_heads=6, l_agg=4, n_tokens=16, n_frames=4, n_mels=6, vocab_size=40,
                   dropout=0.0)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float]
    seed: int
    max_abs_error: float = 0.0  # near-zero gradients sit at the difference noise floor


def _problem(cfg: ModelConfig, seed: int):
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    model = MemoryTransformer(cfg).double()
    model.eval()  # dropout off, autograd still on
    frames = torch.randn(2, cfg.n_frames, cfg.n_mels, generator=g, dtype=torch.float64)
    mask = torch.ones(2, cfg.n_frames, dtype=torch.bool)
    mask[1, -1] = False
    target = torch.randint(3, cfg.vocab_size, (2, cfg.n_tokens // 2), generator=g)
    target[:, -1] = 2  # EOS
    target[1, -3:] = PAD_ID
    prior = torch.randint(3, cfg.vocab_size, (2, cfg.n_tokens), generator=g)
    prior[0, cfg.n_tokens // 2:] = PAD_ID
    prior[1, cfg.n_tokens - 3:] = PAD_ID

    def loss():
        logits = model(frames, shift_right(target), prior, mask)
        return token_loss(logits, target)

    return model, loss


def gradient_check(seed: int = 0, cfg: ModelConfig = TINY, h: float = 1e-5) -> GradCheckReport:
    """Central differences against autograd for every element of every parameter.

    Relative error per element is ``|fd - g| / max(|fd|, |g|, 1e-8)``.
    """
    model, loss = _problem(cfg, seed)
    model.zero_grad()
    loss().backward()
    per_tensor = {}
    abs_worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            flat = p.view(-1)
            worst = 0.0
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + h
                up = loss().item()
                flat[k] = orig - h
                down = loss().item()
                flat[k] = orig
                fd = (up - down) / (2 * h)
                g = analytic.view(-1)[k].item()
                err = abs(fd - g) / max(abs(fd), abs(g), 1e-8)
                worst = max(worst, err)
                abs_worst = max(abs_worst, abs(fd - g))
            per_tensor[name] = worst
    return GradCheckReport(max(per_tensor.values()), per_tensor, seed, abs_worst)


def descent_check(seed: int = 0, cfg: ModelConfig = TINY, step: float = 1e-4) -> tuple[float, float]:
    """Loss before and after a small step along the negative gradient."""
    model, loss = _problem(cfg, seed)
    model.zero_grad()
    before = loss()
    before.backward()
    before = before.detach()
    with torch.no_grad():
        for p in model.parameters():
            if p.grad is not None:
                p -= step * p.grad
        after = loss()
    return before.item(), after.item()
