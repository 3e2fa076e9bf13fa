"""Flat run configuration: defaults < config file < environment < command line."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .model import ModelConfig
from .segmenter import SegmentConfig
from .training import Schedule

ENV_PREFIX = "AMTMEM_"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    # segmentation
    n_frames: int = 256
    n_tokens: int = 1024
    frames_per_segment: int = 2000
    max_hop: int = 1
    batch_size: int = 12
    # model
    d_model: int = 96
    encoder_layers: int = 2
    decoder_layers: int = 2
    attn_heads: int = 6
    ff_dim: int = 192
    memory_heads: int = 6
    l_agg: int = 64
    dropout: float = 0.1
    share_memory_embedding: bool = False
    # optimisation
    lr_peak: float = 2e-4
    lr_floor: float = 2e-5
    warmup_steps: int = 50          # toy scale; long runs want tens of thousands
    train_steps: int = 400
    eval_every: int = 100
    shuffle_augment: bool = True
    # inference / evaluation
    max_decode_tokens: int = 1024
    tolerance_s: float = 0.05
    # paths
    manifest: str = ""
    out_dir: str = "run"

    def segment_config(self) -> SegmentConfig:
        return SegmentConfig(self.n_frames, self.n_tokens, self.frames_per_segment, self.max_hop,
                             self.batch_size)

    def model_config(self) -> ModelConfig:
        return ModelConfig(d_model=self.d_model, encoder_layers=self.encoder_layers,
                           decoder_layers=self.decoder_layers, attn_heads=self.attn_heads,
                           ff_dim=self.ff_dim, memory_heads=self.memory_heads, l_agg=self.l_agg,
                           n_tokens=self.n_tokens, n_frames=self.n_frames, dropout=self.dropout,
                           share_memory_embedding=self.share_memory_embedding)

    def schedule(self) -> Schedule:
        return Schedule(self.lr_peak, self.lr_floor, self.warmup_steps, self.train_steps)

    def render(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())

    def update(self, values: dict[str, str], source: str) -> RunConfig:
        types = {f.name: f.type for f in fields(self)}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"{source}: unknown config key {key!r}")
            setattr(self, key, _coerce(key, raw, getattr(self, key), source))
        return self


def _fmt(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(key: str, raw, current, source: str):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(current, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{source}: bad value {raw!r} for {key}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def env_overrides(environ=None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    return {k[len(ENV_PREFIX):].lower(): v for k, v in environ.items()
            if k.startswith(ENV_PREFIX)}


def load_config(path: str | Path | None = None, overrides: dict | None = None,
                environ=None) -> RunConfig:
    cfg = RunConfig()
    if path:
        cfg.update(parse_config_text(Path(path).read_text(), str(path)), str(path))
    cfg.update(env_overrides(environ), "environment")
    if overrides:
        cfg.update(overrides, "command line")
    return cfg
