"""Flat key=value configuration with layered overrides."""

from __future__ import annotations

import pytest

from amtmem.config import (ConfigError, RunConfig, env_overrides, load_config,
                           parse_config_text)


def test_defaults_build_components():
    cfg = RunConfig()
    assert cfg.model_config().l_agg == 64 and cfg.model_config().d_model == 96
    assert cfg.segment_config().n_frames == 256
    sched = cfg.schedule()
    assert (sched.peak, sched.floor) == (2e-4, 2e-5)


def test_parse_text():
    text = "# comment\nseed = 3\n\nl_agg=32  # trailing\n"
    assert parse_config_text(text) == {"seed": "3", "l_agg": "32"}
    with pytest.raises(ConfigError, match=":2:"):
        parse_config_text("seed=1\nnonsense\n", "f.txt")


def test_layering(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed=1\nl_agg=32\ndropout=0.2\n")
    env = {"AMTMEM_L_AGG": "16", "OTHER": "x"}
    cfg = load_config(path, {"dropout": "0.0"}, environ=env)
    assert (cfg.seed, cfg.l_agg, cfg.dropout) == (1, 16, 0.0)
    assert env_overrides(env) == {"l_agg": "16"}


@pytest.mark.parametrize("values", [{"bogus": "1"}, {"seed": "one"}, {"shuffle_augment": "maybe"}])
def test_bad_values(values):
    with pytest.raises(ConfigError):
        RunConfig().update(values, "test")


def test_unknown_env_key_rejected():
    with pytest.raises(ConfigError, match="environment"):
        load_config(environ={"AMTMEM_NOPE": "1"})


def test_booleans_and_render_round_trip():
    cfg = RunConfig().update({"shuffle_augment": "off", "share_memory_embedding": "yes"}, "t")
    assert cfg.shuffle_augment is False and cfg.share_memory_embedding is True
    again = RunConfig().update(parse_config_text(cfg.render()), "rendered")
    assert again == cfg
