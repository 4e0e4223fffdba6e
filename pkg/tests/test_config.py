"""Config parsing, overrides, and digest tests."""

import pytest

from cpcad import config as cfgmod
from cpcad.errors import ConfigError


def test_defaults_match_reference_constants():
    cfg = cfgmod.default_config()
    assert cfg.schedule.eps == 0.002
    assert cfg.schedule.t_max == 80.0
    assert cfg.schedule.rho == 7.0
    assert cfg.schedule.s0 == 2
    assert cfg.schedule.s1 == 1025
    assert cfg.schedule.mu0 == 0.95
    assert cfg.model.sigma_data == 0.5
    assert cfg.train.lr_initial == 2e-4
    assert cfg.train.lr_final == 5e-6
    assert cfg.patchgen.scale == 0.05
    assert cfg.patchgen.patch_fraction == 0.05


def test_parse_round_trip():
    cfg = cfgmod.default_config()
    cfg.train.steps = 777
    cfg.sampler.use_target_net = False
    text = cfgmod.serialize(cfg)
    back = cfgmod.parse(text)
    assert back == cfg
    assert cfgmod.serialize(back) == text


def test_parse_comments_and_t_key():
    cfg = cfgmod.parse("# comment\nschedule.T = 40.0  # inline\n\ntrain.steps = 10\n")
    assert cfg.schedule.t_max == 40.0
    assert cfg.train.steps == 10


def test_unknown_key_named_in_error():
    with pytest.raises(ConfigError) as err:
        cfgmod.parse("schedule.temperature = 3\n")
    assert "schedule.temperature" in str(err.value)


def test_bad_value_rejected():
    with pytest.raises(ConfigError):
        cfgmod.parse("train.steps = soon\n")
    with pytest.raises(ConfigError):
        cfgmod.parse("sampler.use_target_net = yes\n")


def test_overrides():
    cfg = cfgmod.default_config()
    cfgmod.apply_overrides(cfg, ["train.batch_size=8", "schedule.T=40.0"])
    assert cfg.train.batch_size == 8
    assert cfg.schedule.t_max == 40.0
    with pytest.raises(ConfigError):
        cfgmod.apply_overrides(cfg, ["no.such.key=1"])
    with pytest.raises(ConfigError):
        cfgmod.apply_overrides(cfg, ["not-an-assignment"])


def test_validation_rules():
    with pytest.raises(ConfigError):
        cfgmod.parse("train.loss_variant = ct_only\n")
    with pytest.raises(ConfigError):
        cfgmod.parse("schedule.eps = 100.0\n")  # eps above T
    with pytest.raises(ConfigError):
        cfgmod.parse("synth.shape = torus\n")


def test_digest_tracks_content():
    a = cfgmod.default_config()
    b = cfgmod.default_config()
    assert cfgmod.digest(a) == cfgmod.digest(b)
    b.train.seed = 43
    assert cfgmod.digest(a) != cfgmod.digest(b)
