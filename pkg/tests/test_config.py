import json

import pytest

from mscred.config import PRESETS, RunConfig, apply_overrides, preset
from mscred.errors import ConfigError


@pytest.mark.parametrize("name", PRESETS)
def test_presets_round_trip(name, tmp_path):
    cfg = preset(name)
    cfg.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json") == cfg


def test_full_size_preset_values():
    cfg = preset("paper-synthetic")
    assert (cfg.synth.n, cfg.synth.T, cfg.synth.noise) == (30, 20000, 0.3)
    assert (cfg.inject.count, tuple(cfg.inject.durations), cfg.inject.causes_per_event) == (5, (30, 60, 90), 3)
    assert (cfg.splits.train, cfg.splits.valid, cfg.splits.test) == ((0, 8000), (8000, 10000), (10000, 20000))
    assert tuple(cfg.signature.scales) == (10, 30, 60) and cfg.signature.gap == 10
    assert tuple(cfg.model.channels) == (32, 64, 128, 256)
    assert (cfg.train.h, cfg.train.chi, cfg.train.lr) == (5, 5.0, 1e-3)
    assert (cfg.detect.beta, cfg.detect.top_k) == (1.0, 3)


def test_toy_preset_values():
    cfg = preset("toy")
    assert (cfg.synth.n, cfg.synth.T) == (10, 2000)
    assert tuple(cfg.model.channels) == (8, 16, 32, 64)


def test_unknown_preset():
    with pytest.raises(ConfigError):
        preset("huge")


def test_unknown_keys_rejected(tmp_path):
    d = preset("toy").to_dict()
    d["bogus"] = 1
    with pytest.raises(ConfigError):
        RunConfig.from_dict(d)
    d = preset("toy").to_dict()
    d["train"]["speed"] = 11
    with pytest.raises(ConfigError):
        RunConfig.from_dict(d)
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "bad.json")


def test_overrides():
    cfg = apply_overrides(preset("toy"), ["train.epochs=3", "train.ablation=no_attention", "detect.beta=1.5", "signature.scales=[10,20]"])
    assert cfg.train.epochs == 3 and cfg.train.ablation == "no_attention" and cfg.detect.beta == 1.5
    assert tuple(cfg.signature.scales) == (10, 20)
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["train.epochs"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["nope.x=1"])


def test_with_seed_derives_subseeds():
    cfg = preset("toy").with_seed(10)
    assert (cfg.seed, cfg.synth.seed, cfg.inject.seed, cfg.train.seed) == (10, 10, 11, 12)


def test_config_json_uses_lambda_key():
    assert "lambda" in json.loads(json.dumps(preset("toy").to_dict()))["synth"]
