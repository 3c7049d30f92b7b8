#!/usr/bin/env python3
"""
Configuration Test Script
Tests RunConfig validation, JSON loading with overrides and the shipped
config files
"""

import json
import os
import tempfile

import numpy as np

from helpers import expect_raises, run_tests

from config import DEFAULTS, RunConfig, load_config
from data import spec_from_config
from errors import ConfigError, StorageError

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


def test_defaults():
    """Test the default configuration"""
    print("⚙️  Testing defaults...")
    config = RunConfig()
    assert config.seed == 0 and config.out == "runs/desk"
    assert config.model_ids == ["small", "medium", "large"]
    assert config["router.threshold"] == 0.288 and config["router.mode"] == "single"
    assert config.path("models", "mux.muxc") == os.path.join("runs/desk", "models", "mux.muxc")
    assert set(config.to_dict()) == set(DEFAULTS)
    expect_raises(ConfigError, config.__getitem__, "train.momentum")
    print("✅ defaults OK")


def test_rejects_bad_values():
    """Test unknown keys, type mismatches and range checks"""
    print("🚫 Testing config validation...")
    expect_raises(ConfigError, RunConfig, {"train.momentum": 0.9})
    expect_raises(ConfigError, RunConfig, {"train.epochs": "ten"})
    expect_raises(ConfigError, RunConfig, {"train.epochs": 2.5})
    expect_raises(ConfigError, RunConfig, {"train.epochs": True})
    expect_raises(ConfigError, RunConfig, {"evaluate.pca": 1})
    expect_raises(ConfigError, RunConfig, {"run.seed": -1})
    expect_raises(ConfigError, RunConfig, {"train.batch_size": 0})
    expect_raises(ConfigError, RunConfig, {"train.alpha": -0.1})
    expect_raises(ConfigError, RunConfig, {"data.input_shape": [16, 16]})
    expect_raises(ConfigError, RunConfig, {"zoo.models": []})
    expect_raises(ConfigError, RunConfig, {"zoo.models": [{"layers": []}]})

    assert RunConfig({"train.epochs": 3.0})["train.epochs"] == 3.0
    assert RunConfig({"train.alpha": 1})["train.alpha"] == 1
    assert RunConfig({"costs.local_model": "small"})["costs.local_model"] == "small"
    assert RunConfig({"loss.literal_eq2": True})["loss.literal_eq2"] is True
    expect_raises(ConfigError, RunConfig, {"loss.literal_eq2": "yes"})
    print("✅ invalid configs rejected")


def test_overrides_do_not_leak():
    """Test that overrides never touch DEFAULTS"""
    config = RunConfig({"zoo.models": [{"id": "only", "layers": []}]})
    config.values["zoo.models"][0]["id"] = "changed"
    assert DEFAULTS["zoo.models"][0]["id"] == "small"
    assert RunConfig().model_ids == ["small", "medium", "large"]
    print("✅ DEFAULTS unchanged by overrides")


def test_rng_derivation():
    """Test per-purpose generators"""
    print("🎲 Testing config.rng...")
    config = RunConfig({"run.seed": 5})
    assert np.array_equal(config.rng("data.train").normal(4), config.rng("data.train").normal(4))
    assert not np.array_equal(config.rng("data.train").normal(4), config.rng("data.val").normal(4))
    other = RunConfig({"run.seed": 6})
    assert not np.array_equal(config.rng("data.train").normal(4), other.rng("data.train").normal(4))
    print("✅ tags and seeds give independent streams")


def test_load_config():
    """Test JSON loading and CLI-style overrides"""
    print("📂 Testing load_config...")
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "run.json")
        with open(path, "w") as f:
            json.dump({"run.seed": 9, "train.epochs": 1}, f)
        config = load_config(path)
        assert config.seed == 9 and config["train.epochs"] == 1

        overridden = load_config(path, seed=4, out=os.path.join(tmp, "out"))
        assert overridden.seed == 4 and overridden.out == os.path.join(tmp, "out")

        with open(path, "w") as f:
            f.write("{not json")
        expect_raises(ConfigError, load_config, path)

        with open(path, "w") as f:
            json.dump([1, 2], f)
        expect_raises(ConfigError, load_config, path)

        expect_raises(StorageError, load_config, os.path.join(tmp, "missing.json"))
    assert load_config().seed == 0
    print("✅ load_config OK")


def test_shipped_configs():
    """Test that every file in configs/ loads"""
    print("📂 Testing shipped configs...")
    desk = load_config(os.path.join(CONFIG_DIR, "desk.json"))
    assert desk.seed == 7 and len(desk.model_ids) == 3

    smoke = load_config(os.path.join(CONFIG_DIR, "smoke.json"))
    assert smoke.seed == 3 and smoke.out == "runs/smoke" and smoke["evaluate.pca"] is False
    assert smoke["data.train_samples"] == 600 and smoke["data.val_samples"] == 200

    mobile_cloud = load_config(os.path.join(CONFIG_DIR, "mobile_cloud.json"))
    assert mobile_cloud.model_ids == ["mobile", "cloud"]
    assert mobile_cloud["router.mode"] == "binary_offload"
    for config in (desk, smoke, mobile_cloud):
        spec = spec_from_config(config, config.seed)
        assert spec.num_models == len(config.model_ids)
        assert len({r.solvers for r in spec.regions}) > 1
    print("✅ desk, smoke and mobile_cloud configs load")


TESTS = [
    test_defaults,
    test_rejects_bad_values,
    test_overrides_do_not_leak,
    test_rng_derivation,
    test_load_config,
    test_shipped_configs,
]


if __name__ == "__main__":
    raise SystemExit(run_tests("⚙️  Configuration Test Suite", TESTS))
