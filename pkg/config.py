"""
Run configuration: one JSON file with flat dotted keys. Every key and its
default lives in DEFAULTS; unknown keys are rejected.
"""

import copy
import json
import logging
import os

from errors import ConfigError, StorageError
from tensor_core import Rng

logger = logging.getLogger(__name__)

DEFAULTS = {
    # Run
    "run.seed": 0,
    "run.out": "runs/desk",

    # Planted-expertise data: each region owns a class subset whose pattern
    # sits in its own row band; solvers counts the zoo models that watch it
    "data.num_classes": 10,
    "data.input_shape": [1, 16, 16],
    "data.train_samples": 6000,
    "data.val_samples": 1000,
    "data.noise": 0.3,
    "data.amplitude": 1.0,
    "data.regions": [
        {"classes": [0, 1], "fraction": 0.25, "rows": [4, 8], "cols": [0, 16], "solvers": 3},
        {"classes": [2, 3, 4], "fraction": 0.3, "rows": [8, 12], "cols": [0, 16], "solvers": 2},
        {"classes": [5, 6], "fraction": 0.25, "rows": [12, 16], "cols": [0, 16], "solvers": 1},
        {"classes": [7, 8, 9], "fraction": 0.2, "rows": [0, 4], "cols": [0, 16], "solvers": 1},
    ],

    # Model zoo, cheapest first; medium's window is inside large's, small
    # alone watches the top band
    "zoo.models": [
        {"id": "small", "layers": [
            {"type": "crop", "rows": [0, 8], "cols": [0, 16]},
            {"type": "dense", "units": 32},
            {"type": "relu"},
        ]},
        {"id": "medium", "layers": [
            {"type": "crop", "rows": [4, 12], "cols": [0, 16]},
            {"type": "conv", "filters": 4, "kernel": 3},
            {"type": "relu"},
            {"type": "dense", "units": 24},
            {"type": "relu"},
        ]},
        {"id": "large", "layers": [
            {"type": "crop", "rows": [4, 16], "cols": [0, 16]},
            {"type": "conv", "filters": 8, "kernel": 3},
            {"type": "relu"},
            {"type": "dense", "units": 64},
            {"type": "relu"},
        ]},
    ],
    "zoo.shared_dim": 32,

    # Multiplexer
    "mux.layers": [
        {"type": "conv", "filters": 4, "kernel": 3, "stride": 2},
        {"type": "relu"},
        {"type": "conv", "filters": 4, "kernel": 3, "stride": 2},
        {"type": "relu"},
        {"type": "conv", "filters": 8, "kernel": 3},
        {"type": "relu"},
        {"type": "conv", "filters": 16, "kernel": 1},
        {"type": "relu"},
    ],
    "mux.meta_dim": 16,

    # Training
    "train.alpha": 0.05,
    "train.epochs": 20,
    "train.batch_size": 64,
    "train.mux_alpha": 0.02,
    "train.mux_epochs": 30,
    "train.lambda_distill": 1.0,

    # Losses
    "loss.literal_eq2": False,
    "loss.epsilon": 1e-6,

    # Routing
    "router.mode": "single",
    "router.threshold": 0.288,
    "router.offload_threshold": 0.5,
    "router.average": "uniform",

    # Cost profile derived from FLOPs
    "costs.mobile_gflops": 85.0,
    "costs.cloud_gflops": 1390.0,
    "costs.mobile_mj_per_mflop": 0.04,
    "costs.cloud_mj_per_mflop": 0.01,
    "costs.uplink_mbps": 20.0,
    "costs.downlink_mbps": 60.0,
    "costs.radio_mw_up": 1300.0,
    "costs.radio_mw_down": 900.0,
    "costs.payload_bytes": None,     # input tensor size when null
    "costs.response_bytes": None,    # one f32 per class when null
    "costs.local_model": None,       # first model when null
    "costs.cloud_model": None,       # most FLOPs when null

    # Evaluation and simulation
    "evaluate.pca": True,
    "evaluate.batch_size": 256,
    "simulate.profiles": ["reference"],
    "simulate.fraction_local": 0.68,
    "simulate.called": None,
}


def _check_type(key, value):
    default = DEFAULTS[key]
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
            ok = value.is_integer()
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"config key {key}: expected {type(default).__name__}, got {value!r}")


class RunConfig:
    """
    Validated flat configuration. Read keys with config["train.alpha"].

    Args:
        values: dotted-key overrides on top of DEFAULTS
    """

    def __init__(self, values=None):
        values = values or {}
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in values.items():
            _check_type(key, value)
        self.values = copy.deepcopy(DEFAULTS)
        self.values.update(copy.deepcopy(values))
        self._validate()

    def _validate(self):
        v = self.values
        if v["run.seed"] < 0:
            raise ConfigError(f"run.seed must be non-negative, got {v['run.seed']}")
        for key in ("train.epochs", "train.mux_epochs"):
            if v[key] < 0:
                raise ConfigError(f"{key} must be >= 0, got {v[key]}")
        for key in ("train.batch_size", "evaluate.batch_size", "zoo.shared_dim", "mux.meta_dim"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1, got {v[key]}")
        for key in ("train.alpha", "train.mux_alpha", "train.lambda_distill", "loss.epsilon"):
            if v[key] < 0:
                raise ConfigError(f"{key} must be non-negative, got {v[key]}")
        if len(v["data.input_shape"]) != 3:
            raise ConfigError(f"data.input_shape must be [C, H, W], got {v['data.input_shape']}")
        if not v["zoo.models"]:
            raise ConfigError("zoo.models is empty")
        for desc in v["zoo.models"]:
            if "id" not in desc:
                raise ConfigError(f"model descriptor without id: {desc}")

    def __getitem__(self, key):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key}")
        return self.values[key]

    @property
    def seed(self):
        return int(self.values["run.seed"])

    @property
    def out(self):
        return self.values["run.out"]

    @property
    def model_ids(self):
        return [desc["id"] for desc in self.values["zoo.models"]]

    def rng(self, tag):
        """Generator for one purpose, derived from the root seed"""
        return Rng(self.seed).derive(tag)

    def to_dict(self):
        return copy.deepcopy(self.values)

    def path(self, *parts):
        """Path inside the run output directory"""
        return os.path.join(self.out, *parts)


def load_config(path=None, seed=None, out=None):
    """
    Load a JSON config and apply --seed / --out overrides.

    Raises:
        StorageError: the file cannot be read
        ConfigError: invalid JSON, unknown keys or bad values
    """
    values = {}
    if path:
        try:
            with open(path) as f:
                values = json.load(f)
        except OSError as e:
            raise StorageError(f"cannot read config {path}: {e}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})")
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: top level must be an object of dotted keys")
    if seed is not None:
        values["run.seed"] = int(seed)
    if out is not None:
        values["run.out"] = out
    config = RunConfig(values)
    logger.debug("loaded config %s (seed=%d, out=%s)", path or "<defaults>", config.seed, config.out)
    return config
