"""
Synthetic planted-expertise datasets, MUXD dataset files and batching.

Each expertise region owns a set of classes and a spatial window of the
input. A sample of a region's class carries that class's pattern inside the
region's window and only noise elsewhere, so a model that looks at one window
can classify that region's inputs and nothing else.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from errors import ConfigError, NumericError, ShapeError, StorageError
from storage import BinaryReader, BinaryWriter, read_blob, write_blob
from tensor_core import Rng

logger = logging.getLogger(__name__)

# Constants
DATASET_MAGIC = b"MUXD"
DATASET_VERSION = 1
SPLITS = ("train", "val")


@dataclass
class Region:
    """
    One expertise region.

    Args:
        classes: class indices whose inputs belong to this region
        fraction: share of samples drawn from this region
        rows: [start, stop) rows of the window carrying the class pattern
        cols: [start, stop) columns, full width when None
        solvers: how many zoo models are meant to see this window; the
            sample's hardness is num_models - solvers
    """
    classes: tuple
    fraction: float
    rows: tuple
    cols: tuple = None
    solvers: int = 1


@dataclass
class PlantedSpec:
    """Generator settings; `seed` fixes the class patterns shared by all splits"""
    num_classes: int = 10
    input_shape: tuple = (1, 16, 16)
    regions: list = field(default_factory=list)
    noise: float = 0.3
    amplitude: float = 1.0
    seed: int = 0
    num_models: int = 3

    def validate(self):
        if not self.regions:
            raise ConfigError("planted spec needs at least one region")
        total = sum(r.fraction for r in self.regions)
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"region fractions must sum to 1, got {total:.6f}")
        if any(r.fraction < 0 for r in self.regions):
            raise ConfigError("region fractions must be non-negative")
        if self.noise < 0:
            raise ConfigError(f"noise must be non-negative, got {self.noise}")
        seen = set()
        _, h, w = self.input_shape
        for idx, region in enumerate(self.regions):
            for c in region.classes:
                if not 0 <= c < self.num_classes:
                    raise ConfigError(f"region {idx}: class {c} outside 0..{self.num_classes - 1}")
                if c in seen:
                    raise ConfigError(f"region {idx}: class {c} already belongs to another region")
                seen.add(c)
            r0, r1 = region.rows
            c0, c1 = region.cols if region.cols is not None else (0, w)
            if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
                raise ConfigError(f"region {idx}: window rows={region.rows} cols={region.cols} outside {h}x{w}")
            if not 0 <= region.solvers <= self.num_models:
                raise ConfigError(f"region {idx}: solvers {region.solvers} outside 0..{self.num_models}")
        return self


def spec_from_config(config, seed):
    """PlantedSpec from the `data.*` config keys"""
    regions = [
        Region(tuple(r["classes"]), float(r["fraction"]), tuple(r["rows"]),
               tuple(r["cols"]) if r.get("cols") is not None else None, int(r.get("solvers", 1)))
        for r in config["data.regions"]
    ]
    spec = PlantedSpec(
        num_classes=int(config["data.num_classes"]),
        input_shape=tuple(int(d) for d in config["data.input_shape"]),
        regions=regions,
        noise=float(config["data.noise"]),
        amplitude=float(config["data.amplitude"]),
        seed=seed,
        num_models=len(config["zoo.models"]),
    )
    return spec.validate()


@dataclass
class Dataset:
    """Inputs [n, C, H, W] (float32) with integer labels and a split tag"""
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ShapeError(f"labels must lie in 0..{self.num_classes - 1}")
        if not np.all(np.isfinite(self.inputs)):
            raise NumericError("dataset inputs contain NaN or Inf")
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r} (expected one of {SPLITS})")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def input_shape(self):
        return tuple(self.inputs.shape[1:])


@dataclass
class PlantedAnnotations:
    """Per-sample ground truth of the generator (used by tests and diagnostics)"""
    regions: np.ndarray
    hardness: np.ndarray


# ============================================================================
# Generation
# ============================================================================

def _region_counts(fractions, num_samples):
    """Exact per-region counts; leftover samples go to the largest remainders"""
    raw = np.asarray(fractions, dtype=np.float64) * num_samples
    counts = np.floor(raw).astype(np.int64)
    leftover = num_samples - int(counts.sum())
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def class_patterns(spec):
    """One pattern per (region, class), drawn from the generator seed"""
    _, h, w = spec.input_shape
    channels = spec.input_shape[0]
    root = Rng(spec.seed)
    patterns = {}
    for idx, region in enumerate(spec.regions):
        r0, r1 = region.rows
        c0, c1 = region.cols if region.cols is not None else (0, w)
        region_rng = root.derive(f"region{idx}")
        for c in region.classes:
            patterns[c] = region_rng.normal((channels, r1 - r0, c1 - c0))
    return patterns


def generate_planted(spec, num_samples, seed, split="train"):
    """
    Draw a planted-expertise dataset.

    Args:
        spec: validated PlantedSpec
        num_samples: number of samples
        seed: sampling seed (different per split)
        split: 'train' or 'val'

    Returns:
        tuple: (Dataset, PlantedAnnotations)
    """
    spec.validate()
    rng = Rng(seed)
    patterns = class_patterns(spec)
    _, h, w = spec.input_shape

    counts = _region_counts([r.fraction for r in spec.regions], num_samples)
    region_of = np.concatenate([np.full(n, idx, dtype=np.int64) for idx, n in enumerate(counts)])
    region_of = region_of[rng.permutation(num_samples)]

    labels = np.zeros(num_samples, dtype=np.int64)
    for idx, region in enumerate(spec.regions):
        members = np.flatnonzero(region_of == idx)
        classes = np.asarray(region.classes, dtype=np.int64)
        labels[members] = classes[rng.integers(0, len(classes), size=members.size)]

    inputs = spec.noise * rng.normal((num_samples,) + tuple(spec.input_shape))
    for i in range(num_samples):
        region = spec.regions[region_of[i]]
        r0, r1 = region.rows
        c0, c1 = region.cols if region.cols is not None else (0, w)
        inputs[i, :, r0:r1, c0:c1] += spec.amplitude * patterns[labels[i]]

    solvers = np.asarray([r.solvers for r in spec.regions], dtype=np.int64)
    hardness = spec.num_models - solvers[region_of]
    dataset = Dataset(inputs.astype(np.float32), labels, spec.num_classes, split)
    logger.info("generated %s split: %d samples, region counts %s", split, num_samples, counts.tolist())
    return dataset, PlantedAnnotations(region_of, hardness)


def batch_indices(num_samples, batch_size, rng):
    """Index arrays of one shuffled epoch; the final short batch is kept"""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(num_samples)
    for start in range(0, num_samples, batch_size):
        yield order[start:start + batch_size]


def batches(dataset, batch_size, rng):
    """
    One epoch of shuffled batches; the final short batch is kept.

    Yields:
        tuple: (inputs [b, C, H, W], labels [b])
    """
    for idx in batch_indices(len(dataset), batch_size, rng):
        yield dataset.inputs[idx], dataset.labels[idx]


# ============================================================================
# MUXD files
# ============================================================================

def save_dataset(path, dataset):
    """
    MUXD layout: magic, u32 version, u32 sample count, u32 rank + dims of one
    sample, f32 inputs, u32 labels, length-prefixed JSON metadata, CRC32.
    """
    writer = BinaryWriter(DATASET_MAGIC, DATASET_VERSION)
    writer.u32(len(dataset))
    writer.u32(len(dataset.input_shape))
    for dim in dataset.input_shape:
        writer.u32(dim)
    writer.f32_array(dataset.inputs)
    writer.u32_array(dataset.labels)
    writer.text(json.dumps({"num_classes": dataset.num_classes, "split": dataset.split}, sort_keys=True))
    write_blob(path, writer.finish())
    logger.info("saved %s dataset (%d samples) to %s", dataset.split, len(dataset), path)


def load_dataset(path):
    reader = BinaryReader(read_blob(path), DATASET_MAGIC, DATASET_VERSION, path)
    count = reader.u32()
    rank = reader.u32()
    shape = tuple(reader.u32() for _ in range(rank))
    inputs = reader.f32_array((count,) + shape)
    labels = reader.u32_array(count)
    try:
        meta = json.loads(reader.text())
    except json.JSONDecodeError as e:
        raise StorageError(f"{path}: invalid metadata ({e})")
    reader.ensure_consumed()
    return Dataset(inputs, labels, int(meta["num_classes"]), meta.get("split", "train"))
