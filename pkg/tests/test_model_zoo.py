#!/usr/bin/env python3
"""
Model Zoo Test Script
Tests classifier forward passes, projection heads, FLOPs accounting and
MUXC checkpoint files
"""

import os
import tempfile

import numpy as np

from helpers import expect_raises, run_tests

import tensor_core as tc
from config import DEFAULTS
from data import Dataset
from errors import ConfigError, NumericError, ShapeError, StorageError
from model_zoo import (CHECKPOINT_MAGIC, Checkpoint, ClassifierModel, LayerStack, ProjectionHead, accuracy,
                       build_zoo, count_flops, forward, load_checkpoint, load_model, load_zoo, project,
                       save_checkpoint, save_model)

INPUT_SHAPE = (1, 16, 16)


def _default_zoo(seed=0):
    return build_zoo(DEFAULTS["zoo.models"], INPUT_SHAPE, 10, DEFAULTS["zoo.shared_dim"], tc.Rng(seed))


def test_count_flops():
    """Test FLOPs formulas on hand-counted architectures"""
    print("🔢 Testing FLOPs accounting...")
    dense = ClassifierModel("dense", (10,), [], 10)
    assert count_flops(dense) == 200
    assert count_flops(LayerStack([], (10,))) == 0

    flops = {c.id: c.flops for c in _default_zoo()}
    print(f"📊 default zoo FLOPs: {flops}")
    assert flops == {"small": 8864, "medium": 23016, "large": 165984}
    print("✅ FLOPs match the hand counts")


def test_forward_zero_and_identity():
    """Test forward passes of zero-weight and identity models"""
    print("🧠 Testing forward passes...")
    zero = ClassifierModel("zero", (1, 2, 3), [{"type": "dense", "units": 4}, {"type": "relu"}], 5)
    logits, g = forward(zero, tc.Tensor(np.ones((2, 1, 2, 3))))
    assert logits.shape == (2, 5) and g.shape == (2, 4)
    assert not logits.data.any() and not g.data.any()

    identity = ClassifierModel("identity", (3,), [], 3)
    identity.classifier[0].data = np.eye(3, dtype=np.float32)
    x = tc.Tensor([1.0, -2.0, 0.5])
    logits, g = forward(identity, x)
    assert logits.shape == (3,)
    assert np.array_equal(logits.data, x.data) and np.array_equal(g.data, x.data)
    print("✅ zero and identity models behave as expected")


def test_forward_hand_trace():
    """Test a seeded 2-layer model against a numpy trace"""
    print("🧠 Testing forward against a hand trace...")
    model = ClassifierModel("traced", (4,), [{"type": "dense", "units": 3}, {"type": "relu"}], 2, tc.Rng(5))
    model.body.params[1].data = np.array([0.1, -0.2, 0.3], dtype=np.float32)
    x = np.array([0.5, -1.0, 2.0, 0.25], dtype=np.float32)

    w1, b1 = (p.data.astype(np.float64) for p in model.body.params)
    wc, bc = (p.data.astype(np.float64) for p in model.classifier)
    hidden = np.maximum(x @ w1 + b1, 0.0)
    expected = hidden @ wc + bc

    logits, g = forward(model, tc.Tensor(x))
    assert np.allclose(g.data, hidden, atol=1e-6)
    assert np.allclose(logits.data, expected, atol=1e-5)
    expect_raises(ShapeError, forward, model, tc.Tensor(np.ones(5)))
    print(f"✅ logits {np.round(logits.data, 4).tolist()} match the trace")


def test_project():
    """Test projection heads"""
    print("🧭 Testing project...")
    head = ProjectionHead(2, 2)
    e = project(head, tc.Tensor([3.0, 4.0], dtype=np.float64))
    assert np.allclose(e.data, [0.6, 0.8])
    unit = project(head, tc.Tensor([[0.6, 0.8]], dtype=np.float64))
    assert np.allclose(unit.data, [[0.6, 0.8]])

    expect_raises(NumericError, project, head, tc.Tensor([0.0, 0.0]))
    both = project(head, tc.Tensor([[0.0, 0.0], [3.0, 4.0]], dtype=np.float64), allow_zero=True)
    assert np.allclose(both.data, [[0.0, 0.0], [0.6, 0.8]])
    expect_raises(ShapeError, project, head, tc.Tensor([1.0, 2.0, 3.0]))

    costed = _default_zoo()[2]
    _, g = forward(costed.model, tc.Tensor(tc.Rng(1).normal((4,) + INPUT_SHAPE)))
    norms = np.linalg.norm(project(costed.head, g).data, axis=-1)
    assert np.allclose(norms, 1.0, atol=1e-6)
    print("✅ projected embeddings are unit-norm")


def test_build_zoo():
    """Test seeded construction and descriptor validation"""
    print("🏗️  Testing build_zoo...")
    first, second = _default_zoo(3), _default_zoo(3)
    for a, b in zip(first, second):
        assert all(np.array_equal(p.data, q.data) for p, q in zip(a.params, b.params))
    other = _default_zoo(4)
    assert not np.array_equal(first[0].params[0].data, other[0].params[0].data)

    twice = [{"id": "a", "layers": []}, {"id": "a", "layers": []}]
    expect_raises(ConfigError, build_zoo, twice, INPUT_SHAPE, 10, 8, tc.Rng(0))
    unknown = [{"id": "a", "layers": [{"type": "pool"}]}]
    expect_raises(ConfigError, build_zoo, unknown, INPUT_SHAPE, 10, 8, tc.Rng(0))
    print("✅ same seed gives identical parameters")


def test_checkpoint_round_trip():
    """Test save/load of classifier checkpoints"""
    print("💾 Testing checkpoint round trip...")
    costed = _default_zoo(1)[1]
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "medium.muxc")
        save_model(path, costed, seed=1, metadata={"epochs": 2})
        loaded = load_model(path)
        assert loaded.id == "medium" and loaded.flops == costed.flops
        for p, q in zip(costed.params, loaded.params):
            assert p.name == q.name and np.array_equal(p.data, q.data)
        checkpoint = load_checkpoint(path)
        assert checkpoint.seed == 1 and checkpoint.metadata == {"epochs": 2}

        with open(path, "rb") as f:
            blob = f.read()
        with open(path, "wb") as f:
            f.write(b"XXXX" + blob[4:])
        error = expect_raises(StorageError, load_checkpoint, path)
        assert "magic" in str(error)

        with open(path, "wb") as f:
            f.write(blob[:len(blob) // 2])
        expect_raises(StorageError, load_checkpoint, path)
        expect_raises(StorageError, load_checkpoint, os.path.join(tmp, "missing.muxc"))
    print("✅ checkpoints round-trip bit-exactly and damage is detected")


def test_checkpoint_newer_version():
    """Test that a newer format version is refused with both versions named"""
    print("💾 Testing checkpoint versioning...")
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "future.muxc")
        save_checkpoint(path, Checkpoint({"kind": "classifier"}, [np.zeros(2)], version=7))
        error = expect_raises(StorageError, load_checkpoint, path)
        assert "7" in str(error) and "1" in str(error)
        with open(path, "rb") as f:
            assert f.read(4) == CHECKPOINT_MAGIC
    print(f"✅ {error}")


def test_load_zoo_mismatch():
    """Test that checkpoints disagreeing on class count are rejected"""
    print("💾 Testing load_zoo consistency checks...")
    a = build_zoo([{"id": "a", "layers": []}], (4,), 3, 2, tc.Rng(0))[0]
    b = build_zoo([{"id": "b", "layers": []}], (4,), 5, 2, tc.Rng(0))[0]
    with tempfile.TemporaryDirectory() as tmp:
        paths = [os.path.join(tmp, "a.muxc"), os.path.join(tmp, "b.muxc")]
        save_model(paths[0], a)
        save_model(paths[1], b)
        expect_raises(ConfigError, load_zoo, paths)
    print("✅ mismatched zoo rejected")


def test_accuracy_empty():
    """Test accuracy on an empty dataset"""
    empty = Dataset(np.zeros((0,) + INPUT_SHAPE), np.zeros(0), 10, "val")
    assert np.isnan(accuracy(_default_zoo()[0].model, empty))
    print("✅ accuracy of an empty dataset is NaN")


TESTS = [
    test_count_flops,
    test_forward_zero_and_identity,
    test_forward_hand_trace,
    test_project,
    test_build_zoo,
    test_checkpoint_round_trip,
    test_checkpoint_newer_version,
    test_load_zoo_mismatch,
    test_accuracy_empty,
]


if __name__ == "__main__":
    raise SystemExit(run_tests("🧠 Model Zoo Test Suite", TESTS))
