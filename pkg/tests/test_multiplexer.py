#!/usr/bin/env python3
"""
Multiplexer Test Script
Tests meta-features, cost-discounted stacking weights, the stacked ensemble,
the multiplexer and distillation losses, training steps and checkpoints
"""

import os
import tempfile

import numpy as np

from helpers import expect_raises, run_tests, unit_rows

import tensor_core as tc
from config import DEFAULTS, RunConfig
from data import generate_planted, spec_from_config
from errors import ConfigError, ShapeError
from model_zoo import build_zoo, save_model
from multiplexer import (MuxNet, _stacking_logits, cloud_weight, distill_features, distill_loss, ensemble_predict,
                         load_mux, meta_features, mux_flops, mux_forward, mux_loss, mux_train_step,
                         mux_train_step_on_outputs, mux_weights, save_mux)

SEEDS = range(20)
INPUT_SHAPE = (1, 16, 16)
ZOO_FLOPS = [8864, 23016, 165984]


def _default_mux(seed=0, costs=ZOO_FLOPS):
    return MuxNet(INPUT_SHAPE, DEFAULTS["mux.layers"], DEFAULTS["mux.meta_dim"], costs, DEFAULTS["zoo.shared_dim"],
                  rng=tc.Rng(seed), model_ids=["small", "medium", "large"][:len(costs)])


def _float64_mux(seed):
    """Tiny multiplexer with float64 parameters for finite differences"""
    mux = MuxNet((1, 6, 6), [{"type": "conv", "filters": 2, "kernel": 3}, {"type": "relu"}], 4, [1.0, 2.5, 4.0], 4,
                 rng=tc.Rng(seed))
    for p in mux.params:
        p.data = p.data.astype(np.float64)
    return mux


def test_meta_features():
    """Test zero-weight, hand-traced and seeded meta-features"""
    print("🧩 Testing meta_features...")
    zero = MuxNet(INPUT_SHAPE, DEFAULTS["mux.layers"], 16, [1.0, 2.0], 8)
    m = meta_features(zero, tc.Tensor(np.ones(INPUT_SHAPE)))
    assert m.shape == (16,) and not m.data.any()

    linear = MuxNet((1, 2, 2), [], 3, [1.0, 1.0], 2, rng=tc.Rng(1))
    x = np.array([[[1.0, -1.0], [0.5, 2.0]]], dtype=np.float32)
    w, b = (p.data.astype(np.float64) for p in linear.meta)
    expected = x.reshape(-1) @ w + b
    assert np.allclose(meta_features(linear, tc.Tensor(x)).data, expected, atol=1e-6)

    batch = tc.Tensor(tc.Rng(2).normal((4,) + INPUT_SHAPE))
    a = meta_features(_default_mux(5), batch).data
    b = meta_features(_default_mux(5), batch).data
    assert a.shape == (4, 16) and np.array_equal(a, b)
    expect_raises(ShapeError, meta_features, zero, tc.Tensor(np.ones((1, 8, 8))))
    print("✅ meta-features OK")


def test_mux_weights_examples():
    """Test stacking weights on hand-computed cases"""
    print("⚖️  Testing mux_weights...")
    out = mux_weights(np.array([1.0]), np.array([[1.0], [1.0]]), [1.0, 1.0])
    assert np.allclose(out.weights, [0.5, 0.5])

    out = mux_weights(np.array([1.0]), np.array([[1.0], [1.0]]), [1.0, 2.0])
    assert np.allclose(out.logits, [1.0, 0.5])
    assert np.allclose(out.weights, [0.62246, 0.37754], atol=1e-5)
    assert abs(cloud_weight(out) - out.weights[1]) < 1e-12

    expect_raises(ConfigError, mux_weights, np.array([1.0]), np.array([[1.0], [1.0]]), [1.0, 0.0])
    expect_raises(ShapeError, mux_weights, np.array([1.0, 2.0]), np.array([[1.0], [1.0]]), [1.0, 1.0])
    expect_raises(ConfigError, MuxNet, INPUT_SHAPE, [], 4, [1.0, -2.0], 4)
    print("✅ w = [0.62246, 0.37754] for raw scores [1, 1] and costs [1, 2]")


def test_weights_are_probabilities():
    """Test that weights sum to 1 on 1,000 random inputs"""
    print("⚖️  Testing weight normalisation on 1,000 inputs...")
    mux = _default_mux(7)
    inputs = tc.Tensor(tc.Rng(8).normal((1000,) + INPUT_SHAPE))
    w = mux_forward(mux, inputs).weights
    assert w.shape == (1000, 3)
    assert np.all(w >= 0) and np.all(w <= 1)
    worst = float(np.max(np.abs(w.astype(np.float64).sum(axis=1) - 1.0)))
    assert worst <= 1e-6
    print(f"✅ max |sum(w) - 1| = {worst:.2e}")


def test_argmax_invariant_under_cost_scaling():
    """Test that scaling every cost by k keeps argmax(w)"""
    print("⚖️  Testing cost scaling invariance...")
    rng = tc.Rng(9)
    m = rng.normal((1000, 6))
    v = rng.normal((3, 6))
    costs = np.array([1.0, 2.0, 17.0])
    reference = np.argmax(mux_weights(m, v, costs).weights, axis=1)
    for k in (0.01, 1.0, 100.0):
        out = mux_weights(m, v, costs * k)
        assert np.allclose(out.logits * k, (m @ v.T) / costs)
        assert np.array_equal(np.argmax(out.weights, axis=1), reference)
    print("✅ argmax(w) unchanged for k in {0.01, 1, 100}")


def test_ensemble_predict():
    """Test the stacked ensemble on hand-computed cases"""
    print("🧮 Testing ensemble_predict...")
    p1, p2 = np.array([0.9, 0.1]), np.array([0.2, 0.8])
    logits = [np.log(p1), np.log(p2)]
    assert np.allclose(ensemble_predict([1.0, 0.0], logits), p1)
    assert np.allclose(ensemble_predict([0.0, 1.0], logits), p2)

    split = ensemble_predict([0.5, 0.5], [np.array([30.0, 0.0]), np.array([0.0, 30.0])])
    assert np.allclose(split, [0.5, 0.5], atol=1e-9)

    # 0.62246 * 0.9 + 0.37754 * 0.2 and 0.62246 * 0.1 + 0.37754 * 0.8
    mixed = ensemble_predict([0.62246, 0.37754], logits)
    assert np.allclose(mixed, [0.635722, 0.364278], atol=1e-6)
    assert abs(mixed.sum() - 1.0) < 1e-9

    batch = ensemble_predict(np.array([[1.0, 0.0], [0.0, 1.0]]), [np.log([p1, p1]), np.log([p2, p2])])
    assert np.allclose(batch, [p1, p2])
    expect_raises(ShapeError, ensemble_predict, [0.5, 0.5], [np.zeros(2), np.zeros(3)])
    print(f"✅ mixed prediction {np.round(mixed, 5).tolist()}")


def test_mux_loss():
    """Test the negative log-likelihood of the ensemble"""
    print("📉 Testing mux_loss...")
    assert abs(mux_loss(np.array([0.0, 1.0]), 1).item()) < 1e-5
    assert abs(mux_loss(np.array([0.5, 0.5]), 0).item() - 0.6931) < 1e-4
    values = [mux_loss(np.array([p, 1 - p]), 0).item() for p in (0.1, 0.3, 0.6, 0.9)]
    assert all(a > b for a, b in zip(values, values[1:]))
    print("✅ -log 0.5 = 0.6931, loss decreases as y_ENS[y] grows")


def test_distill_loss():
    """Test the embedding distillation sum"""
    print("📉 Testing distill_loss...")
    e = tc.Tensor([[0.6, 0.8]], dtype=np.float64)
    assert abs(distill_loss(e, [e.data, e.data]).item()) < 1e-12
    orthogonal = distill_loss(tc.Tensor([1.0, 0.0], dtype=np.float64), [np.array([0.0, 1.0])])
    assert abs(orthogonal.item() - 0.5) < 1e-12
    opposite = distill_loss(e, [e.data, -e.data])
    assert abs(opposite.item() - 1.0) < 1e-12
    assert distill_loss(e, []).item() == 0.0
    rows = tc.Tensor([[1.0, 0.0], [0.6, 0.8]], dtype=np.float64)
    missing = distill_loss(rows, [np.array([[0.0, 1.0], [0.0, 0.0]])])
    assert abs(missing.item() - 0.5 / 2) < 1e-12
    expect_raises(ShapeError, distill_loss, e, [np.ones((1, 3)) / np.sqrt(3)])
    print("✅ distillation loss OK")


def test_gradient_check_mux_loss():
    """Test stacking-loss gradients through the meta network and v"""
    print("📐 Testing multiplexer loss gradients...")
    worst = 0.0
    for seed in SEEDS:
        mux = _float64_mux(400 + seed)
        rng = tc.Rng(500 + seed)
        x = tc.Tensor(rng.normal((3, 1, 6, 6)), dtype=np.float64)
        probs = rng.uniform((3, 3, 4), 0.05, 1.0)
        probs = probs / probs.sum(axis=-1, keepdims=True)
        labels = rng.integers(0, 4, size=3)

        def loss():
            m = meta_features(mux, x)
            w = tc.softmax(_stacking_logits(m, mux.v, mux.normalized_costs))
            return mux_loss(tc.weighted_mix(w, tc.constant(probs, like=w)), labels)

        worst = max(worst, tc.gradient_check(loss, mux.params))
    assert worst <= 1e-3, f"max relative error {worst:.3e}"
    print(f"✅ max relative error over {len(SEEDS)} instances: {worst:.2e}")


def test_gradient_check_distill_loss():
    """Test distillation gradients through the meta network and bridge"""
    print("📐 Testing distillation gradients...")
    worst = 0.0
    for seed in SEEDS:
        mux = _float64_mux(600 + seed)
        rng = tc.Rng(700 + seed)
        x = tc.Tensor(rng.normal((3, 1, 6, 6)), dtype=np.float64)
        embeddings = [unit_rows((3, 4), rng) for _ in range(3)]

        def loss():
            return distill_loss(distill_features(mux, meta_features(mux, x)), embeddings)

        worst = max(worst, tc.gradient_check(loss, mux.params))
    assert worst <= 1e-3, f"max relative error {worst:.3e}"
    print(f"✅ max relative error over {len(SEEDS)} instances: {worst:.2e}")


def _synthetic_outputs(rng, batch, num_classes=4):
    """Model 0 always right, model 1 always wrong"""
    labels = rng.integers(0, num_classes, size=batch)
    probs = np.zeros((batch, 2, num_classes))
    probs[np.arange(batch), 0, labels] = 1.0
    probs[np.arange(batch), 1, (labels + 1) % num_classes] = 1.0
    embeddings = [unit_rows((batch, 4), rng) for _ in range(2)]
    return labels, probs, embeddings


def test_train_step_alpha_and_lambda():
    """Test alpha = 0 and lambda_distill = 0"""
    print("🔁 Testing mux_train_step_on_outputs...")
    rng = tc.Rng(11)
    mux = MuxNet((1, 6, 6), [{"type": "conv", "filters": 2, "kernel": 3}, {"type": "relu"}], 4, [1.0, 1.0], 4,
                 rng=tc.Rng(12))
    inputs = rng.normal((8, 1, 6, 6))
    labels, probs, embeddings = _synthetic_outputs(rng, 8)

    before = [p.data.copy() for p in mux.params]
    result = mux_train_step_on_outputs(mux, inputs, probs, embeddings, labels, 0.0)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, mux.params))
    assert result.distill_loss > 0 and abs(result.loss - result.mux_loss - result.distill_loss) < 1e-5

    bridge = mux.bridge.data.copy()
    pure = mux_train_step_on_outputs(mux, inputs, probs, embeddings, labels, 0.1, lambda_distill=0.0)
    assert pure.distill_loss == 0.0 and abs(pure.loss - pure.mux_loss) < 1e-12
    assert np.array_equal(mux.bridge.data, bridge)
    assert not np.array_equal(mux.v.data, before[-2])
    expect_raises(ShapeError, mux_train_step_on_outputs, mux, inputs[:0], probs[:0], [], labels[:0], 0.1)
    print("✅ alpha = 0 freezes the multiplexer; lambda = 0 leaves the bridge alone")


def test_learns_the_reliable_model():
    """Test that a trained multiplexer prefers an always-right model over an always-wrong one"""
    print("🎯 Testing multiplexer training on a reliable/broken pair...")
    rng = tc.Rng(13)
    mux = MuxNet((1, 6, 6), [{"type": "conv", "filters": 2, "kernel": 3}, {"type": "relu"}], 4, [1.0, 1.0], 4,
                 rng=tc.Rng(14))
    for _ in range(200):
        labels, probs, embeddings = _synthetic_outputs(rng, 32)
        mux_train_step_on_outputs(mux, rng.normal((32, 1, 6, 6)), probs, embeddings, labels, 0.1,
                                  lambda_distill=0.0)
    held_out = mux_forward(mux, tc.Tensor(rng.normal((500, 1, 6, 6)))).weights
    mean_reliable = float(held_out[:, 0].mean())
    assert mean_reliable > 0.9, f"mean weight of the reliable model {mean_reliable:.3f}"
    print(f"✅ mean weight of the reliable model: {mean_reliable:.3f}")


def test_zoo_stays_frozen():
    """Test that a multiplexer step leaves every classifier untouched"""
    print("🧊 Testing frozen zoo...")
    zoo = build_zoo(DEFAULTS["zoo.models"], INPUT_SHAPE, 10, 8, tc.Rng(15))
    mux = MuxNet(INPUT_SHAPE, DEFAULTS["mux.layers"], 8, [c.flops for c in zoo], 8, rng=tc.Rng(16),
                 model_ids=[c.id for c in zoo])
    before = [p.data.copy() for c in zoo for p in c.params]
    rng = tc.Rng(17)
    batch = (rng.normal((16,) + INPUT_SHAPE).astype(np.float32), rng.integers(0, 10, size=16))
    result = mux_train_step(mux, zoo, batch, 0.05)
    after = [p.data for c in zoo for p in c.params]
    assert all(np.array_equal(a, b) for a, b in zip(before, after))
    assert result.mean_weights.shape == (3,) and abs(result.mean_weights.sum() - 1.0) < 1e-5
    print("✅ classifier parameters unchanged")


def test_train_step_lowers_loss():
    """Test that 50 steps on one planted batch lower the multiplexer objective"""
    print("📉 Testing multiplexer training progress...")
    dataset, _ = generate_planted(spec_from_config(RunConfig(), 0), 32, seed=19)
    zoo = build_zoo(DEFAULTS["zoo.models"], INPUT_SHAPE, 10, DEFAULTS["zoo.shared_dim"], tc.Rng(20))
    mux = _default_mux(21, costs=[c.flops for c in zoo])
    batch = (dataset.inputs, dataset.labels)
    first = mux_train_step(mux, zoo, batch, 1e-3)
    for _ in range(49):
        mux_train_step(mux, zoo, batch, 1e-3)
    last = mux_train_step(mux, zoo, batch, 0.0)
    print(f"📊 L {first.loss:.5f} -> {last.loss:.5f}")
    assert last.loss < first.loss
    print("✅ the objective fell over 50 steps")


def test_mux_flops_and_checkpoint():
    """Test inference FLOPs and the MUXC round trip"""
    print("💾 Testing multiplexer FLOPs and checkpoints...")
    mux = _default_mux(18)
    # conv s2 -> 4x7x7, conv s2 -> 4x3x3, conv -> 8x1x1, conv 1x1 -> 16x1x1 (each with relu),
    # dense 16 -> 16, stacking 3 x 16
    assert mux_flops(mux) == 3528 + 196 + 2592 + 36 + 576 + 8 + 256 + 16 + 512 + 96
    assert mux_flops(mux) < ZOO_FLOPS[0]

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "mux.muxc")
        save_mux(path, mux, seed=18)
        loaded = load_mux(path)
        assert loaded.model_ids == mux.model_ids and np.allclose(loaded.costs, mux.costs)
        for p, q in zip(mux.params, loaded.params):
            assert p.name == q.name and np.array_equal(p.data, q.data)

        costed = build_zoo(DEFAULTS["zoo.models"][:1], INPUT_SHAPE, 10, 8, tc.Rng(0))[0]
        model_file = os.path.join(tmp, "small.muxc")
        save_model(model_file, costed)
        expect_raises(ConfigError, load_mux, model_file)
    print(f"✅ multiplexer FLOPs {mux_flops(mux)}; checkpoint round trip OK")


TESTS = [
    test_meta_features,
    test_mux_weights_examples,
    test_weights_are_probabilities,
    test_argmax_invariant_under_cost_scaling,
    test_ensemble_predict,
    test_mux_loss,
    test_distill_loss,
    test_gradient_check_mux_loss,
    test_gradient_check_distill_loss,
    test_train_step_alpha_and_lambda,
    test_learns_the_reliable_model,
    test_zoo_stays_frozen,
    test_train_step_lowers_loss,
    test_mux_flops_and_checkpoint,
]


if __name__ == "__main__":
    raise SystemExit(run_tests("⚖️  Multiplexer Test Suite", TESTS))
