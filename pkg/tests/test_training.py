"""Training-stack tests.

Covers:
- cross-entropy oracles (uniform, saturated, two-logit softmax)
- Adam update oracles (zero gradient, first-step collapse, fixed point)
- training-loop contracts (zero epochs, monotone loss on separable data,
  deterministic shuffling)
- IDX ingestion (synthetic files, magic/truncation/count errors)
- synthetic dataset generators (moons on the unit arcs, XOR blobs)
- history CSV format
"""

import io
import math
import struct

import numpy as np
import pytest

from odestab.errors import ContractError, FormatError
from odestab.models import BlockSpec, build_classifier
from odestab.netcore import GradientTape
from odestab.training import (
    AdamConfig,
    AdamState,
    Dataset,
    SGDConfig,
    TrainConfig,
    adam_step,
    accuracy,
    cross_entropy,
    cross_entropy_node,
    history_to_csv,
    load_idx,
    make_two_moons,
    make_xor_blobs,
    train,
)


# ---------------------------------------------------------------------------
# Cross-entropy
# ---------------------------------------------------------------------------


def test_cross_entropy_uniform_logits():
    assert cross_entropy(np.zeros(10), 3) == pytest.approx(math.log(10.0), abs=1e-12)


def test_cross_entropy_saturated():
    assert cross_entropy(np.array([100.0, 0.0]), 0) <= 1e-12


def test_cross_entropy_two_logit_oracle():
    # softmax(1, 3)[0] = 0.11920...; loss = -ln(0.11920) = 2.1269...
    value = cross_entropy(np.array([1.0, 3.0]), 0)
    p0 = math.exp(1.0) / (math.exp(1.0) + math.exp(3.0))
    assert value == pytest.approx(-math.log(p0), abs=1e-12)
    assert value == pytest.approx(2.126928, abs=1e-6)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ContractError):
        cross_entropy(np.zeros(3), 3)
    with pytest.raises(ContractError):
        cross_entropy(np.zeros(3), -1)


def test_cross_entropy_node_matches_scalar(rng):
    logits = rng.standard_normal((6, 4))
    labels = rng.integers(0, 4, size=6)
    tape = GradientTape()
    node = tape.constant(logits)
    loss = cross_entropy_node(tape, node, labels, reduction="mean")
    expected = np.mean([cross_entropy(logits[i], int(labels[i])) for i in range(6)])
    assert float(loss.value) == pytest.approx(expected, rel=1e-12)


def test_cross_entropy_node_gradient(rng):
    from conftest import central_diff, rel_error

    logits = rng.standard_normal((4, 3))
    labels = rng.integers(0, 3, size=4)
    tape = GradientTape()
    node = tape.watch_input(logits)
    loss = cross_entropy_node(tape, node, labels, reduction="sum")
    tape.finalize(loss)
    grad, _ = tape.backward(1.0)

    for _ in range(10):
        i, j = int(rng.integers(0, 4)), int(rng.integers(0, 3))

        def total():
            return sum(cross_entropy(logits[r], int(labels[r])) for r in range(4))

        fd = central_diff(total, logits, (i, j))
        assert rel_error(grad[i, j], fd) <= 1e-4


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_keeps_params():
    params = [np.array([1.0, -2.0])]
    state = AdamState.for_params(params)
    adam_step(params, [np.zeros(2)], state, AdamConfig(lr=1e-3))
    assert np.array_equal(params[0], np.array([1.0, -2.0]))
    assert state.step == 1


def test_adam_first_step_is_signed_lr():
    # bias correction makes the first update collapse to -lr * sign(g)
    params = [np.array([0.0])]
    state = AdamState.for_params(params)
    adam_step(params, [np.array([1.0])], state, AdamConfig(lr=1e-3))
    assert params[0][0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_constant_gradient_fixed_point():
    # with constant g, |update| per step approaches lr
    params = [np.array([0.0])]
    state = AdamState.for_params(params)
    config = AdamConfig(lr=1e-3)
    prev = 0.0
    for _ in range(500):
        prev = params[0][0]
        adam_step(params, [np.array([2.5])], state, config)
    assert abs(params[0][0] - prev) == pytest.approx(1e-3, rel=1e-3)


def test_adam_shape_mismatch():
    params = [np.zeros(2)]
    state = AdamState.for_params(params)
    with pytest.raises(ContractError):
        adam_step(params, [np.zeros(3)], state, AdamConfig())


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def test_dataset_validation():
    with pytest.raises(FormatError):
        Dataset(np.zeros((3, 2)), np.zeros(2, dtype=int), (0.0, 1.0))
    with pytest.raises(ContractError):
        Dataset(np.zeros((2, 2)), np.zeros(2, dtype=int), (1.0, 0.0))
    with pytest.raises(ContractError):
        Dataset(np.full((2, 2), 5.0), np.zeros(2, dtype=int), (0.0, 1.0))


def test_two_moons_zero_noise_on_unit_arcs():
    data = make_two_moons(200, 0.0, seed=0)
    for x, label in zip(data.inputs, data.labels):
        if label == 0:
            assert np.hypot(x[0], x[1]) == pytest.approx(1.0, abs=1e-12)
            assert x[1] >= -1e-12
        else:
            assert np.hypot(x[0] - 1.0, x[1] - 0.5) == pytest.approx(1.0, abs=1e-12)
            assert x[1] <= 0.5 + 1e-12


def test_two_moons_balanced_and_even():
    data = make_two_moons(1000, 0.1, seed=1)
    assert np.sum(data.labels == 0) == 500
    assert np.sum(data.labels == 1) == 500
    with pytest.raises(ContractError):
        make_two_moons(999, 0.1, seed=1)


def test_two_moons_seed_reproducible():
    a = make_two_moons(400, 0.2, seed=9)
    b = make_two_moons(400, 0.2, seed=9)
    assert np.array_equal(a.inputs, b.inputs)
    assert np.array_equal(a.labels, b.labels)
    c = make_two_moons(400, 0.2, seed=10)
    assert not np.array_equal(a.inputs, c.inputs)


def test_xor_blobs_balanced():
    data = make_xor_blobs(800, 0.3, seed=2)
    assert np.sum(data.labels == 0) == 400
    assert np.sum(data.labels == 1) == 400
    with pytest.raises(ContractError):
        make_xor_blobs(801, 0.3, seed=2)


def test_xor_blobs_linear_baseline_is_chance(rng):
    """No halfplane separates XOR blobs much better than chance."""
    data = make_xor_blobs(2000, 0.3, seed=5)
    best = 0.0
    for _ in range(200):
        w = rng.standard_normal(2)
        b = rng.normal(0, 0.5)
        pred = (data.inputs @ w + b > 0).astype(int)
        acc = max(np.mean(pred == data.labels), np.mean(1 - pred == data.labels))
        best = max(best, acc)
    assert best <= 0.6


# ---------------------------------------------------------------------------
# IDX ingestion
# ---------------------------------------------------------------------------


def _write_idx(tmp_path, count=5, rows=2, cols=3, image_magic=0x803, label_magic=0x801,
               label_count=None, truncate_images=False):
    label_count = count if label_count is None else label_count
    pixels = np.arange(count * rows * cols, dtype=np.uint8)
    images = struct.pack(">IIII", image_magic, count, rows, cols) + pixels.tobytes()
    if truncate_images:
        images = images[:-4]
    labels = struct.pack(">II", label_magic, label_count) + bytes(
        range(label_count)
    )
    ipath = tmp_path / "images.idx"
    lpath = tmp_path / "labels.idx"
    ipath.write_bytes(images)
    lpath.write_bytes(labels)
    return ipath, lpath


def test_load_idx_round_trip(tmp_path):
    ipath, lpath = _write_idx(tmp_path)
    data = load_idx(ipath, lpath, scale_to=(0.0, 1.0))
    assert len(data) == 5
    assert data.inputs.shape == (5, 6)
    # independent byte-level check: pixel k of image i is 6i + k, scaled /255
    assert data.inputs[2, 4] == pytest.approx((2 * 6 + 4) / 255.0, abs=1e-15)
    assert list(data.labels) == [0, 1, 2, 3, 4]
    assert data.value_range == (0.0, 1.0)


def test_load_idx_limit(tmp_path):
    ipath, lpath = _write_idx(tmp_path)
    assert len(load_idx(ipath, lpath, limit=0)) == 0
    assert len(load_idx(ipath, lpath, limit=3)) == 3
    assert len(load_idx(ipath, lpath, limit=100)) == 5


def test_load_idx_scaling(tmp_path):
    ipath, lpath = _write_idx(tmp_path)
    data = load_idx(ipath, lpath, scale_to=(-1.0, 1.0))
    assert data.inputs.min() >= -1.0 and data.inputs.max() <= 1.0
    assert data.inputs[0, 0] == pytest.approx(-1.0, abs=1e-15)


def test_load_idx_bad_magic(tmp_path):
    ipath, lpath = _write_idx(tmp_path, image_magic=0x1234)
    with pytest.raises(FormatError):
        load_idx(ipath, lpath)
    ipath, lpath = _write_idx(tmp_path, label_magic=0x1234)
    with pytest.raises(FormatError):
        load_idx(ipath, lpath)


def test_load_idx_truncated(tmp_path):
    ipath, lpath = _write_idx(tmp_path, truncate_images=True)
    with pytest.raises(OSError):
        load_idx(ipath, lpath)


def test_load_idx_count_mismatch(tmp_path):
    ipath, lpath = _write_idx(tmp_path, label_count=4)
    with pytest.raises(FormatError):
        load_idx(ipath, lpath)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _separable_blobs(n=200, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 0.3, size=(n // 2, 2)) + np.array([-2.0, 0.0])
    b = rng.normal(0, 0.3, size=(n // 2, 2)) + np.array([2.0, 0.0])
    inputs = np.concatenate([a, b])
    labels = np.concatenate([np.zeros(n // 2, dtype=int), np.ones(n // 2, dtype=int)])
    lo, hi = float(inputs.min()), float(inputs.max())
    return Dataset(inputs, labels, (lo, hi))


def test_train_zero_epochs_is_noop(rng):
    model = build_classifier(2, 2, [BlockSpec(kind="residual", width=4)], rng)
    before = [arr.copy() for _, arr in model.parameters()]
    data = _separable_blobs()
    _, history = train(model, data, TrainConfig(epochs=0))
    assert history == []
    for (_, arr), prev in zip(model.parameters(), before):
        assert np.array_equal(arr, prev)


def test_train_loss_decreases_on_separable_data(rng):
    model = build_classifier(
        2, 2, [BlockSpec(kind="residual", depth=2, h=1.0, width=8)], rng
    )
    data = _separable_blobs()
    cfg = TrainConfig(optimizer=AdamConfig(lr=1e-2), epochs=8, seed=0)
    _, history = train(model, data, cfg)
    losses = [h.loss for h in history]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert history[-1].train_accuracy >= 0.99


def test_train_is_deterministic(rng):
    data = _separable_blobs()

    def run():
        model = build_classifier(
            2, 2, [BlockSpec(kind="residual", depth=2, h=1.0, width=4)],
            np.random.default_rng(5),
        )
        _, history = train(model, data, TrainConfig(epochs=3, seed=11))
        return model, history

    m1, h1 = run()
    m2, h2 = run()
    for (_, a), (_, b) in zip(m1.parameters(), m2.parameters()):
        assert np.array_equal(a, b)
    assert [s.loss for s in h1] == [s.loss for s in h2]


def test_train_lr_halving_schedule(rng):
    model = build_classifier(2, 2, [BlockSpec(kind="residual", width=4)], rng)
    data = _separable_blobs(n=64)
    cfg = TrainConfig(optimizer=AdamConfig(lr=8e-3), epochs=6, lr_halving_period=2, seed=0)
    _, history = train(model, data, cfg)
    assert [s.lr for s in history] == [8e-3, 8e-3, 4e-3, 4e-3, 2e-3, 2e-3]


def test_train_sgd_path(rng):
    model = build_classifier(2, 2, [BlockSpec(kind="residual", width=4)], rng)
    data = _separable_blobs(n=64)
    _, history = train(model, data, TrainConfig(optimizer=SGDConfig(lr=1e-2), epochs=3))
    assert len(history) == 3


def test_history_csv_format():
    from odestab.training import EpochStats

    history = [
        EpochStats(0, 1e-3, 0.5, 0.8, 0.75),
        EpochStats(1, 1e-3, 0.4, 0.9, None),
    ]
    buf = io.StringIO()
    history_to_csv(history, buf)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0] == "epoch,lr,loss,train_acc,test_acc"
    assert lines[1].split(",")[4] == "0.75"
    assert lines[2].split(",")[4] == ""
