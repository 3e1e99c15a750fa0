"""Numeric core tests.

Covers:
- forward evaluation against hand oracles (zero map, identity, ReLU gating)
- reverse-mode gradients against central finite differences
- tape lifecycle (finalize-before-backward, bit-identical replay)
- ReLU contractivity inequality, operator norms vs dense SVD
- Lipschitz product bound soundness on sampled pairs
- determinism of seeded construction
"""

import numpy as np
import pytest

from conftest import central_diff, identity_field, rel_error, zero_field

from odestab.errors import ContractError, DimensionError, NumericError, StateError
from odestab.netcore import (
    DenseLayer,
    GradientTape,
    VectorField,
    forward,
    lipschitz_upper_bound,
    make_mlp_field,
    operator_norm,
    relu_contractivity_check,
    tensor,
)


# ---------------------------------------------------------------------------
# Construction contracts
# ---------------------------------------------------------------------------


def test_tensor_rejects_non_finite():
    with pytest.raises(NumericError):
        tensor([1.0, np.nan])
    with pytest.raises(NumericError):
        tensor([np.inf])


def test_layer_shape_validation():
    with pytest.raises(DimensionError):
        DenseLayer(np.zeros((2, 2)), np.zeros(3))
    with pytest.raises(ContractError):
        DenseLayer(np.zeros((2, 2)), np.zeros(2), activation="tanh")


def test_field_requires_state_preserving_shape():
    with pytest.raises(DimensionError):
        VectorField([DenseLayer(np.zeros((3, 2)), np.zeros(3), "identity")])
    # composition mismatch between layers
    with pytest.raises(DimensionError):
        VectorField(
            [
                DenseLayer(np.zeros((3, 2)), np.zeros(3), "relu"),
                DenseLayer(np.zeros((2, 4)), np.zeros(2), "identity"),
            ]
        )


def test_forward_input_contracts():
    field = identity_field(2)
    with pytest.raises(DimensionError):
        forward(field, 0.0, np.zeros(3))
    with pytest.raises(NumericError):
        forward(field, 0.0, np.array([1.0, np.nan]))
    with pytest.raises(NumericError):
        forward(field, np.inf, np.zeros(2))


# ---------------------------------------------------------------------------
# Forward oracles
# ---------------------------------------------------------------------------


def test_forward_zero_map():
    field = zero_field(3)
    out = forward(field, 0.0, np.array([4.0, -1.0, 7.0]))
    assert np.array_equal(out, np.zeros(3))


def test_forward_identity():
    field = identity_field(2)
    out = forward(field, 0.5, np.array([1.0, 2.0]))
    assert np.array_equal(out, np.array([1.0, 2.0]))


def test_forward_relu_gating():
    # W=((2,0),(0,3)), b=0, y=(1,-1): Wy=(2,-3) -> relu -> (2, 0)
    layer = DenseLayer(np.array([[2.0, 0.0], [0.0, 3.0]]), np.zeros(2), "relu")
    out = layer.apply(np.array([1.0, -1.0]))
    assert np.array_equal(out, np.array([2.0, 0.0]))


def test_forward_time_append():
    weights = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, 0.0]])
    field = VectorField(
        [DenseLayer(weights, np.zeros(2), "identity")], time_mode="append_scalar"
    )
    out = forward(field, 0.5, np.array([1.0, 1.0]))
    assert np.allclose(out, [2.0, 1.0])


def test_forward_batched_matches_single(rng):
    field = make_mlp_field(rng, 3, 8)
    batch = rng.standard_normal((5, 3))
    stacked = forward(field, 0.0, batch)
    for i in range(5):
        assert np.allclose(stacked[i], forward(field, 0.0, batch[i]), rtol=1e-12, atol=0)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def _field_loss_and_grads(field, x, weight_vec):
    """Scalar loss w . f(0, x) with gradients from one recorded pass."""
    tape = GradientTape()
    xn = tape.watch_input(x)
    out = field.forward(0.0, xn, tape=tape)
    tape.finalize(out)
    input_grad, param_grads = tape.backward(weight_vec)
    return out.value, input_grad, param_grads, tape


def test_backward_zero_upstream(rng):
    field = make_mlp_field(rng, 2, 4)
    _, ig, pgs, _ = _field_loss_and_grads(field, rng.standard_normal(2), np.zeros(2))
    assert np.array_equal(ig, np.zeros(2))
    assert all(np.count_nonzero(g) == 0 for g in pgs)


def test_backward_single_linear_layer_input_grad(rng):
    weights = rng.standard_normal((2, 2))
    field = VectorField([DenseLayer(weights, np.zeros(2), "identity")])
    x = rng.standard_normal(2)
    u = rng.standard_normal(2)
    _, ig, _, _ = _field_loss_and_grads(field, x, u)
    assert np.allclose(ig, weights.T @ u, atol=1e-12)
    for i in range(2):
        def loss():
            return float(np.dot(u, field.forward(0.0, x)))

        assert rel_error(ig[i], central_diff(loss, x, i)) <= 1e-4


def test_backward_two_layer_composition(rng):
    w1 = rng.standard_normal((3, 2))
    w2 = rng.standard_normal((2, 3))
    field = VectorField(
        [
            DenseLayer(w1, np.zeros(3), "identity"),
            DenseLayer(w2, np.zeros(2), "identity"),
        ]
    )
    x = rng.standard_normal(2)
    u = rng.standard_normal(2)
    _, ig, _, _ = _field_loss_and_grads(field, x, u)
    assert np.allclose(ig, (w2 @ w1).T @ u, atol=1e-12)


def test_backward_relu_blocks_negative_coordinates():
    # One ReLU layer; coordinate with negative preactivation passes no gradient.
    layer = DenseLayer(np.eye(2), np.array([1.0, -1.0]), "relu")
    field = VectorField([layer])
    x = np.array([0.2, 0.1])  # preactivations (1.2, -0.9)
    out, ig, _, _ = _field_loss_and_grads(field, x, np.ones(2))
    assert np.array_equal(out, np.array([1.2, 0.0]))
    assert np.array_equal(ig, np.array([1.0, 0.0]))


def test_backward_requires_finalized_tape(rng):
    field = make_mlp_field(rng, 2, 4)
    tape = GradientTape()
    xn = tape.watch_input(rng.standard_normal(2))
    field.forward(0.0, xn, tape=tape)
    with pytest.raises(StateError):
        tape.backward(np.zeros(2))


def test_replay_is_bit_identical(rng):
    field = make_mlp_field(rng, 3, 16)
    tape = GradientTape()
    xn = tape.watch_input(rng.standard_normal(3))
    out = field.forward(0.0, xn, tape=tape)
    tape.finalize(out)
    assert np.array_equal(tape.replay(), out.value)


def test_gradient_fidelity_against_central_differences(rng):
    """Analytic gradients match central differences to rel. error <= 1e-4.

    Checked at >= 100 random coordinates where every ReLU preactivation sits
    at least 1e-3 away from the kink.
    """
    field = make_mlp_field(rng, 3, 12)
    checked = 0
    attempts = 0
    while checked < 100 and attempts < 500:
        attempts += 1
        x = rng.standard_normal(3)
        pre = field.layers[0].weights @ x + field.layers[0].bias
        if np.min(np.abs(pre)) < 1e-3:
            continue
        u = rng.standard_normal(3)
        _, ig, pgs, tape = _field_loss_and_grads(field, x, u)
        names = [name for name, _ in tape.parameter_items()]
        arrays = [arr for _, arr in tape.parameter_items()]
        pick = int(rng.integers(0, len(arrays)))
        arr, grad = arrays[pick], pgs[pick]
        flat_idx = int(rng.integers(0, arr.size))
        idx = np.unravel_index(flat_idx, arr.shape)

        def loss():
            return float(np.dot(u, field.forward(0.0, x)))

        fd = central_diff(loss, arr, idx)
        if abs(fd) < 1e-6 and abs(grad[idx]) < 1e-6:
            continue
        assert rel_error(grad[idx], fd) <= 1e-4, (names[pick], idx)
        checked += 1
    assert checked >= 100


# ---------------------------------------------------------------------------
# Contractivity and Lipschitz bounds
# ---------------------------------------------------------------------------


def test_contractivity_zero_perturbation():
    layer = DenseLayer(np.eye(2), np.zeros(2), "relu")
    lhs, rhs, holds = relu_contractivity_check(layer, np.ones(2), np.zeros(2))
    assert lhs == 0.0
    assert holds


def test_contractivity_identity_weights():
    layer = DenseLayer(np.eye(1), np.zeros(1), "relu")
    lhs, rhs, holds = relu_contractivity_check(layer, np.array([1.0]), np.array([0.5]))
    assert lhs <= 0.5 + 1e-15
    assert rhs == pytest.approx(0.5, rel=1e-6)
    assert holds


def test_contractivity_diag_norm(rng):
    # operator norm of diag(2, 3) is 3, so rhs = 0.3 at ||eps|| = 0.1
    layer = DenseLayer(np.array([[2.0, 0.0], [0.0, 3.0]]), np.zeros(2), "relu")
    for _ in range(50):
        x = rng.standard_normal(2)
        eps = rng.standard_normal(2)
        eps *= 0.1 / np.linalg.norm(eps)
        lhs, rhs, holds = relu_contractivity_check(layer, x, eps)
        assert rhs == pytest.approx(0.3, rel=1e-6)
        assert lhs <= 0.3 + 1e-12
        assert holds


def test_contractivity_rejects_identity_activation():
    layer = DenseLayer(np.eye(2), np.zeros(2), "identity")
    with pytest.raises(ContractError):
        relu_contractivity_check(layer, np.ones(2), np.ones(2))


def test_contractivity_property_1000_triples(rng):
    for _ in range(1000):
        rows, cols = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        layer = DenseLayer(
            rng.standard_normal((rows, cols)) * rng.uniform(0.1, 3.0),
            rng.standard_normal(rows),
            "relu",
        )
        x = rng.standard_normal(cols) * rng.uniform(0.1, 5.0)
        eps = rng.standard_normal(cols) * rng.uniform(1e-4, 1.0)
        _, _, holds = relu_contractivity_check(layer, x, eps)
        assert holds


def test_operator_norm_against_svd(rng):
    assert operator_norm(np.diag([2.0, 3.0])) == pytest.approx(3.0, rel=1e-6)
    assert operator_norm(np.zeros((3, 3))) == 0.0
    assert operator_norm(np.eye(4)) == pytest.approx(1.0, rel=1e-12)
    for _ in range(25):
        m = rng.standard_normal((int(rng.integers(1, 8)), int(rng.integers(1, 8))))
        top = np.linalg.svd(m, compute_uv=False)[0]
        assert operator_norm(m) == pytest.approx(top, rel=2e-6, abs=1e-9)


def test_lipschitz_identity_layers():
    field = VectorField(
        [
            DenseLayer(np.eye(2), np.zeros(2), "relu"),
            DenseLayer(np.eye(2), np.zeros(2), "identity"),
        ]
    )
    est = lipschitz_upper_bound(field)
    assert est.bound == pytest.approx(1.0, rel=1e-9)


def test_lipschitz_single_diag_layer():
    field = VectorField([DenseLayer(np.diag([2.0, 3.0]), np.zeros(2), "identity")])
    assert lipschitz_upper_bound(field).bound == pytest.approx(3.0, rel=1e-6)


def test_lipschitz_product_rule(rng):
    # layer norms 2 and 3 compose to K = 6
    q1 = np.linalg.qr(rng.standard_normal((2, 2)))[0]
    q2 = np.linalg.qr(rng.standard_normal((2, 2)))[0]
    field = VectorField(
        [
            DenseLayer(2.0 * q1, np.zeros(2), "relu"),
            DenseLayer(3.0 * q2, np.zeros(2), "identity"),
        ]
    )
    est = lipschitz_upper_bound(field)
    assert est.layer_norms[0] == pytest.approx(2.0, rel=1e-8)
    assert est.layer_norms[1] == pytest.approx(3.0, rel=1e-8)
    assert est.bound == pytest.approx(6.0, rel=1e-8)


def test_lipschitz_soundness_on_sampled_pairs(rng):
    field = make_mlp_field(rng, 3, 10)
    k = lipschitz_upper_bound(field).bound
    for _ in range(1000):
        y1 = rng.standard_normal(3) * rng.uniform(0.1, 4.0)
        y2 = rng.standard_normal(3) * rng.uniform(0.1, 4.0)
        lhs = np.linalg.norm(field.forward(0.0, y1) - field.forward(0.0, y2))
        assert lhs <= k * np.linalg.norm(y1 - y2) + 1e-12


def test_lipschitz_time_append_ignores_time_column(rng):
    field = make_mlp_field(rng, 2, 6, time_mode="append_scalar")
    est = lipschitz_upper_bound(field)
    sub_norm = operator_norm(field.layers[0].weights[:, :2])
    assert est.layer_norms[0] == pytest.approx(sub_norm, rel=1e-9)


def test_seeded_construction_is_deterministic():
    a = make_mlp_field(np.random.default_rng(7), 3, 8)
    b = make_mlp_field(np.random.default_rng(7), 3, 8)
    x = np.random.default_rng(0).standard_normal(3)
    assert np.array_equal(a.forward(0.0, x), b.forward(0.0, x))
