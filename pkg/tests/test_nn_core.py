import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mapattack import nn_core
from mapattack.errors import DomainError, ParseError, ShapeError, UnsupportedVersionError
from mapattack.nn_core import Affine, LabeledBatch, Model, Relu

from oracles import central_diff, five_point_diff, preactivation_margin, random_model, ref_logits, ref_loss, rel_err


def hand_model():
    w1 = np.array([[1.0, -1.0], [2.0, 0.0], [0.0, 1.0]])
    w2 = np.array([[1.0, 0.0, -1.0], [0.5, 2.0, 1.0]])
    return nn_core.dense_model([w1, w2], [np.array([0.5, -3.0]), np.array([0.0, 0.0, 1.0])])


def test_forward_identity_layer():
    model = Model((Affine(np.eye(3), np.zeros(3)),))
    np.testing.assert_array_equal(nn_core.forward(model, [[1.0, 2.0, 3.0]]), [[1.0, 2.0, 3.0]])


def test_forward_empty_batch():
    out = nn_core.forward(hand_model(), np.zeros((0, 3)))
    assert out.shape == (0, 3)


def test_forward_hand_computed_chain():
    # hidden pre-activations (5.5, -1) -> relu (5.5, 0) -> logits (5.5, 0, -4.5)
    out = nn_core.forward(hand_model(), [[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(out, [[5.5, 0.0, -4.5]])


def test_forward_matches_loop_oracle(rng):
    model = random_model(rng)
    x = rng.uniform(size=(5, model.input_dim))
    expected = np.array([ref_logits(model, row) for row in x])
    np.testing.assert_allclose(nn_core.forward(model, x), expected, rtol=1e-12, atol=1e-12)


def test_forward_dimension_mismatch():
    with pytest.raises(ShapeError):
        nn_core.forward(hand_model(), np.zeros((2, 4)))


def test_model_rejects_non_chaining_layers():
    with pytest.raises(ShapeError):
        Model((Affine(np.zeros((3, 2)), np.zeros(2)), Relu(), Affine(np.zeros((4, 2)), np.zeros(2))))


def test_model_parameters_are_read_only():
    model = hand_model()
    with pytest.raises(ValueError):
        model.layers[0].weight[0, 0] = 7.0


def test_cross_entropy_uniform():
    loss, grad = nn_core.cross_entropy([[0.0, 0.0]], [0])
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    np.testing.assert_allclose(grad, [[-0.5, 0.5]], atol=1e-15)


def test_cross_entropy_saturated_no_overflow():
    with np.errstate(over="raise", invalid="raise"):
        loss, grad = nn_core.cross_entropy([[1000.0, 0.0]], [0])
    assert 0.0 <= loss < 1e-300 or loss == 0.0
    assert np.all(np.isfinite(grad))


def test_cross_entropy_label_out_of_range():
    with pytest.raises(DomainError):
        nn_core.cross_entropy([[0.0, 0.0]], [2])


def test_cross_entropy_gradient_finite_differences(rng):
    for _ in range(20):
        n, c = rng.integers(1, 6), rng.integers(2, 8)
        logits = rng.standard_normal((n, c)) * 3
        labels = rng.integers(0, c, n)
        _, grad = nn_core.cross_entropy(logits, labels)
        fd = five_point_diff(lambda z: nn_core.cross_entropy(z, labels)[0], logits)
        assert np.max(rel_err(grad, fd, floor=1e-6)) <= 1e-6


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=2, max_size=8), st.integers(0, 7))
def test_cross_entropy_non_negative_and_stable(values, label):
    label %= len(values)
    loss, grad = nn_core.cross_entropy([values], [label])
    assert loss >= 0.0
    assert math.isfinite(loss) and np.all(np.isfinite(grad))
    assert np.all(np.isfinite(nn_core.softmax(np.array([values]))))


def test_loss_vanishes_only_toward_one_hot():
    loss, _ = nn_core.cross_entropy([[0.0, 1e4, 0.0]], [1])
    assert loss == 0.0
    assert nn_core.cross_entropy([[0.0, 10.0, 0.0]], [1])[0] > 0.0


def test_grad_input_zero_weights():
    model = Model((Affine(np.zeros((4, 3)), np.array([0.1, 0.2, 0.3])),))
    batch = LabeledBatch(np.ones((2, 4)), [0, 2])
    np.testing.assert_array_equal(nn_core.grad_input(model, batch), np.zeros((2, 4)))


def test_grad_input_linear_case(rng):
    w = rng.standard_normal((5, 3))
    b = rng.standard_normal(3)
    model = Model((Affine(w, b),))
    x = rng.uniform(size=(4, 5))
    labels = np.array([0, 1, 2, 1])
    z = x @ w + b
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    expected = (p - np.eye(3)[labels]) @ w.T / 4
    np.testing.assert_allclose(nn_core.grad_input(model, LabeledBatch(x, labels)), expected, rtol=1e-12)


def test_grad_input_target_overrides_labels(rng):
    model = random_model(rng)
    x = rng.uniform(size=(3, model.input_dim))
    g_t = nn_core.grad_input(model, LabeledBatch(x, [0, 1, 0]), target=2)
    g_l = nn_core.grad_input(model, LabeledBatch(x, [2, 2, 2]))
    np.testing.assert_array_equal(g_t, g_l)


def test_grad_params_zero_weight_bias_gradient():
    model = Model((Affine(np.zeros((2, 4)), np.zeros(4)),))
    labels = np.array([0, 3])
    (dw, db), = nn_core.grad_params(model, LabeledBatch(np.ones((2, 2)), labels))
    expected = (np.full((2, 4), 0.25) - np.eye(4)[labels]).mean(axis=0)
    np.testing.assert_allclose(db, expected, atol=1e-15)


def test_grad_params_mean_invariance(rng):
    model = random_model(rng)
    x = rng.uniform(size=(3, model.input_dim))
    y = rng.integers(0, model.class_count, 3)
    single = nn_core.grad_params(model, LabeledBatch(x, y))
    double = nn_core.grad_params(model, LabeledBatch(np.vstack([x, x]), np.concatenate([y, y])))
    for a, b in zip(single, double):
        if a is not None:
            np.testing.assert_allclose(a[0], b[0], rtol=1e-12, atol=1e-15)
            np.testing.assert_allclose(a[1], b[1], rtol=1e-12, atol=1e-15)


def test_gradients_small_model_finite_differences(rng):
    model = random_model(rng, max_dim=6)
    x = rng.uniform(size=(3, model.input_dim))
    y = rng.integers(0, model.class_count, 3)
    assert preactivation_margin(model, x) > 1e-3
    gx = nn_core.grad_input(model, LabeledBatch(x, y))
    fd = central_diff(lambda z: ref_loss(model, z, y), x)
    assert np.max(rel_err(gx, fd)) <= 1e-5


def test_sgd_step_arithmetic():
    model = Model((Affine([[1.0]], [0.0]),))
    new = nn_core.sgd_step(model, ((np.array([[0.5]]), np.array([0.0])),), 0.1)
    assert new.layers[0].weight[0, 0] == pytest.approx(0.95, abs=1e-15)
    assert model.layers[0].weight[0, 0] == 1.0


def test_sgd_step_zero_lr_keeps_model(rng):
    model = random_model(rng)
    batch = LabeledBatch(rng.uniform(size=(2, model.input_dim)), [0, 1])
    assert nn_core.sgd_step(model, nn_core.grad_params(model, batch), 0.0).params_equal(model)


def test_sgd_step_shape_mismatch():
    model = Model((Affine([[1.0]], [0.0]),))
    with pytest.raises(ShapeError):
        nn_core.sgd_step(model, ((np.zeros((2, 1)), np.zeros(1)),), 0.1)


def test_sgd_descends_on_convex_loss(rng):
    # softmax regression is convex in its parameters; small full-batch steps never increase the loss
    model = Model((Affine(rng.standard_normal((6, 3)), np.zeros(3)),))
    batch = LabeledBatch(rng.uniform(size=(30, 6)), rng.integers(0, 3, 30))
    losses = []
    for _ in range(50):
        losses.append(nn_core.loss(model, batch))
        model = nn_core.sgd_step(model, nn_core.grad_params(model, batch), 0.1)
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_predict():
    logits_model = Model((Affine(np.zeros((1, 2)), [0.1, 0.9]),))
    assert nn_core.predict(logits_model, [0.0]) == 1
    tie = Model((Affine(np.zeros((1, 2)), [0.5, 0.5]),))
    assert nn_core.predict(tie, [0.0]) == 0
    ident = Model((Affine(np.eye(5), np.zeros(5)),))
    assert nn_core.predict(ident, np.eye(5)[3]) == 3


def test_model_file_round_trip(rng, tmp_path):
    model = random_model(rng)
    path = tmp_path / "m.txt"
    nn_core.save_model(model, path)
    loaded = nn_core.load_model(path)
    assert loaded.params_equal(model)
    assert [type(l) for l in loaded.layers] == [type(l) for l in model.layers]


def test_model_file_truncated(rng):
    text = nn_core.dumps_model(random_model(rng))
    lines = text.splitlines()
    with pytest.raises(ParseError) as info:
        nn_core.loads_model("\n".join(lines[: len(lines) // 2]))
    assert info.value.lineno >= 1
    assert "line" in str(info.value)


def test_model_file_version_mismatch(rng):
    text = nn_core.dumps_model(random_model(rng)).replace("v1", "v9", 1)
    with pytest.raises(UnsupportedVersionError):
        nn_core.loads_model(text)


def test_model_file_garbage_value_names_line(rng):
    lines = nn_core.dumps_model(random_model(rng)).splitlines()
    lines[2] = "abc " + lines[2]
    with pytest.raises(ParseError) as info:
        nn_core.loads_model("\n".join(lines))
    assert info.value.lineno == 3


def test_determinism_and_thread_safety(rng):
    model = random_model(rng)
    batch = LabeledBatch(rng.uniform(size=(8, model.input_dim)), rng.integers(0, model.class_count, 8))
    reference = nn_core.grad_input(model, batch).tobytes()
    results = []

    def work():
        results.append(nn_core.grad_input(model, batch).tobytes())

    threads = [threading.Thread(target=work) for _ in range(8)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert results == [reference] * 8
