import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clnet.classifier import (Mlp, Sgd, TrainConfig, check_labels, evaluate_accuracy, log_softmax, loss_and_grads,
                              mlp_forward, mlp_train_sgd, predict_classes, read_mlp, write_mlp)
from clnet.errors import FormatError

from helpers import central_difference, rel_error


def test_zero_model_scores_are_uniform():
    out = mlp_forward(Mlp.zeros(3, 4, 5), np.ones(3))
    np.testing.assert_allclose(out, np.full(5, -np.log(5)), rtol=1e-14)


def test_scores_form_a_distribution():
    m = Mlp.init(6, 5, 4, seed=1)
    x = np.random.default_rng(0).normal(size=(10, 6))
    np.testing.assert_allclose(np.exp(mlp_forward(m, x)).sum(axis=1), 1.0, atol=1e-12)


def test_hand_computed_forward_pass():
    m = Mlp(np.array([[1.0, 0.0], [0.5, -1.0]]), np.array([0.0, 0.25]),
            np.array([[2.0, 0.0], [0.0, -1.0]]), np.array([0.1, 0.0]))
    x = np.array([0.3, 0.2])
    h = [np.tanh(0.3), np.tanh(0.15 - 0.2 + 0.25)]
    z = [2.0 * h[0] + 0.1, -h[1]]
    lse = np.log(np.exp(z[0]) + np.exp(z[1]))
    np.testing.assert_allclose(mlp_forward(m, x), [z[0] - lse, z[1] - lse], atol=1e-12)


def test_log_softmax_is_shift_invariant_and_stable():
    z = np.array([1000.0, 1001.0, 999.0])
    np.testing.assert_allclose(log_softmax(z), log_softmax(z - 1000.0), atol=1e-12)


def test_input_size_is_checked():
    with pytest.raises(ValueError):
        mlp_forward(Mlp.zeros(3, 2, 2), np.ones(4))


def test_init_bounds_and_determinism():
    m = Mlp.init(100, 20, 3, seed=5)
    assert np.abs(m.w1).max() <= 0.1 and np.abs(m.w2).max() <= 20 ** -0.5
    assert np.all(m.b1 == 0) and np.all(m.b2 == 0)
    assert m.same_as(Mlp.init(100, 20, 3, seed=5))


@pytest.mark.parametrize("seed", range(3))
def test_parameter_and_input_gradients(seed):
    rng = np.random.default_rng(seed)
    m = Mlp.init(5, 4, 3, seed=seed)
    for p in m.params():
        p += rng.normal(scale=0.3, size=p.shape)
    x = rng.normal(size=(6, 5))
    y = rng.integers(0, 3, 6)
    _, grads, dx = loss_and_grads(m, x, y)
    f = lambda: loss_and_grads(m, x, y)[0]  # noqa: E731
    for p, g in zip(m.params(), grads):
        assert rel_error(g, central_difference(f, p)) < 1e-4
    assert rel_error(dx, central_difference(f, x)) < 1e-4


def test_small_step_full_batch_descent_is_monotone():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 4))
    y = (x[:, 0] > 0).astype(int)
    m = Mlp.init(4, 8, 2, seed=0)
    opt = Sgd(m.params(), 1e-3, 0.0)
    losses = []
    for _ in range(10):
        loss, grads, _ = loss_and_grads(m, x, y)
        losses.append(loss)
        opt.step(grads)
    assert np.all(np.diff(losses) <= 0)


def test_single_class_dataset():
    x = np.random.default_rng(0).normal(size=(500, 3))
    m, hist = mlp_train_sgd(Mlp.init(3, 4, 3, seed=0), x, np.full(500, 2), TrainConfig(epochs=1))
    assert np.all(predict_classes(m, x) == 2)
    assert len(hist.loss) == 1


def test_xor_is_learned():
    x = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    y = np.array([0, 1, 1, 0])
    cfg = TrainConfig(learning_rate=0.1, epochs=2000, batch_size=4, early_stop_accuracy=1.0)
    m, hist = mlp_train_sgd(Mlp.init(2, 8, 2, seed=0), x, y, cfg)
    assert evaluate_accuracy(m, x, y) == 1.0
    assert len(hist.loss) < 2000


def test_separated_blobs_generalize():
    rng = np.random.default_rng(4)
    centres = np.array([[-3.0, 0.0], [3.0, 0.0]])
    y = rng.integers(0, 2, 400)
    x = centres[y] + rng.normal(size=(400, 2))
    m, _ = mlp_train_sgd(Mlp.init(2, 8, 2, seed=1), x[:200], y[:200], TrainConfig(epochs=20))
    assert evaluate_accuracy(m, x[200:], y[200:]) >= 0.99


def test_accuracy_counting():
    m = Mlp.zeros(2, 2, 3)
    x = np.zeros((5, 2))
    y = np.array([0, 0, 1, 2, 0])
    # uniform scores: every prediction is class 0
    assert evaluate_accuracy(m, x, y) == 0.6
    with pytest.raises(ValueError):
        evaluate_accuracy(m, np.zeros((0, 2)), np.zeros(0, dtype=int))


def test_permuted_labels_accuracy_matches_counting():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(30, 3))
    m = Mlp.init(3, 5, 3, seed=2)
    pred = predict_classes(m, x)
    shifted = (pred + 1) % 3
    assert evaluate_accuracy(m, x, pred) == 1.0
    assert evaluate_accuracy(m, x, shifted) == 0.0
    mixed = np.where(np.arange(30) < 12, pred, shifted)
    assert evaluate_accuracy(m, x, mixed) == 12 / 30


def test_training_is_deterministic_and_leaves_input_untouched():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(50, 3))
    y = rng.integers(0, 2, 50)
    m0 = Mlp.init(3, 4, 2, seed=0)
    before = m0.copy()
    a, _ = mlp_train_sgd(m0, x, y, TrainConfig(epochs=3))
    b, _ = mlp_train_sgd(m0, x, y, TrainConfig(epochs=3))
    assert a.same_as(b) and m0.same_as(before)


def test_early_stop_and_callback():
    x = np.array([[1.0], [-1.0]])
    y = np.array([0, 1])
    seen = []
    _, hist = mlp_train_sgd(Mlp.init(1, 4, 2, seed=0), x, y,
                            TrainConfig(learning_rate=0.5, epochs=500, early_stop_accuracy=1.0),
                            on_epoch=lambda e, m, loss: seen.append(e))
    assert hist.train_accuracy[-1] == 1.0
    assert seen == list(range(len(hist.loss))) and len(seen) < 500


def test_config_and_label_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        check_labels(np.array([0, 3]), 3)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 1000))
def test_mlp_round_trip(i, h, o, seed):
    m = Mlp.init(i, h, o, seed)
    buf = io.BytesIO()
    write_mlp(buf, m)
    buf.seek(0)
    assert read_mlp(buf).same_as(m)


def test_mlp_format_errors():
    buf = io.BytesIO()
    write_mlp(buf, Mlp.init(2, 2, 2))
    raw = buf.getvalue()
    with pytest.raises(FormatError):
        read_mlp(io.BytesIO(b"ABCD" + raw[4:]))
    with pytest.raises(FormatError):
        read_mlp(io.BytesIO(raw[:-1]))


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 10.0), st.integers(0, 1000))
def test_predictions_ignore_positive_output_rescaling(alpha, seed):
    m = Mlp.init(4, 5, 3, seed)
    x = np.random.default_rng(seed).normal(size=(8, 4))
    scaled = Mlp(m.w1, m.b1, m.w2 * alpha, m.b2 * alpha)
    np.testing.assert_array_equal(predict_classes(m, x), predict_classes(scaled, x))
