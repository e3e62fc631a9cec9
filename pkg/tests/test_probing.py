import numpy as np
import pytest
from numpy.testing import assert_array_equal

from modelbridge.models import EncoderModel, TaskHead, conv_spec
from modelbridge.probing import (LinearProber, cross_val_f1_macro, fit_linear_prober, pseudo_labels,
                                 select_input_position, stratified_folds)


def planted_model(n_layers=4):
    """Layers 1-2 identity, layer 3 identity + relu, layer 4 identity.

    Inputs alternate +a/-a along time in the channel of their class, so the
    token mean is exactly zero until the relu at layer 3 turns it into a
    one-hot vector.
    """
    eye = {"weight": np.eye(2).reshape(1, 2, 2), "bias": np.zeros(2)}
    specs = [conv_spec(2, 2, 1, norm=False, activation="relu" if i == 2 else "none") for i in range(n_layers)]
    return EncoderModel(specs, (4, 2), "planted", params=[eye] * n_layers)


def planted_inputs(n=60, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    amp = rng.uniform(1.5, 2.5, n)
    x = np.zeros((n, 4, 2))
    x[np.arange(n), :, y] = amp[:, None] * np.array([2, -2, 2, -2]) / 2
    return x, y


def test_planted_layer_selected_with_perfect_score():
    model = planted_model()
    x, y = planted_inputs()
    before = [p.data.copy() for p in model.parameters()]
    result = select_input_position(model, x, y)
    assert result.m == 3
    assert result.scores[3] == 1.0
    assert result.scores[1] < 0.7 and result.scores[2] < 0.7
    # layer 4 ties with layer 3; the shallower one wins
    assert result.scores[4] == 1.0
    for b, p in zip(before, model.parameters()):
        assert b.tobytes() == p.data.tobytes()


def test_single_layer_model_selects_first():
    model = planted_model(1)
    x, y = planted_inputs()
    assert select_input_position(model, x, y).m == 1


def test_single_class_pseudo_labels_fall_back_to_last_layer():
    model = planted_model()
    x, _ = planted_inputs()
    result = select_input_position(model, x, np.zeros(len(x), dtype=int))
    assert result.m == 4 and result.status == "degenerate-labels"


def test_selection_is_deterministic():
    model = planted_model()
    x, y = planted_inputs(seed=3)
    y = y.copy()
    y[:5] = 1 - y[:5]
    a, b = select_input_position(model, x, y, seed=7), select_input_position(model, x, y, seed=7)
    assert a == b


def test_pseudo_labels_follow_teacher():
    model = planted_model()
    x, _ = planted_inputs()
    const = TaskHead(2, 3, weight=np.zeros((2, 3)), bias=np.array([5.0, 0.0, 0.0]))
    assert_array_equal(pseudo_labels(model, const, x), np.zeros(len(x)))
    head = TaskHead(2, 2, weight=np.eye(2) * 3, bias=np.zeros(2))
    _, y = planted_inputs()
    assert_array_equal(pseudo_labels(model, head, x, batch_size=7), y)


def test_prober_separable_training_accuracy():
    rng = np.random.default_rng(1)
    y = np.repeat([0, 1], 50)
    x = rng.standard_normal((100, 3)) + np.where(y[:, None] == 1, 4.0, -4.0) * np.array([1.0, 0.5, 0.0])
    prober = fit_linear_prober(x, y, l2=1e-4)
    assert (prober.predict(x) == y).all()


def test_prober_constant_labels():
    x = np.random.default_rng(2).standard_normal((20, 4))
    prober = fit_linear_prober(x, np.full(20, 2))
    assert (prober.predict(x) == 2).all()


def test_prober_heavy_regularization_limit():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((60, 4))
    y = np.arange(60) % 3
    prober = fit_linear_prober(x, y, l2=1e6)
    assert np.abs(prober.weight).max() < 1e-5 and np.abs(prober.bias).max() < 1e-5
    z = prober.decision(x)
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    assert np.abs(p - 1 / 3).max() < 1e-5
    zero = LinearProber(np.zeros((4, 3)), np.zeros(3), prober.mean, prober.scale, prober.classes)
    assert (zero.predict(x) == 0).all()


def test_prober_rejects_non_finite():
    with pytest.raises(ValueError):
        fit_linear_prober(np.array([[np.nan], [1.0]]), np.array([0, 1]))


def test_cross_val_separable_and_null():
    rng = np.random.default_rng(4)
    y = np.repeat([0, 1], 100)
    x = rng.standard_normal((200, 2)) + 6.0 * y[:, None]
    assert cross_val_f1_macro(x, y) == 1.0
    shuffled = rng.permutation(y)
    noise = rng.standard_normal((200, 2))
    assert abs(cross_val_f1_macro(noise, shuffled) - 0.5) < 0.1


def test_fold_partition():
    y = np.arange(10) % 2
    folds = stratified_folds(y, 5, seed=0)
    assert [len(f) for f in folds] == [2] * 5
    assert sorted(np.concatenate(folds).tolist()) == list(range(10))
    for f in folds:
        assert set(y[f]) == {0, 1}
    with pytest.raises(ValueError):
        stratified_folds(np.arange(3), 5)


def test_adding_perfect_feature_does_not_lower_score():
    rng = np.random.default_rng(5)
    y = np.arange(150) % 3
    x = rng.standard_normal((150, 4)) + 0.8 * y[:, None]
    before = cross_val_f1_macro(x, y)
    after = cross_val_f1_macro(np.column_stack([x, y * 10.0]), y)
    assert after >= before - 0.02
