import math

import numpy as np
import pytest

from gradcheck import max_grad_error
from loanrobust.nn import DivergenceError, MlpModel, TrainConfig, accuracy, predict, train


def _zero_model(d=4, c=7):
    m = MlpModel.init(d, c, seed=0)
    for p in m.params:
        p[...] = 0.0
    return m


def _tiny():
    """2 -> 2 -> 2 network with hand-picked weights."""
    return MlpModel([
        np.array([[1.0, -1.0], [2.0, 0.5]]), np.array([0.1, -0.2]),
        np.array([[1.0, 0.0], [-1.0, 2.0]]), np.array([0.0, 0.3]),
    ], dropout=0.0)


def test_architecture_dims():
    m = MlpModel.init(17, 7, seed=0)
    assert m.dims == [17, 100, 60, 7]
    assert m.dropout == 0.2


def test_zero_model_uniform():
    p = _zero_model().forward(np.random.default_rng(0).normal(size=(5, 4)))
    np.testing.assert_allclose(p, 1 / 7, atol=1e-15)


def test_rows_sum_to_one():
    m = MlpModel.init(6, 7, seed=3)
    x = np.random.default_rng(1).normal(scale=10, size=(50, 6))
    p = m.forward(x)
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-6)
    assert np.all((p >= 0) & (p <= 1))
    assert np.array_equal(p, m.forward(x))


def test_tiny_forward_hand_computed():
    # hidden pre-activations: [0.5 + 2 + 0.1, -0.5 + 0.5 - 0.2] = [2.6, -0.2] -> relu [2.6, 0]
    # logits: [2.6, 0.3]
    p = _tiny().forward(np.array([0.5, 1.0]))[0]
    p0 = 1 / (1 + math.exp(0.3 - 2.6))
    assert abs(p[0] - p0) < 1e-9 and abs(p[1] - (1 - p0)) < 1e-9


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        MlpModel.init(4, 3).forward(np.zeros((2, 5)))


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    m = MlpModel.init(5, 7, seed=2, hidden=(12, 8))
    for p in m.params[1::2]:
        p[...] = rng.normal(scale=0.1, size=p.shape)
    x = rng.normal(size=(6, 5))
    y = rng.integers(0, 7, size=6)
    assert max_grad_error(m, x, y) < 1e-4


def test_loss_limits():
    m = _zero_model()
    x = np.zeros((3, 4))
    assert m.loss_and_grads(x, [0, 3, 6])[0] == pytest.approx(math.log(7), abs=1e-12)
    m.params[-1][2] = 50.0
    assert m.loss_and_grads(x, [2, 2, 2])[0] < 1e-20
    with pytest.raises(ValueError):
        m.loss_and_grads(x, [0, 7, 1])


def test_per_sample_input_grad_is_scaled_mean_grad():
    m = MlpModel.init(5, 7, seed=4)
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(8, 5)), rng.integers(0, 7, 8)
    np.testing.assert_allclose(m.loss_input_grad(x, y), 8 * m.loss_and_grads(x, y)[2], rtol=1e-12, atol=1e-15)


def test_prob_jacobian_matches_finite_differences():
    m = MlpModel.init(4, 3, seed=5, hidden=(10, 6))
    x = np.random.default_rng(3).normal(size=(2, 4))
    jac = m.prob_jacobian(x)
    h = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        num = (m.forward(x + e) - m.forward(x - e)) / (2 * h)
        np.testing.assert_allclose(jac[:, :, i], num, atol=1e-8)


def _separable(n=400, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.normal(size=(n, 2)) * 0.5
    x[:, 0] += np.where(y == 1, 2.0, -2.0)
    return x, y


def test_train_separable():
    x, y = _separable()
    m = train(MlpModel.init(2, 2, seed=0), (x, y), TrainConfig(seed=0))
    assert accuracy(m, (x, y)) >= 0.99


def test_zero_epochs_is_identity():
    x, y = _separable()
    m0 = MlpModel.init(2, 2, seed=0)
    m = train(m0, (x, y), TrainConfig(epochs=0))
    assert all(np.array_equal(a, b) for a, b in zip(m.params, m0.params))


def test_equal_weights_match_unweighted():
    x, y = _separable(200)
    cfg = TrainConfig(epochs=3, seed=4)
    m0 = MlpModel.init(2, 2, seed=0)
    a = train(m0, (x, y), cfg)
    b = train(m0, (x, y), cfg, sample_weights=np.full(200, 2.5))
    assert max(np.abs(p - q).max() for p, q in zip(a.params, b.params)) < 1e-9


def test_train_deterministic_and_leaves_input_untouched():
    x, y = _separable(200)
    m0 = MlpModel.init(2, 2, seed=0)
    before = [p.copy() for p in m0.params]
    a = train(m0, (x, y), TrainConfig(epochs=2, seed=9))
    b = train(m0, (x, y), TrainConfig(epochs=2, seed=9))
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert all(np.array_equal(p, q) for p, q in zip(m0.params, before))


def test_bad_weights_and_divergence():
    x, y = _separable(100)
    m0 = MlpModel.init(2, 2, seed=0)
    with pytest.raises(ValueError):
        train(m0, (x, y), TrainConfig(epochs=1), sample_weights=np.zeros(100))
    x_bad = x.copy()
    x_bad[5, 0] = np.nan
    with pytest.raises(DivergenceError) as err:
        train(m0, (x_bad, y), TrainConfig(epochs=2, batch_size=100))
    assert err.value.epoch == 0


def test_predict_tie_break_and_memorization():
    assert np.all(predict(_zero_model(), np.ones((4, 4))) == 0)
    x, y = _separable(50, seed=3)
    m = train(MlpModel.init(2, 2, seed=0), (x, y), TrainConfig(epochs=200, batch_size=10))
    assert accuracy(m, (x, y)) == 1.0
    with pytest.raises(ValueError):
        accuracy(m, (np.zeros((0, 2)), np.zeros(0, dtype=int)))


def test_fixture_accuracy(clean_model, fixture_data):
    _, te = fixture_data
    assert accuracy(clean_model, te) > 0.90


def test_inverted_dropout_expectation():
    m = MlpModel.init(5, 7, seed=6)
    x = np.random.default_rng(0).normal(size=(1, 5))
    eval_h = m._forward(x)[1][0][1]
    draws = 20000
    rng = np.random.default_rng(1)
    train_h = m._forward(np.repeat(x, draws, axis=0), rng)[1][0][1].mean(axis=0)
    live = eval_h[0] > 0.5
    rel = np.abs(train_h[live] - eval_h[0][live]) / eval_h[0][live]
    assert rel.max() < 0.02


def test_train_mode_needs_rng():
    with pytest.raises(ValueError):
        MlpModel.init(2, 2).forward(np.zeros((1, 2)), mode="train")


def test_checkpoint_roundtrip(tmp_path, clean_model):
    clean_model.save(tmp_path / "m.json")
    back = MlpModel.load(tmp_path / "m.json")
    assert back.dims == clean_model.dims and back.dropout == clean_model.dropout
    assert all(np.array_equal(a, b) for a, b in zip(back.params, clean_model.params))
    assert (tmp_path / "m.json").read_text() == __import__("json").dumps(back.to_dict())
