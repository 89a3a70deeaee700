import math

import numpy as np
import pytest
from scipy.optimize import linprog

from loanrobust.attacks import AttackConfig
from loanrobust.nn import MlpModel, TrainConfig, accuracy, cross_entropy, train
from loanrobust.robust import (
    EnsembleHypothesis,
    MwuConfig,
    ObjectiveSet,
    bottleneck,
    default_eta,
    mwu_matrix_game,
    mwu_robust_train,
    mwu_weights,
    objective_loss,
    objective_metrics,
    oracle_train,
    payoff_matrix,
    uniform_baseline,
)

FAST = TrainConfig(epochs=3, batch_size=64, seed=5)


@pytest.fixture(scope="module")
def tiny(fixture_data):
    tr, te = fixture_data
    return tr.subset(np.arange(800)), te.subset(np.arange(200))


def lp_minmax(game):
    """min over column mixtures q of max_i (game q)_i."""
    m, n = game.shape
    c = np.r_[np.zeros(n), 1.0]
    a_ub = np.c_[game, -np.ones(m)]
    a_eq = np.r_[np.ones(n), 0.0][None]
    res = linprog(c, A_ub=a_ub, b_ub=np.zeros(m), A_eq=a_eq, b_eq=[1.0], bounds=[(0, None)] * n + [(None, None)])
    assert res.success
    return res.fun


def test_weight_rule_two_objectives():
    w = mwu_weights([1.0, 0.0], 0.5)
    np.testing.assert_allclose(w, [math.e**0.5 / (math.e**0.5 + 1), 1 / (math.e**0.5 + 1)], atol=1e-12)
    assert w[0] == pytest.approx(0.6225, abs=1e-4)
    np.testing.assert_allclose(mwu_weights(np.zeros(6), 0.3), 1 / 6)


def test_weight_rule_is_stable_for_large_losses():
    w = mwu_weights([1e4, 1e4 - 1.0], 1.0)
    np.testing.assert_allclose(w, [1 / (1 + math.exp(-1)), math.exp(-1) / (1 + math.exp(-1))], atol=1e-12)


def test_default_eta():
    assert default_eta(6, 10) == pytest.approx(math.sqrt(math.log(6) / 20))
    assert default_eta(6, 10) == pytest.approx(0.2993, abs=1e-4)


def test_matching_pennies():
    game = np.array([[0.0, 1.0], [1.0, 0.0]])
    for T in (10, 100, 1000):
        res = mwu_matrix_game(game, T)
        assert abs(res.value - 0.5) <= math.sqrt(2 * math.log(2) / T)
    assert lp_minmax(game) == pytest.approx(0.5)


def test_dominant_column_reached_at_first_round():
    game = np.array([[0.9, 0.2, 0.7], [0.8, 0.1, 0.9], [0.5, 0.3, 0.6]])
    res = mwu_matrix_game(game, 1)
    assert res.strategy.tolist() == [0.0, 1.0, 0.0]
    assert res.value == pytest.approx(game[:, 1].max())
    assert res.value == pytest.approx(lp_minmax(game))


def test_random_game_regret_bound():
    rng = np.random.default_rng(11)
    game = rng.random((5, 5))
    res = mwu_matrix_game(game, 2000)
    assert res.value <= lp_minmax(game) + math.sqrt(2 * math.log(5) / 2000)
    assert res.weights.shape == (2000, 5)
    np.testing.assert_allclose(res.weights[0], 0.2)


def test_objective_set_validation():
    none, fgsm = AttackConfig("None"), AttackConfig("FGSM", epsilon=0.1)
    with pytest.raises(ValueError):
        ObjectiveSet([fgsm])
    with pytest.raises(ValueError):
        ObjectiveSet([fgsm, AttackConfig("PGD", epsilon=0.1)])
    with pytest.raises(ValueError):
        ObjectiveSet([none, none, fgsm])
    assert ObjectiveSet.standard().names == ["None", "FGSM", "PGD", "JSMA", "MSA1", "MSA2"]


def _ce(h, x, y):
    return cross_entropy(h.predict_proba(x), y)


def test_ensemble_gradients_match_finite_differences():
    models = [MlpModel.init(5, 4, seed=s, hidden=(9, 7)) for s in range(3)]
    ens = EnsembleHypothesis(models)
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(4, 5)), rng.integers(0, 4, 4)
    g = ens.loss_input_grad(x, y)
    jac = ens.prob_jacobian(x)
    h = 1e-6
    for i in range(5):
        e = np.zeros(5)
        e[i] = h
        np.testing.assert_allclose(g[:, i], (_ce(ens, x + e, y) - _ce(ens, x - e, y)) / (2 * h), atol=1e-7)
        num = (ens.predict_proba(x + e) - ens.predict_proba(x - e)) / (2 * h)
        np.testing.assert_allclose(jac[:, :, i], num, atol=1e-8)


def test_ensemble_averages_probabilities(tmp_path):
    models = [MlpModel.init(3, 3, seed=s) for s in range(2)]
    ens = EnsembleHypothesis(models)
    x = np.random.default_rng(1).normal(size=(5, 3))
    np.testing.assert_allclose(ens.predict_proba(x), (models[0].forward(x) + models[1].forward(x)) / 2)
    ens.save(tmp_path / "ens")
    back = EnsembleHypothesis.load(tmp_path / "ens")
    assert np.array_equal(back.predict_proba(x), ens.predict_proba(x))
    with pytest.raises(ValueError):
        EnsembleHypothesis([])


def test_objective_none_on_memorized_data():
    rng = np.random.default_rng(0)
    from test_attacks import _linear_ds

    x = rng.normal(size=(40, 2))
    y = (x[:, 0] > 0).astype(int)
    x[:, 0] += np.where(y == 1, 3.0, -3.0)
    ds = _linear_ds(x, y)
    h = train(MlpModel.init(2, 2, seed=0), ds, TrainConfig(epochs=300, batch_size=10))
    assert objective_loss(h, AttackConfig("None"), ds) < 1e-3


def test_zero_budget_objective_equals_clean(clean_model, small_data):
    clean = objective_loss(clean_model, AttackConfig("None"), small_data)
    for kind in ("FGSM", "PGD", "JSMA"):
        assert objective_loss(clean_model, AttackConfig(kind, epsilon=0.0), small_data) == clean
    assert objective_loss(clean_model, AttackConfig("MSA2", msa_percent=0.0), small_data) == clean


def test_fgsm_loss_exceeds_clean_loss(clean_model, fixture_data):
    _, te = fixture_data
    hits = 0
    batches = np.array_split(np.arange(len(te)), 100)
    for idx in batches:
        sub = te.subset(idx)
        hits += objective_loss(clean_model, AttackConfig("FGSM", epsilon=0.05), sub) >= \
            objective_loss(clean_model, AttackConfig("None"), sub) - 1e-9
    assert hits / len(batches) >= 0.99


def test_bottleneck_is_max_over_objectives(clean_model, small_data):
    objs = ObjectiveSet.standard(epsilon=0.2, msa_percent=0.06)
    bl, ba = bottleneck(clean_model, objs, small_data)
    per = [objective_metrics(clean_model, o, small_data) for o in objs]
    assert bl == max(p[0] for p in per) and ba == min(p[1] for p in per)
    single = bottleneck(clean_model, [objs[1]], small_data)
    assert single == per[1]


def test_oracle_point_mass_on_none_is_plain_training(tiny):
    tr, _ = tiny
    objs = ObjectiveSet.standard()
    w = np.eye(objs.m)[0]
    run = oracle_train(w, tr, FAST, objs)
    ref = train(MlpModel.init(tr.x.shape[1], 7, seed=FAST.seed), tr, FAST)
    assert all(np.array_equal(a, b) for a, b in zip(run.model.params, ref.params))
    assert run.counts.tolist() == [math.ceil(800 / 64) * 3, 0, 0, 0, 0, 0]


def test_oracle_uniform_sampling_frequency(tiny):
    tr, _ = tiny
    objs = ObjectiveSet([AttackConfig("None"), AttackConfig("FGSM", epsilon=0.1), AttackConfig("MSA1", msa_percent=0.05)])
    cfg = TrainConfig(epochs=40, batch_size=25, seed=2)
    run = oracle_train(np.full(3, 1 / 3), tr, cfg, objs)
    n = run.counts.sum()
    assert n >= 1000
    sigma = math.sqrt(n * (1 / 3) * (2 / 3))
    assert np.all(np.abs(run.counts - n / 3) <= 3 * sigma)


def test_oracle_adversarial_training_lowers_fgsm_loss(fixture_data):
    tr, te = fixture_data
    cfg = TrainConfig(epochs=10, seed=4)
    objs = ObjectiveSet([AttackConfig("None"), AttackConfig("FGSM", epsilon=0.2)])
    clean = oracle_train([1.0, 0.0], tr, cfg, objs).model
    robust = oracle_train([0.0, 1.0], tr, cfg, objs).model
    assert objective_loss(robust, objs[1], te) < objective_loss(clean, objs[1], te)


def test_oracle_rejects_bad_distribution(tiny):
    with pytest.raises(ValueError):
        oracle_train([0.5, 0.6, 0, 0, 0, 0], tiny[0], FAST, ObjectiveSet.standard())


def test_single_round_mwu_equals_baseline(tiny):
    tr, te = tiny
    objs = ObjectiveSet.standard(epsilon=0.2, msa_percent=0.06)
    cfg = MwuConfig(T=1, oracle_cfg=FAST)
    e1, t1 = mwu_robust_train(objs, cfg, tr, te)
    e2, t2 = uniform_baseline(objs, cfg, tr, te)
    assert t1.rows() == t2.rows()
    np.testing.assert_allclose(t1[0].weights, 1 / 6)


def test_trajectory_structure(tmp_path, tiny):
    tr, te = tiny
    objs = ObjectiveSet([AttackConfig("None"), AttackConfig("FGSM", epsilon=0.3), AttackConfig("MSA1", msa_percent=0.08)])
    cfg = MwuConfig(T=3, oracle_cfg=FAST)
    ens, traj = mwu_robust_train(objs, cfg, tr, te)
    assert len(ens) == 3 and len(traj) == 3
    np.testing.assert_allclose(traj[0].weights, 1 / 3)
    for t in range(3):
        cum = sum(r.capped_losses for r in traj.records[:t]) if t else np.zeros(3)
        expected = np.exp(traj.eta * cum) / np.exp(traj.eta * cum).sum()
        np.testing.assert_allclose(traj[t].weights, expected, atol=1e-9)
        assert traj[t].bottleneck_loss == traj[t].ensemble_losses.max()
    assert traj[0].bottleneck_loss == traj[0].losses.max()
    _, base = uniform_baseline(objs, cfg, tr, te)
    for r in base.records:
        np.testing.assert_allclose(r.weights, 1 / 3)
    traj.to_csv(tmp_path / "traj.csv")
    lines = (tmp_path / "traj.csv").read_text().splitlines()
    assert len(lines) == 4
    assert lines[0] == ",".join(traj.header())


def test_static_reference_variant_runs(tiny):
    tr, te = tiny
    objs = ObjectiveSet([AttackConfig("None"), AttackConfig("FGSM", epsilon=0.3)])
    ens, traj = mwu_robust_train(objs, MwuConfig(T=2, oracle_cfg=FAST, static_reference=True), tr, te)
    assert len(traj) == 2


def test_payoff_matrix_shape_and_clean_entry(tmp_path, tiny):
    tr, te = tiny
    objs = ObjectiveSet([AttackConfig("None"), AttackConfig("FGSM", epsilon=0.3), AttackConfig("MSA2", msa_percent=0.08)])
    pm = payoff_matrix(objs, tr, te, FAST)
    assert pm.loss.shape == (3, 3) and np.all(np.isfinite(pm.loss)) and np.all(np.isfinite(pm.accuracy))
    plain = train(MlpModel.init(tr.x.shape[1], 7, seed=FAST.seed), tr, FAST)
    assert pm.loss[0, 0] == pytest.approx(float(cross_entropy(plain.forward(te.x), te.y).mean()), abs=1e-12)
    assert pm.accuracy[0, 0] == pytest.approx(accuracy(plain, te))
    threaded = payoff_matrix(objs, tr, te, FAST, threads=2)
    assert np.array_equal(threaded.loss, pm.loss)
    pm.to_csv(tmp_path / "l.csv", tmp_path / "a.csv")
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "trained_on,None,FGSM,MSA2"
