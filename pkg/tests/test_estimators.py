import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.utils.estimator_checks import check_estimator

from icct import ICCTAgent, ICCTRegressor, act, to_simple_form


def test_regressor_passes_sklearn_checks():
    est = ICCTRegressor(num_leaves=2, variant="icct_complete", steps=300, random_state=0)
    failures = [
        f for f in check_estimator(est, on_fail=None) if f["status"] not in ("passed", "skipped", "xfail")
    ]
    assert not failures, [(f["check_name"], str(f["exception"])[:200]) for f in failures]


def test_regressor_params_roundtrip():
    est = ICCTRegressor(num_leaves=4, leaf_sparsity=2, steps=10)
    assert est.get_params()["num_leaves"] == 4
    est2 = clone(est).set_params(num_leaves=16)
    assert est2.num_leaves == 16 and est.num_leaves == 4


def test_regressor_fits_a_step():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (400, 2))
    y = np.where(X[:, 0] > 0.2, 1.0, -1.0)
    est = ICCTRegressor(num_leaves=2, leaf_sparsity=0, steps=1500, learning_rate=0.05, random_state=0).fit(X, y)
    assert est.score(X, y) > 0.95
    assert est.predict(X).shape == (400,)
    tree = est.simple_form_
    assert tree.nodes[0].feature == 0
    assert "if x0" in est.export_text()


def test_regressor_predictions_equal_simple_form():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(200, 3))
    Y = np.column_stack([np.sin(X[:, 0]), X[:, 1] * X[:, 2]])
    est = ICCTRegressor(num_leaves=4, leaf_sparsity=1, steps=100, random_state=1).fit(X, Y)
    pred = est.predict(X)
    assert pred.shape == (200, 2)
    tree = to_simple_form(est.model_)
    np.testing.assert_array_equal(pred, np.stack([tree.evaluate(x)[0] for x in X]))


def test_regressor_is_deterministic():
    X = np.random.default_rng(2).normal(size=(50, 2))
    y = X[:, 0] ** 2
    a = ICCTRegressor(num_leaves=4, steps=50, random_state=3).fit(X, y).predict(X)
    b = ICCTRegressor(num_leaves=4, steps=50, random_state=3).fit(X, y).predict(X)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize(
    "params",
    [{"num_leaves": 3}, {"steps": -1}, {"learning_rate": 0.0}, {"variant": "forest"}],
)
def test_regressor_rejects_bad_params(params):
    X = np.zeros((10, 2))
    with pytest.raises(ValueError):
        ICCTRegressor(**params).fit(X, np.zeros(10))


def test_regressor_rejects_bad_inputs():
    est = ICCTRegressor(steps=5)
    with pytest.raises(ValueError):
        est.fit(np.array([[np.nan, 1.0]]), [1.0])
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((1, 2)))
    est.fit(np.zeros((8, 2)), np.zeros(8))
    with pytest.raises(ValueError):
        est.predict(np.zeros((1, 3)))


def test_agent_fit_predict_score():
    agent = ICCTAgent(num_leaves=2, leaf_sparsity=1, total_steps=300, warmup_steps=200, eval_episodes=2)
    assert agent.get_params()["env"] == "cartpole"
    agent.fit()
    obs = np.random.default_rng(0).normal(size=(5, 4)) * 0.05
    actions = agent.predict(obs)
    assert actions.shape == (5, 1)
    assert np.all(np.abs(actions) <= 3.0)
    for o, a in zip(obs, actions):
        np.testing.assert_allclose(a, act(agent.model_, o, low=-3.0, high=3.0)[0])
    assert np.isfinite(agent.score(episodes=2))
    with pytest.raises(ValueError):
        agent.predict(np.zeros((1, 3)))


def test_agent_not_fitted():
    with pytest.raises(NotFittedError):
        ICCTAgent().predict(np.zeros((1, 4)))
