"""scikit-learn style wrappers.

``ICCTRegressor`` fits a tree's runtime mean to labelled data by gradient
descent through the straight-through path.  ``ICCTAgent`` trains a tree
policy on one of the bundled environments with SAC; ``predict`` maps
observations to actions in environment units and ``score`` is the mean
evaluation return.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state, validate_data

from .envs import fit_mse, init_thresholds_from_data, make_env
from .model import IcctConfig, IcctModel, to_simple_form
from .sac import SacConfig, evaluate, train


def _seed(random_state) -> int:
    return int(check_random_state(random_state).randint(0, 2**31 - 1))


class ICCTRegressor(RegressorMixin, BaseEstimator):
    """Crisp tree with sparse linear leaves, fitted by Adam on squared error.

    Parameters
    ----------
    num_leaves : int, power of two
    variant : {"icct", "icct_static", "icct_complete", "cddt", "cddt_controllers"}
    leaf_sparsity : int or None
        Features per leaf controller (``e``); None uses the variant default,
        clipped to the number of input features.
    steps, learning_rate, batch_size : optimisation schedule
    l1_leaf_penalty : float
    random_state : int, RandomState or None
    """

    def __init__(
        self,
        num_leaves=8,
        variant="icct",
        leaf_sparsity=None,
        steps=2000,
        learning_rate=0.01,
        batch_size=None,
        l1_leaf_penalty=0.0,
        random_state=None,
    ):
        self.num_leaves = num_leaves
        self.variant = variant
        self.leaf_sparsity = leaf_sparsity
        self.steps = steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.l1_leaf_penalty = l1_leaf_penalty
        self.random_state = random_state

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.target_tags.multi_output = True
        return tags

    def _config(self, m, d):
        variant, e = self.variant, self.leaf_sparsity
        if variant == "icct":
            e = 1 if e is None else e
            if m == 1 or e >= m:  # a single feature cannot be sparsified further
                variant, e = "icct_complete", None
            elif e == 0:
                variant, e = "icct_static", None
        return IcctConfig(
            self.num_leaves, m, d, leaf_sparsity=e, variant=variant, l1_leaf_penalty=self.l1_leaf_penalty
        )

    def fit(self, X, y):
        X, y = validate_data(self, X, y, multi_output=True, y_numeric=True, dtype=np.float64)
        if not (isinstance(self.steps, (int, np.integer)) and self.steps >= 0):
            raise ValueError("steps must be a non-negative integer")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        self._y_1d = y.ndim == 1
        Y = y.reshape(len(y), -1)
        rng = np.random.default_rng(_seed(self.random_state))
        config = self._config(X.shape[1], Y.shape[1])
        model = IcctModel.init(config, rng)
        init_thresholds_from_data(model, X)
        self.model_ = fit_mse(model, X, Y, int(self.steps), float(self.learning_rate), self.batch_size, rng)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = validate_data(self, X, reset=False, dtype=np.float64)
        out = self.model_.mean_action(X)
        return out[:, 0] if self._y_1d else out

    @property
    def simple_form_(self):
        check_is_fitted(self, "model_")
        return to_simple_form(self.model_)

    def export_text(self, feature_names=None) -> str:
        from .export import render_simple_text

        check_is_fitted(self, "model_")
        return render_simple_text(self.model_, feature_names)


class ICCTAgent(BaseEstimator):
    """SAC-trained tree policy for a bundled environment.

    ``fit()`` takes no data: it interacts with ``env`` (``"cartpole"`` or
    ``"ring"``).  ``X`` passed to ``predict`` are observations.
    """

    def __init__(
        self,
        env="cartpole",
        num_leaves=8,
        variant="icct",
        leaf_sparsity=None,
        argmax_mode="straight_through",
        total_steps=100_000,
        warmup_steps=1000,
        init_alpha=1.0,
        lr_actor=3e-4,
        eval_episodes=10,
        random_state=0,
    ):
        self.env = env
        self.num_leaves = num_leaves
        self.variant = variant
        self.leaf_sparsity = leaf_sparsity
        self.argmax_mode = argmax_mode
        self.total_steps = total_steps
        self.warmup_steps = warmup_steps
        self.init_alpha = init_alpha
        self.lr_actor = lr_actor
        self.eval_episodes = eval_episodes
        self.random_state = random_state

    def fit(self, X=None, y=None):
        env = make_env(self.env) if isinstance(self.env, str) else self.env
        spec = env.spec
        seed = self.random_state if isinstance(self.random_state, (int, np.integer)) else _seed(self.random_state)
        config = IcctConfig(
            self.num_leaves, spec.observation_dim, spec.action_dim,
            leaf_sparsity=self.leaf_sparsity, variant=self.variant, argmax_mode=self.argmax_mode,
        )
        actor = IcctModel.init(
            config, np.random.default_rng(seed), feature_names=list(spec.feature_names) or None,
            action_names=list(spec.action_names) or None,
        )
        sac = SacConfig(
            total_steps=self.total_steps, warmup_steps=min(self.warmup_steps, self.total_steps), seed=int(seed),
            init_alpha=self.init_alpha, lr_actor=self.lr_actor, eval_episodes=self.eval_episodes,
        )
        result = train(actor, env, sac)
        self.env_ = env
        self.model_ = result.best_actor
        self.best_return_ = result.best_return
        self.metrics_ = result.metrics
        self.n_features_in_ = spec.observation_dim
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, but {type(self).__name__} expects {self.n_features_in_}")
        a = np.tanh(self.model_.mean_action(X))
        return np.stack([self.env_.spec.scale_action(row) for row in a])

    def score(self, X=None, y=None, episodes=None, seed=0) -> float:
        check_is_fitted(self, "model_")
        return evaluate(self.model_, self.env_, episodes or self.eval_episodes, seed).mean
