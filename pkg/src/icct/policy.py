"""Actor plumbing shared by tree and MLP policies.

Both :class:`~icct.model.IcctModel` and :class:`MlpActor` expose the same
duck-typed surface used by the trainer:

* ``params`` -- dict of name to float64 array (mutated in place by Adam)
* ``distribution(tape, pv, X, rng)`` -- ``(mean, log_std, info)`` Values
* ``penalty(tape, pv)`` -- extra loss term or ``None``
* ``copy()`` and ``mean_action(X)``
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Value
from .model import LOG_STD_MAX, LOG_STD_MIN, IcctConfig, count_params, count_trainable

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def squashed_sample(mean: Value, log_std: Value, eps) -> tuple[Value, Value]:
    """Reparameterized tanh-Gaussian sample and its log-density.

    ``log pi(a) = sum_d [log N(u; mean, std) - log(1 - tanh(u)^2)]`` with
    ``u = mean + std * eps``; the correction uses the overflow-free form
    ``2 (log 2 - u - softplus(-2u))``.
    """
    eps = np.asarray(eps, dtype=np.float64)
    u = mean + ad.exp(log_std) * eps
    a = ad.tanh(u)
    gauss = ad.neg(log_std) - (0.5 * eps * eps + _HALF_LOG_2PI)
    corr = ad.scale(np.log(2.0) - u - ad.softplus(ad.scale(u, -2.0)), 2.0)
    return a, (gauss - corr).sum(axis=1)


def sample_actions(policy, X, rng: np.random.Generator, deterministic: bool = False, route_rng=None):
    """Actions in ``[-1, 1]`` for a batch of observations, no gradients.

    ``route_rng`` enables Gumbel routing noise for Gumbel-mode trees.
    """
    tape = Tape(grad_enabled=False)
    mean, log_std, _ = policy.distribution(tape, policy.param_values(tape), np.atleast_2d(X), route_rng)
    if deterministic:
        return np.tanh(mean.data)
    a, _ = squashed_sample(mean, log_std, rng.standard_normal(mean.shape))
    return a.data


class MlpActor:
    """Fully connected Gaussian actor with ReLU hidden layers."""

    def __init__(self, input_dim: int, action_dim: int, hidden: tuple[int, ...], rng=None, params=None):
        self.input_dim = input_dim
        self.action_dim = action_dim
        self.hidden = tuple(int(h) for h in hidden)
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = {}
            sizes = (input_dim,) + self.hidden
            for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
                lim = 1.0 / np.sqrt(fan_in)
                params[f"W{i}"] = rng.uniform(-lim, lim, (fan_in, fan_out))
                params[f"b{i}"] = np.zeros(fan_out)
            lim = 1.0 / np.sqrt(sizes[-1])
            params["W_mean"] = rng.uniform(-lim, lim, (sizes[-1], action_dim))
            params["b_mean"] = np.zeros(action_dim)
            params["W_logstd"] = rng.uniform(-lim, lim, (sizes[-1], action_dim))
            params["b_logstd"] = np.full(action_dim, -0.5)
        self.params = params

    def param_values(self, tape: Tape) -> dict[str, Value]:
        return {k: tape.param(v) for k, v in self.params.items()}

    def distribution(self, tape: Tape, pv, X, rng=None):
        h = tape.constant(np.asarray(X, dtype=np.float64))
        for i in range(len(self.hidden)):
            h = ad.dense(h, pv[f"W{i}"], pv[f"b{i}"], relu=True)
        mean = ad.dense(h, pv["W_mean"], pv["b_mean"])
        log_std = ad.clip(ad.dense(h, pv["W_logstd"], pv["b_logstd"]), LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std, None

    def penalty(self, tape, pv):
        return None

    def mean_action(self, X) -> np.ndarray:
        tape = Tape(grad_enabled=False)
        mean, _, _ = self.distribution(tape, self.param_values(tape), np.atleast_2d(X))
        return mean.data

    def copy(self) -> "MlpActor":
        return MlpActor(
            self.input_dim, self.action_dim, self.hidden, params={k: v.copy() for k, v in self.params.items()}
        )

    @property
    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def mlp_param_count(input_dim: int, action_dim: int, hidden: tuple[int, ...]) -> int:
    sizes = (input_dim,) + tuple(hidden)
    body = sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))
    return body + 2 * (sizes[-1] + 1) * action_dim


def mlp_width_for_budget(budget: int, input_dim: int, action_dim: int) -> int:
    """Single-hidden-layer width whose total parameter count is closest to ``budget``."""
    best = min(
        range(1, max(2, budget) + 1),
        key=lambda h: (abs(mlp_param_count(input_dim, action_dim, (h,)) - budget), h),
    )
    return best


MLP_MAX_HIDDEN = (256, 256)


def mlp_baseline_hidden(kind: str, tree_config: IcctConfig) -> tuple[int, ...]:
    """Hidden sizes for the three MLP tiers relative to a reference tree.

    ``mlp_max`` is a conventional large network, ``mlp_upper`` matches the
    tree's total trainable parameters, ``mlp_lower`` its active ones.
    """
    m, d = tree_config.input_dim, tree_config.action_dim
    if kind == "mlp_max":
        return MLP_MAX_HIDDEN
    if kind == "mlp_upper":
        return (mlp_width_for_budget(count_trainable(tree_config), m, d),)
    if kind == "mlp_lower":
        return (mlp_width_for_budget(count_params(tree_config), m, d),)
    raise ValueError(f"unknown MLP baseline {kind!r}")


@dataclass
class Adam:
    """Adam over a dict of arrays, updated in place."""

    params: dict
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = dataclasses.field(default=None)
    v: dict = dataclasses.field(default=None)

    def __post_init__(self):
        if self.m is None:
            self.m = {k: np.zeros_like(p) for k, p in self.params.items()}
            self.v = {k: np.zeros_like(p) for k, p in self.params.items()}

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
