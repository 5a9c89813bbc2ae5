"""Soft Actor-Critic for tree and MLP actors.

The actor is any object with the interface described in
:mod:`icct.policy`.  Critics are a pair of independent ReLU MLPs stored
as stacked arrays so both are evaluated with one batched matmul per layer.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .envs import Env, TrainingDivergedError
from .policy import Adam, sample_actions, squashed_sample

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "episode_return", "critic_loss", "actor_loss", "alpha")


@dataclass(frozen=True)
class SacConfig:
    gamma: float = 0.99
    polyak: float = 0.005
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_alpha: float = 3e-4
    batch_size: int = 256
    buffer_capacity: int = 100_000
    target_entropy: float | None = None  # None means -action_dim
    total_steps: int = 100_000
    warmup_steps: int = 1000
    seed: int = 0
    init_alpha: float = 1.0
    critic_hidden: tuple = (64, 64)
    eval_every: int = 2000
    eval_episodes: int = 10

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0 < self.polyak < 1:
            raise ValueError("polyak must lie in (0, 1)")
        for name in ("lr_actor", "lr_critic", "lr_alpha", "init_alpha"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("batch_size", "buffer_capacity", "total_steps", "eval_every", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive count")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")
        if self.buffer_capacity < self.batch_size:
            raise ValueError("buffer_capacity must be at least batch_size")
        object.__setattr__(self, "critic_hidden", tuple(int(h) for h in self.critic_hidden))

    def replace(self, **changes) -> "SacConfig":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# replay


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self):
        return len(self.r)


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int, rng: np.random.Generator):
        self.capacity = capacity
        self.rng = rng
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self.head = 0

    def __len__(self):
        return self.size

    def add(self, s, a, r, s_next, done) -> None:
        if not np.isfinite(r):
            raise ValueError("reward must be finite")
        i = self.head
        self.s[i], self.a[i], self.r[i], self.s_next[i], self.done[i] = s, a, r, s_next, float(done)
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int) -> Batch:
        if self.size < batch_size:
            raise ValueError(f"buffer holds {self.size} transitions, fewer than batch size {batch_size}")
        idx = self.rng.integers(0, self.size, batch_size)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])


# --------------------------------------------------------------------------
# critics


class TwinCritic:
    """Two independent Q networks ``(s, a) -> R`` sharing one architecture."""

    def __init__(self, obs_dim: int, action_dim: int, hidden=(64, 64), rng=None, params=None):
        self.obs_dim, self.action_dim, self.hidden = obs_dim, action_dim, tuple(hidden)
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            sizes = (obs_dim + action_dim,) + self.hidden + (1,)
            params = {}
            for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
                lim = 1.0 / np.sqrt(fan_in)
                params[f"W{i}"] = rng.uniform(-lim, lim, (2, fan_in, fan_out))
                params[f"b{i}"] = np.zeros((2, 1, fan_out))
        self.params = params

    @property
    def num_layers(self):
        return len(self.hidden) + 1

    def copy(self) -> "TwinCritic":
        return TwinCritic(self.obs_dim, self.action_dim, self.hidden, params={k: v.copy() for k, v in self.params.items()})

    def param_values(self, tape: Tape, trainable: bool = True):
        make = tape.param if trainable else tape.constant
        return {k: make(v) for k, v in self.params.items()}

    def q_values(self, tape: Tape, pv, s, a):
        """Both critics' values, shape ``(2, B)``."""
        h = ad.concat([tape.wrap(np.asarray(s, dtype=np.float64)), tape.wrap(a)], axis=1)
        for i in range(self.num_layers):
            h = ad.dense(h, pv[f"W{i}"], pv[f"b{i}"], relu=i < self.num_layers - 1)
        return ad.reshape(h, (2, h.shape[1]))

    def q_numpy(self, s, a) -> np.ndarray:
        tape = Tape(grad_enabled=False)
        return self.q_values(tape, self.param_values(tape, False), s, np.asarray(a, dtype=np.float64)).data


def polyak_update(target: dict, online: dict, rho: float) -> None:
    """``target <- rho * online + (1 - rho) * target`` in place."""
    for k, t in target.items():
        t[...] = rho * online[k] + (1.0 - rho) * t


# --------------------------------------------------------------------------
# agent


def _route_rng(actor, rng):
    cfg = getattr(actor, "config", None)
    return rng if cfg is not None and cfg.argmax_mode == "gumbel" else None


@dataclass
class SacAgent:
    actor: object
    critic: TwinCritic
    critic_target: TwinCritic
    config: SacConfig
    action_dim: int
    log_alpha: np.ndarray = None
    actor_opt: Adam = None
    critic_opt: Adam = None
    alpha_opt: Adam = None
    updates: int = 0

    @classmethod
    def create(cls, actor, obs_dim: int, action_dim: int, config: SacConfig, rng: np.random.Generator):
        critic = TwinCritic(obs_dim, action_dim, config.critic_hidden, rng)
        agent = cls(actor, critic, critic.copy(), config, action_dim)
        agent.log_alpha = np.array(np.log(config.init_alpha))
        agent.actor_opt = Adam(actor.params, lr=config.lr_actor)
        agent.critic_opt = Adam(critic.params, lr=config.lr_critic)
        agent.alpha_opt = Adam({"log_alpha": agent.log_alpha}, lr=config.lr_alpha)
        return agent

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))

    @property
    def target_entropy(self) -> float:
        te = self.config.target_entropy
        return -float(self.action_dim) if te is None else float(te)


def bellman_targets(agent: SacAgent, batch: Batch, rng: np.random.Generator) -> np.ndarray:
    """``r + gamma (1 - done) (min target Q(s', a') - alpha log pi(a'|s'))`` with ``a'`` from the current actor."""
    tape = Tape(grad_enabled=False)
    mean, log_std, _ = agent.actor.distribution(tape, agent.actor.param_values(tape), batch.s_next, _route_rng(agent.actor, rng))
    a2, logp2 = squashed_sample(mean, log_std, rng.standard_normal(mean.shape))
    q = agent.critic_target.q_numpy(batch.s_next, a2.data)
    soft_value = q.min(axis=0) - agent.alpha * logp2.data
    return batch.r + agent.config.gamma * (1.0 - batch.done) * soft_value


def critic_loss(tape: Tape, critic: TwinCritic, pv, batch: Batch, y: np.ndarray):
    """Mean squared Bellman error over both critics and the batch."""
    q = critic.q_values(tape, pv, batch.s, batch.a)
    err = q - y[None, :]
    return (err * err).mean()


def critic_update(agent: SacAgent, batch: Batch, rng: np.random.Generator) -> float:
    if len(batch) == 0:
        raise ValueError("empty batch")
    y = bellman_targets(agent, batch, rng)
    tape = Tape()
    pv = agent.critic.param_values(tape)
    loss = critic_loss(tape, agent.critic, pv, batch, y)
    if not np.isfinite(loss.data):
        raise TrainingDivergedError(agent.updates, "critic loss")
    tape.backward(loss)
    agent.critic_opt.step({k: tape.grad(v) for k, v in pv.items()})
    return float(loss.data)


def actor_loss(tape: Tape, agent: SacAgent, pv, s, eps, alpha: float, route_rng=None):
    """``mean(alpha log pi(a|s) - min_i Q_i(s, a))`` plus the actor's penalty; returns ``(loss, logp)``."""
    mean, log_std, _ = agent.actor.distribution(tape, pv, s, route_rng)
    a, logp = squashed_sample(mean, log_std, eps)
    q = agent.critic.q_values(tape, agent.critic.param_values(tape, trainable=False), s, a)
    loss = (logp * alpha - ad.minimum(q[0], q[1])).mean()
    penalty = agent.actor.penalty(tape, pv)
    if penalty is not None:
        loss = loss + penalty
    return loss, logp


def actor_update(agent: SacAgent, batch: Batch, rng: np.random.Generator) -> tuple[float, np.ndarray]:
    if len(batch) == 0:
        raise ValueError("empty batch")
    tape = Tape()
    pv = agent.actor.param_values(tape)
    route_rng = _route_rng(agent.actor, rng)
    eps = rng.standard_normal((len(batch), agent.action_dim))
    loss, logp = actor_loss(tape, agent, pv, batch.s, eps, agent.alpha, route_rng)
    if not np.isfinite(loss.data):
        raise TrainingDivergedError(agent.updates, "actor loss")
    tape.backward(loss)
    agent.actor_opt.step({k: tape.grad(v) for k, v in pv.items()})
    return float(loss.data), logp.data


def temperature_gradient(log_alpha: float, logp: np.ndarray, target_entropy: float) -> float:
    """d/d(log alpha) of ``-alpha * mean(logp + target_entropy)``."""
    return -float(np.exp(log_alpha)) * float(np.mean(logp + target_entropy))


def temperature_update(agent: SacAgent, logp: np.ndarray) -> float:
    g = temperature_gradient(float(agent.log_alpha), logp, agent.target_entropy)
    agent.alpha_opt.step({"log_alpha": np.array(g)})
    return agent.alpha


def sac_update(agent: SacAgent, batch: Batch, rng: np.random.Generator) -> tuple[float, float]:
    """One full SAC step: critics, actor, temperature, then target averaging."""
    c_loss = critic_update(agent, batch, rng)
    a_loss, logp = actor_update(agent, batch, rng)
    temperature_update(agent, logp)
    polyak_update(agent.critic_target.params, agent.critic.params, agent.config.polyak)
    agent.updates += 1
    return c_loss, a_loss


# --------------------------------------------------------------------------
# evaluation and training loop


@dataclass
class EvalResult:
    mean: float
    stderr: float
    returns: list
    summaries: list = field(default_factory=list)


def evaluate(actor, env: Env, episodes: int = 10, seed: int = 0, mode: str = "deterministic") -> EvalResult:
    """Greedy-mean returns over ``episodes`` seeded resets (``seed + i``).

    ``mode="train"`` keeps the training-time routing operator (Gumbel
    noise for Gumbel-mode trees) while still acting with the mean.
    Episodes run in lockstep so the actor is evaluated once per step.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if mode not in ("deterministic", "train"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    envs = [env.clone() for _ in range(episodes)]
    obs = np.stack([e.reset(seed=seed + i) for i, e in enumerate(envs)])
    returns = np.zeros(episodes)
    active = np.ones(episodes, dtype=bool)
    route_rng = np.random.default_rng(seed) if mode == "train" else None
    spec = env.spec
    while active.any():
        idx = np.flatnonzero(active)
        actions = sample_actions(actor, obs[idx], None, deterministic=True, route_rng=_route_rng(actor, route_rng))
        for j, i in enumerate(idx):
            o, r, done, _ = envs[i].step(spec.scale_action(actions[j]))
            obs[i] = o
            returns[i] += r
            if done:
                active[i] = False
    n = episodes
    stderr = float(np.std(returns, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return EvalResult(float(returns.mean()), stderr, returns.tolist(), [e.episode_summary() for e in envs])


@dataclass
class TrainResult:
    actor: object
    best_actor: object
    best_return: float
    metrics: list
    evaluations: list
    agent: SacAgent

    def write_metrics(self, path) -> None:
        write_metrics_csv(self.metrics, path)


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([row[k] if k == "step" else repr(float(row[k])) for k in METRIC_COLUMNS])


def train(actor, env: Env, config: SacConfig, eval_env: Env | None = None, callback=None) -> TrainResult:
    """Train ``actor`` in place with SAC and return it with its metrics.

    The first ``warmup_steps`` actions are uniform in ``[-1, 1]``; after
    that every environment step is followed by one SAC update.  The actor
    is evaluated every ``eval_every`` steps and at the end; the best
    evaluation is kept as ``best_actor``.
    """
    spec = env.spec
    rng = np.random.default_rng(config.seed)
    agent = SacAgent.create(actor, spec.observation_dim, spec.action_dim, config, rng)
    buffer = ReplayBuffer(config.buffer_capacity, spec.observation_dim, spec.action_dim, rng)
    eval_env = eval_env if eval_env is not None else env
    eval_seed = 10_000 + 1000 * config.seed

    def reset():
        return env.reset(seed=int(rng.integers(2**31)))

    obs = reset()
    ep_return = 0.0
    c_loss = a_loss = float("nan")
    metrics, evaluations = [], []
    best_return, best_actor = -np.inf, actor.copy()
    for step in range(1, config.total_steps + 1):
        if step <= config.warmup_steps:
            a = rng.uniform(-1.0, 1.0, spec.action_dim)
        else:
            a = sample_actions(actor, obs, rng, route_rng=_route_rng(actor, rng))[0]
        obs2, r, done, info = env.step(spec.scale_action(a))
        terminal = done and not info.get("truncated", False)
        buffer.add(obs, a, r, obs2, terminal)
        ep_return += r
        obs = obs2
        if step > config.warmup_steps and len(buffer) >= config.batch_size:
            c_loss, a_loss = sac_update(agent, buffer.sample(config.batch_size), rng)
        if done:
            metrics.append({"step": step, "episode_return": ep_return, "critic_loss": c_loss, "actor_loss": a_loss, "alpha": agent.alpha})
            ep_return = 0.0
            obs = reset()
        if step % config.eval_every == 0 or step == config.total_steps:
            res = evaluate(actor, eval_env, config.eval_episodes, eval_seed)
            evaluations.append((step, res.mean, res.stderr))
            log.info("step %d eval %.2f +- %.2f alpha %.4f", step, res.mean, res.stderr, agent.alpha)
            if res.mean > best_return:
                best_return, best_actor = res.mean, actor.copy()
            if callback is not None:
                callback(step, res, agent)
    return TrainResult(actor, best_actor, float(best_return), metrics, evaluations, agent)
