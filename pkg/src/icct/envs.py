"""Desk-scale control environments and a supervised regression harness.

Environments follow a small ``reset(seed) -> obs`` / ``step(action) ->
(obs, reward, done, info)`` protocol.  ``step`` takes actions in
environment units (inside ``spec.action_low .. spec.action_high``);
``info["truncated"]`` marks time-limit ends, which are not terminal for
bootstrapping.
"""
from __future__ import annotations

import copy
import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .autodiff import Tape
from .model import IcctConfig, IcctModel


class CollisionError(RuntimeError):
    """A vehicle gap became non-positive."""


@dataclass(frozen=True)
class EnvSpec:
    observation_dim: int
    action_dim: int
    action_low: tuple
    action_high: tuple
    horizon: int
    feature_names: tuple = ()
    action_names: tuple = ()

    def __post_init__(self):
        lo, hi = np.asarray(self.action_low, float), np.asarray(self.action_high, float)
        if lo.shape != (self.action_dim,) or hi.shape != (self.action_dim,):
            raise ValueError("action bounds must have action_dim entries")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
            raise ValueError("action bounds must be finite with low < high")

    def scale_action(self, a) -> np.ndarray:
        """Map ``[-1, 1]`` to the action box."""
        lo, hi = np.asarray(self.action_low, float), np.asarray(self.action_high, float)
        return lo + (np.asarray(a, float) + 1.0) * 0.5 * (hi - lo)


class Env:
    spec: EnvSpec

    def clone(self):
        return copy.deepcopy(self)

    def episode_summary(self) -> dict:
        return {}


# --------------------------------------------------------------------------
# cart-pole


class CartPole(Env):
    """Classic cart-pole with a continuous force in ``[-3, 3]`` N.

    Observation is ``(x, x_dot, theta, theta_dot)``.  Reward is 1 per
    surviving step; the failing step earns 0.  Episodes end when the pole
    leaves +-12 degrees, the cart leaves +-2.4 m, or after 1000 steps.
    """

    gravity = 9.8
    mass_cart = 1.0
    mass_pole = 0.1
    half_length = 0.5
    dt = 0.02
    max_force = 3.0
    theta_limit = 12.0 * np.pi / 180.0
    x_limit = 2.4

    def __init__(self, horizon: int = 1000, init_range: float = 0.05):
        self.horizon = horizon
        self.init_range = init_range
        self.spec = EnvSpec(
            4, 1, (-self.max_force,), (self.max_force,), horizon,
            ("cart_position", "cart_velocity", "pole_angle", "pole_velocity"), ("force",),
        )
        self.state = np.zeros(4)
        self.steps = 0

    def reset(self, seed=None) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self.state = rng.uniform(-self.init_range, self.init_range, 4)
        self.steps = 0
        return self.state.copy()

    @classmethod
    def dynamics(cls, state, force) -> np.ndarray:
        """One semi-implicit Euler step of the cart-pole equations."""
        x, x_dot, theta, theta_dot = state
        total = cls.mass_cart + cls.mass_pole
        pml = cls.mass_pole * cls.half_length
        sin, cos = np.sin(theta), np.cos(theta)
        temp = (force + pml * theta_dot**2 * sin) / total
        theta_acc = (cls.gravity * sin - cos * temp) / (
            cls.half_length * (4.0 / 3.0 - cls.mass_pole * cos**2 / total)
        )
        x_acc = temp - pml * theta_acc * cos / total
        x_dot = x_dot + cls.dt * x_acc
        x = x + cls.dt * x_dot
        theta_dot = theta_dot + cls.dt * theta_acc
        theta = theta + cls.dt * theta_dot
        return np.array([x, x_dot, theta, theta_dot])

    def failed(self, state=None) -> bool:
        s = self.state if state is None else state
        return bool(abs(s[2]) > self.theta_limit or abs(s[0]) > self.x_limit)

    def step(self, action):
        force = float(np.clip(np.asarray(action, float).reshape(-1)[0], -self.max_force, self.max_force))
        self.state = self.dynamics(self.state, force)
        self.steps += 1
        failed = self.failed()
        truncated = not failed and self.steps >= self.horizon
        reward = 0.0 if failed else 1.0
        return self.state.copy(), reward, failed or truncated, {"truncated": truncated, "failed": failed}

    def trace_row(self):
        return {"x": self.state[0], "x_dot": self.state[1], "theta": self.state[2], "theta_dot": self.state[3]}


# --------------------------------------------------------------------------
# ring road


@dataclass(frozen=True)
class IdmParams:
    a: float = 1.0
    b: float = 1.5
    v0: float = 30.0
    T: float = 1.0
    s0: float = 2.0
    delta: float = 4.0


def idm_accel(v, dv, s, p: IdmParams = IdmParams()):
    """Intelligent Driver Model acceleration.

    ``dv`` is the approach rate ``v - v_leader``; ``s`` the bumper gap.
    """
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise CollisionError("non-positive gap")
    s_star = p.s0 + v * p.T + v * dv / (2.0 * np.sqrt(p.a * p.b))
    return p.a * (1.0 - (v / p.v0) ** p.delta - (s_star / s) ** 2)


def idm_equilibrium_speed(gap: float, p: IdmParams = IdmParams()) -> float:
    """Speed at which IDM acceleration vanishes for a fixed gap with a same-speed leader."""
    if gap <= 0:
        raise CollisionError("non-positive gap")
    f = lambda v: 1.0 - (v / p.v0) ** p.delta - ((p.s0 + v * p.T) / gap) ** 2
    if f(0.0) <= 0:
        return 0.0
    return brentq(f, 0.0, p.v0, xtol=1e-14)


class RingRoad(Env):
    """Single-lane ring with one controlled ego among IDM followers.

    Vehicle ``i`` follows vehicle ``i + 1`` (mod n); vehicle 0 is the ego.
    The observation is ``[x_0 / L, (x_i - x_0 mod L) / L for i >= 1,
    v_i / v0 for all i]``: the ego's absolute position, every other
    vehicle's position relative to the ego, then all speeds.

    ``reset`` places vehicles evenly with the given jitter, then runs
    ``warmup_steps`` of all-IDM driving so waves are already present when
    control starts.  Reward is the mean network speed minus
    ``0.1 * a_norm**2`` where ``a_norm`` is the ego command in ``[-1, 1]``;
    a collision ends the episode with ``collision_penalty``.
    """

    dt = 0.1
    max_accel = 3.0

    def __init__(
        self,
        length: float = 260.0,
        num_vehicles: int = 22,
        vehicle_length: float = 5.0,
        horizon: int = 600,
        noise: float = 0.2,
        position_jitter: float = 2.0,
        speed_jitter: float = 1.0,
        warmup_steps: int = 3000,
        collision_penalty: float = 100.0,
        accel_cost: float = 0.1,
        idm: IdmParams = IdmParams(),
    ):
        self.length = length
        self.n = num_vehicles
        self.vehicle_length = vehicle_length
        self.horizon = horizon
        self.noise = noise
        self.position_jitter = position_jitter
        self.speed_jitter = speed_jitter
        self.warmup_steps = warmup_steps
        self.collision_penalty = collision_penalty
        self.accel_cost = accel_cost
        self.idm = idm
        names = ["ego_position"] + [f"rel_position_{i}" for i in range(1, self.n)]
        names += ["ego_speed"] + [f"speed_{i}" for i in range(1, self.n)]
        self.spec = EnvSpec(2 * self.n, 1, (-self.max_accel,), (self.max_accel,), horizon, tuple(names), ("ego_accel",))
        self.odometer = np.zeros(self.n)  # unwrapped positions, ordered along the ring
        self.vel = np.zeros(self.n)
        self.steps = 0
        self.rng = np.random.default_rng(0)
        self._speed_sum = 0.0
        self.collided = False

    @property
    def equilibrium_speed(self) -> float:
        return idm_equilibrium_speed(self.length / self.n - self.vehicle_length, self.idm)

    @property
    def pos(self) -> np.ndarray:
        """Arc positions in ``[0, L)``."""
        return np.mod(self.odometer, self.length)

    def gaps(self) -> np.ndarray:
        """Bumper gaps to each leader; unwrapped so an overtake shows as a negative gap."""
        lead = np.roll(self.odometer, -1)
        lead[-1] += self.length
        return lead - self.odometer - self.vehicle_length

    def idm_accels(self) -> np.ndarray:
        gaps = self.gaps()
        if np.any(gaps <= 0):
            raise CollisionError("non-positive gap")
        dv = self.vel - np.roll(self.vel, -1)
        return idm_accel(self.vel, dv, gaps, self.idm)

    def observe(self) -> np.ndarray:
        rel = np.mod(self.pos[1:] - self.pos[0], self.length)
        return np.concatenate([[self.pos[0]], rel, self.vel]) / np.r_[
            np.full(self.n, self.length), np.full(self.n, self.idm.v0)
        ]

    def reset(self, seed=None) -> np.ndarray:
        self.rng = np.random.default_rng(seed)
        spacing = self.length / self.n
        jitter = self.rng.uniform(-self.position_jitter, self.position_jitter, self.n)
        self.odometer = np.arange(self.n) * spacing + jitter
        v = self.equilibrium_speed
        self.vel = np.maximum(v + self.rng.uniform(-self.speed_jitter, self.speed_jitter, self.n), 0.0)
        for _ in range(self.warmup_steps):
            self._advance(self.idm_accels())
        self.steps = 0
        self._speed_sum = 0.0
        self.collided = False
        return self.observe()

    def _advance(self, accel):
        if self.noise > 0:
            accel = accel + self.rng.normal(0.0, self.noise, self.n)
        self.vel = np.maximum(self.vel + accel * self.dt, 0.0)
        self.odometer = self.odometer + self.vel * self.dt

    def ego_idm_accel(self) -> float:
        """Acceleration the ego would apply if it were a human (IDM) driver."""
        return float(self.idm_accels()[0])

    def step(self, action):
        ego = float(np.clip(np.asarray(action, float).reshape(-1)[0], -self.max_accel, self.max_accel))
        accel = self.idm_accels()
        accel[0] = ego
        # the ego's command is applied without noise
        noise = self.rng.normal(0.0, self.noise, self.n) if self.noise > 0 else np.zeros(self.n)
        noise[0] = 0.0
        self.vel = np.maximum(self.vel + (accel + noise) * self.dt, 0.0)
        self.odometer = self.odometer + self.vel * self.dt
        self.steps += 1
        mean_speed = float(self.vel.mean())
        self._speed_sum += mean_speed
        a_norm = ego / self.max_accel
        reward = mean_speed - self.accel_cost * a_norm**2
        collided = bool(np.any(self.gaps() <= 0))
        if collided:
            self.collided = True
            reward -= self.collision_penalty
        truncated = not collided and self.steps >= self.horizon
        info = {"truncated": truncated, "collision": collided, "mean_speed": mean_speed}
        return self.observe(), reward, collided or truncated, info

    def episode_summary(self) -> dict:
        return {"mean_speed": self._speed_sum / max(self.steps, 1), "collision": self.collided}

    def idm_closed_loop(self, seed=None) -> dict:
        """Episode summary when the ego is an IDM driver with noise like the rest."""
        self.reset(seed=seed)
        while self.steps < self.horizon:
            try:
                accel = self.idm_accels()
            except CollisionError:
                self.collided = True
                break
            self._advance(accel)
            self.steps += 1
            self._speed_sum += float(self.vel.mean())
        return self.episode_summary()

    def trace_row(self):
        row = {f"pos_{i}": p for i, p in enumerate(self.pos)}
        row.update({f"speed_{i}": v for i, v in enumerate(self.vel)})
        return row


ENVIRONMENTS = {"cartpole": CartPole, "ring": RingRoad}


def make_env(name: str, **kwargs) -> Env:
    try:
        return ENVIRONMENTS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None


def rollout(env: Env, policy_fn, seed=None, trace_path=None):
    """Run one episode; ``policy_fn(obs) -> action`` in environment units.

    Returns ``(total_reward, steps)``; optionally writes a CSV trace with one
    row per step (state columns, action, reward).
    """
    obs = env.reset(seed=seed)
    rows, total, done = [], 0.0, False
    while not done:
        action = np.asarray(policy_fn(obs), float).reshape(-1)
        obs, reward, done, _ = env.step(action)
        total += reward
        if trace_path is not None:
            row = {"step": env.steps, **env.trace_row()}
            row.update({f"action_{i}": a for i, a in enumerate(action)})
            row["reward"] = reward
            rows.append(row)
    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    return total, env.steps


# --------------------------------------------------------------------------
# regression harness


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"{what} became non-finite at step {step}")
        self.step = step


def init_thresholds_from_data(model: IcctModel, X, rng=None) -> IcctModel:
    """Place every node's threshold at the median of the data that reaches it.

    Routing uses the node's current largest-magnitude feature, so the tree
    starts balanced over ``X`` instead of sending every sample to one leaf.
    """
    X = np.asarray(X, dtype=np.float64)
    n = model.config.num_nodes
    members = {0: np.arange(len(X))}
    for i in range(n):
        idx = members.get(i, np.array([], dtype=int))
        k = int(np.argmax(np.abs(model.W[i])))
        t = float(np.median(X[idx, k])) if idx.size else 0.0
        model.b[i] = model.W[i, k] * t
        go_true = model.alpha[i] * (model.W[i, k] * X[idx, k] - model.b[i]) >= 0
        members[2 * i + 1] = idx[go_true]
        members[2 * i + 2] = idx[~go_true]
    return model


def fit_mse(model: IcctModel, X, Y, steps: int, lr: float, batch_size=None, rng=None) -> IcctModel:
    """Adam on the mean squared error of the runtime mean, in place.

    Gradients reach every parameter through the straight-through path.
    ``batch_size=None`` uses the full data set each step.
    """
    from .policy import Adam

    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64).reshape(len(X), model.config.action_dim)
    opt = Adam(model.params, lr=lr)
    for step in range(steps):
        if batch_size is None or batch_size >= len(X):
            xb, yb = X, Y
        else:
            idx = rng.integers(0, len(X), batch_size)
            xb, yb = X[idx], Y[idx]
        tape = Tape()
        pv = model.param_values(tape)
        mean, _, _ = model.distribution(tape, pv, xb)
        loss = ((mean - yb) * (mean - yb)).mean()
        penalty = model.penalty(tape, pv)
        if penalty is not None:
            loss = loss + penalty
        if not np.isfinite(loss.data):
            raise TrainingDivergedError(step, "regression MSE")
        tape.backward(loss)
        opt.step({k: tape.grad(v) for k, v in pv.items()})
    return model


def regression_fit(
    config: IcctConfig,
    f,
    samples: int = 512,
    steps: int = 3000,
    lr: float = 0.01,
    seed: int = 0,
    test_samples: int = 2000,
):
    """Fit an ICCT's runtime mean to ``f`` on ``[0, 1]^n`` by Adam on MSE.

    Returns ``(model, held_out_mse)``.
    """
    if config.input_dim > 4:
        raise ValueError("regression_fit supports input_dim <= 4")
    if samples < 100:
        raise ValueError("regression_fit needs at least 100 samples")
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, (samples, config.input_dim))
    Y = np.asarray(f(X), dtype=np.float64).reshape(samples, config.action_dim)
    model = IcctModel.init(config, rng)
    init_thresholds_from_data(model, X)
    fit_mse(model, X, Y, steps, lr)
    Xt = rng.uniform(0.0, 1.0, (test_samples, config.input_dim))
    Yt = np.asarray(f(Xt), dtype=np.float64).reshape(test_samples, config.action_dim)
    mse = float(np.mean((model.mean_action(Xt) - Yt) ** 2))
    if not np.isfinite(mse):
        raise TrainingDivergedError(steps, "held-out MSE")
    return model, mse
