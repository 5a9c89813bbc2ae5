"""Interpretable continuous control trees.

An ICCT is a symmetric binary tree of ``N_l - 1`` decision nodes and
``N_l`` leaf controllers.  During both training and deployment every node
tests a single feature against a threshold and routes each input to exactly
one leaf; gradients reach all parameters through straight-through selectors
from :mod:`icct.autodiff`.

Node ``i`` has children ``2i + 1`` (true / left) and ``2i + 2`` (false /
right).  Indices ``>= N_l - 1`` are leaves, numbered left to right.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import InvalidParameterError, Tape, Value

VARIANTS = ("icct", "icct_static", "icct_complete", "cddt", "cddt_controllers")
ARGMAX_MODES = ("straight_through", "gumbel")

LOG_STD_MIN = float(np.log(1e-6))
LOG_STD_MAX = float(np.log(10.0))

PARAM_NAMES = ("W", "b", "alpha", "beta", "theta", "phi", "log_std")


class InvalidInputError(ValueError):
    """Input vector is non-finite or has the wrong length."""


class InvalidModelError(ValueError):
    """Model parameters are non-finite or inconsistent with the config."""


class InvalidModeError(ValueError):
    """Operation is not defined for this model variant."""


class DegenerateNodeError(ValueError):
    """A crisp node has a zero effective weight and no threshold."""

    def __init__(self, node_index: int, reason: str = "selected weight is zero"):
        super().__init__(f"node {node_index}: {reason}")
        self.node_index = node_index


@dataclass(frozen=True)
class IcctConfig:
    num_leaves: int
    input_dim: int
    action_dim: int = 1
    leaf_sparsity: int | None = None
    variant: str = "icct"
    argmax_mode: str = "straight_through"
    l1_leaf_penalty: float = 0.0
    gumbel_tau: float = 1.0

    def __post_init__(self):
        n, m = self.num_leaves, self.input_dim
        if self.variant not in VARIANTS:
            raise InvalidParameterError(f"unknown variant {self.variant!r}")
        if self.argmax_mode not in ARGMAX_MODES:
            raise InvalidParameterError(f"unknown argmax_mode {self.argmax_mode!r}")
        if n < 2 or n & (n - 1):
            raise InvalidParameterError(f"num_leaves must be a power of two >= 2, got {n}")
        if m < 1 or self.action_dim < 1:
            raise InvalidParameterError("input_dim and action_dim must be positive")
        e = self.leaf_sparsity
        if e is None:
            e = {"icct": 1, "icct_static": 0, "icct_complete": m, "cddt": 0, "cddt_controllers": m}[
                self.variant
            ]
            object.__setattr__(self, "leaf_sparsity", min(e, m))
            e = self.leaf_sparsity
        if not 0 <= e <= m:
            raise InvalidParameterError(f"leaf_sparsity {e} outside [0, {m}]")
        expected = {"icct_static": 0, "icct_complete": m, "cddt": 0, "cddt_controllers": m}
        if self.variant in expected and e != expected[self.variant]:
            raise InvalidParameterError(
                f"variant {self.variant} requires leaf_sparsity={expected[self.variant]}"
            )
        if self.variant == "icct" and not 0 < e < m:
            raise InvalidParameterError(
                "variant icct requires 0 < leaf_sparsity < input_dim; "
                "use icct_static or icct_complete for the extremes"
            )
        if self.l1_leaf_penalty < 0:
            raise InvalidParameterError("l1_leaf_penalty must be nonnegative")
        if self.gumbel_tau <= 0:
            raise InvalidParameterError("gumbel_tau must be positive")

    @property
    def num_nodes(self) -> int:
        return self.num_leaves - 1

    @property
    def depth(self) -> int:
        return int(np.log2(self.num_leaves))

    @property
    def fuzzy(self) -> bool:
        return self.variant.startswith("cddt")

    @property
    def leaf_kind(self) -> str:
        """'static', 'sparse' or 'dense'."""
        if self.variant in ("icct_static", "cddt"):
            return "static"
        if self.variant == "icct":
            return "sparse"
        return "dense"

    def replace(self, **changes) -> "IcctConfig":
        if "variant" in changes and "leaf_sparsity" not in changes:
            changes["leaf_sparsity"] = None
        return dataclasses.replace(self, **changes)


def count_params(config: IcctConfig) -> int:
    """Active parameter count of a deployed model (per-variant formula)."""
    n, m, d, e = config.num_leaves, config.input_dim, config.action_dim, config.leaf_sparsity
    v = config.variant
    if v == "icct":
        return 3 * (n - 1) + (2 * e + 1) * d * n
    if v == "icct_static":
        return 3 * (n - 1) + d * n
    if v == "icct_complete":
        return 3 * (n - 1) + (m + 1) * d * n
    if v == "cddt":
        return (m + 2) * (n - 1) + d * n
    if v == "cddt_controllers":
        return (m + 2) * (n - 1) + (m + 1) * d * n
    raise InvalidParameterError(f"unknown variant {v!r}")


def count_trainable(config: IcctConfig) -> int:
    """Every stored number the optimizer touches, inactive ones included."""
    n, m, d = config.num_leaves, config.input_dim, config.action_dim
    nodes = (n - 1) * (m + 2)
    kind = config.leaf_kind
    per_action = {"static": m, "sparse": 3 * m, "dense": 2 * m}[kind] + 1
    return nodes + n * d * per_action


# --------------------------------------------------------------------------
# structural views


@dataclass
class DecisionNode:
    w: np.ndarray
    b: float
    alpha: float


@dataclass
class LeafController:
    beta: np.ndarray  # (d_a, m)
    theta: np.ndarray  # (d_a, m)
    phi: np.ndarray  # (d_a, m)
    log_std: np.ndarray  # (d_a,)


def leaf_paths(num_leaves: int) -> list[list[tuple[int, bool]]]:
    """Root-to-leaf ``(node, went_true)`` pairs for every leaf, left to right."""
    depth = int(np.log2(num_leaves))
    paths = []
    for leaf in range(num_leaves):
        node, path = 0, []
        for level in range(depth - 1, -1, -1):
            went_true = not (leaf >> level) & 1
            path.append((node, went_true))
            node = 2 * node + (1 if went_true else 2)
        paths.append(path)
    return paths


def _path_tables(num_leaves):
    paths = leaf_paths(num_leaves)
    nodes = np.array([[n for n, _ in p] for p in paths], dtype=np.intp)
    left = np.array([[t for _, t in p] for p in paths], dtype=bool)
    return nodes, left


@dataclass
class IcctModel:
    """Parameters of one tree; arrays are shared with the optimizer."""

    config: IcctConfig
    W: np.ndarray  # (n_nodes, m)
    b: np.ndarray  # (n_nodes,)
    alpha: np.ndarray  # (n_nodes,)
    beta: np.ndarray  # (N_l, d_a, m)
    theta: np.ndarray  # (N_l, d_a, m)
    phi: np.ndarray  # (N_l, d_a, m)
    log_std: np.ndarray  # (N_l, d_a)
    feature_names: list[str] | None = None
    action_names: list[str] | None = None
    _tables: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        c = self.config
        n, m, d = c.num_nodes, c.input_dim, c.action_dim
        shapes = {
            "W": (n, m),
            "b": (n,),
            "alpha": (n,),
            "beta": (c.num_leaves, d, m),
            "theta": (c.num_leaves, d, m),
            "phi": (c.num_leaves, d, m),
            "log_std": (c.num_leaves, d),
        }
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise InvalidModelError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)
        self._tables = _path_tables(c.num_leaves)

    @classmethod
    def init(cls, config: IcctConfig, rng: np.random.Generator, **names) -> "IcctModel":
        n, m, d, L = config.num_nodes, config.input_dim, config.action_dim, config.num_leaves
        return cls(
            config=config,
            W=rng.uniform(-0.1, 0.1, (n, m)),
            b=np.zeros(n),
            alpha=np.ones(n),
            beta=rng.uniform(-0.1, 0.1, (L, d, m)),
            theta=rng.uniform(-1.0, 1.0, (L, d, m)),
            phi=np.zeros((L, d, m)),
            log_std=np.full((L, d), -0.5),
            **names,
        )

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "IcctModel":
        return dataclasses.replace(self, **{k: v.copy() for k, v in self.params.items()})

    def node(self, i: int) -> DecisionNode:
        return DecisionNode(self.W[i], float(self.b[i]), float(self.alpha[i]))

    def leaf(self, d: int) -> LeafController:
        return LeafController(self.beta[d], self.theta[d], self.phi[d], self.log_std[d])

    def check_finite(self):
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise InvalidModelError(f"parameter {k} has non-finite entries")

    # ------------------------------------------------------------------ tape

    def distribution(self, tape: Tape, pv: dict[str, Value], X, rng=None):
        """Batched mean and log-std of the action distribution.

        ``pv`` maps parameter names to tape Values; ``X`` is ``(B, m)``.
        Returns ``(mean, log_std, leaf_index)`` with shapes ``(B, d_a)``,
        ``(B, d_a)`` and ``(B,)``.
        """
        c = self.config
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != c.input_dim:
            raise InvalidInputError(f"expected inputs of shape (B, {c.input_dim}), got {X.shape}")
        gumbel = c.argmax_mode == "gumbel" and rng is not None
        P = self.path_probabilities(tape, pv, X, rng if gumbel else None)
        leaf_mean = self._leaf_means(tape, pv, X, rng if gumbel else None)
        if leaf_mean.ndim == 2:  # static leaves: (N_l, d_a)
            mean = ad.matmul(P, leaf_mean)
        else:
            mean = (ad.reshape(P, (X.shape[0], c.num_leaves, 1)) * leaf_mean).sum(axis=1)
        log_std = ad.matmul(P, ad.clip(pv["log_std"], LOG_STD_MIN, LOG_STD_MAX))
        return mean, log_std, np.argmax(P.data, axis=1)

    def penalty(self, tape: Tape, pv: dict[str, Value]):
        if self.config.l1_leaf_penalty > 0:
            return ad.scale(ad.abs_(pv["beta"]).sum(), self.config.l1_leaf_penalty)
        return None

    def node_outcomes(self, tape, pv, X, rng=None) -> Value:
        """Probability (fuzzy) or straight-through indicator (crisp) of the true branch, ``(B, n)``."""
        c = self.config
        W, b, alpha = pv["W"], pv["b"], pv["alpha"]
        if c.fuzzy:
            return ad.sigmoid(alpha * (ad.matmul(X, ad.transpose(W)) - b))
        absW = ad.abs_(W)
        if rng is not None:
            z = ad.gumbel_softmax_argmax(absW, c.gumbel_tau, rng)
        else:
            z = ad.diff_argmax(absW)
        pre = alpha * (ad.matmul(X, ad.transpose(z * W)) - b)
        if rng is not None:
            g = ad.sample_gumbel(rng, pre.shape + (2,))
            pre = ad.scale(pre + (g[..., 0] - g[..., 1]), 1.0 / c.gumbel_tau)
        # softmax([z, 0])[0] == sigmoid(z); ties (z == 0) take the true branch
        return ad.straight_through(pre.data >= 0, ad.sigmoid(pre))

    def path_probabilities(self, tape, pv, X, rng=None) -> Value:
        """Reach probability of every leaf, ``(B, N_l)``; one-hot for crisp variants."""
        y = self.node_outcomes(tape, pv, X, rng)
        nodes, left = self._tables
        n = self.config.num_nodes
        # column j < n is y_j, column n + j is 1 - y_j
        both = ad.concat([y, 1.0 - y], axis=1)
        factors = ad.take(both, (slice(None), np.where(left, nodes, nodes + n)))
        return ad.prod(factors, axis=2)

    def _leaf_means(self, tape, pv, X, rng=None) -> Value:
        c = self.config
        kind = c.leaf_kind
        beta, phi = pv["beta"], pv["phi"]
        if kind == "static":
            return phi.sum(axis=2)
        if kind == "sparse":
            abs_theta = ad.abs_(pv["theta"])
            if rng is not None:
                u = ad.gumbel_softmax_argmax(abs_theta, c.gumbel_tau, rng, k=c.leaf_sparsity)
            else:
                u = ad.diff_topk(abs_theta, c.leaf_sparsity)
            coef = (u * beta) * u
            intercept = (u * phi).sum(axis=2)
        else:
            coef = beta
            intercept = phi.sum(axis=2)
        L, d, m = c.num_leaves, c.action_dim, c.input_dim
        # multiply-and-sum (not BLAS) so SimpleLeaf.evaluate reproduces it bitwise
        B = X.shape[0]
        lin = (ad.reshape(tape.constant(X), (B, 1, m)) * ad.reshape(coef, (1, L * d, m))).sum(axis=2)
        return ad.reshape(lin, (B, L, d)) + intercept

    def param_values(self, tape: Tape) -> dict[str, Value]:
        return {k: tape.param(v) for k, v in self.params.items()}

    # ------------------------------------------------------------ numpy side

    def mean_action(self, X) -> np.ndarray:
        """Pre-squash runtime means for a batch, computed without gradients."""
        tape = Tape(grad_enabled=False)
        mean, _, _ = self.distribution(tape, self.param_values(tape), np.atleast_2d(X))
        return mean.data

    def route(self, X) -> np.ndarray:
        """Crisp leaf index for each row of ``X``."""
        tape = Tape(grad_enabled=False)
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.argmax(self.path_probabilities(tape, self.param_values(tape), X).data, axis=1)


# --------------------------------------------------------------------------
# single-node and single-leaf operations


def _check_x(x, m):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (m,):
        raise InvalidInputError(f"expected input of length {m}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("input contains non-finite values")
    return x


def node_crisp_value(tape: Tape, w: Value, b: Value, alpha: Value, x) -> tuple[Value, Value, int]:
    """Crisp single-feature node on the tape.

    Returns ``(probability, pre_activation, k)`` where the probability is
    ``sigmoid(alpha * (w[k] x[k] - b))`` and ``k = argmax |w|``.
    """
    x = _check_x(x, w.shape[0])
    z = ad.diff_argmax(ad.abs_(w))
    pre = alpha * (ad.dot(z * w, x) - b)
    return ad.sigmoid(pre), pre, int(np.argmax(z.data))


def node_crisp(node: DecisionNode, x) -> tuple[float, int]:
    tape = Tape(grad_enabled=False)
    prob, _, k = node_crisp_value(
        tape, tape.param(node.w), tape.param(node.b), tape.param(node.alpha), x
    )
    return float(prob.data), k


def outcome_crisp_value(z: Value) -> Value:
    """Branch indicator: first entry of diff_argmax([z, 0])."""
    if not np.all(np.isfinite(z.data)):
        raise InvalidInputError("pre-activation is not finite")
    v = ad.concat([ad.reshape(z, (1,)), np.zeros(1)])
    return ad.diff_argmax(v)[0]


def outcome_crisp(z: float) -> int:
    tape = Tape(grad_enabled=False)
    return int(outcome_crisp_value(tape.param(float(z))).data)


@dataclass
class SparseController:
    """Masked linear controller: ``coef @ x + intercept`` per action dim."""

    mask: np.ndarray  # (d_a, m) k-hot
    coef: np.ndarray  # (d_a, m)
    intercept: np.ndarray  # (d_a,)

    def __call__(self, x) -> np.ndarray:
        return self.coef @ np.asarray(x, dtype=np.float64) + self.intercept


def enforce_controller_sparsity(leaf: LeafController, e: int) -> SparseController:
    """Keep the ``e`` features with the largest ``|theta|`` per action dim.

    ``e == 0`` gives the static leaf whose mean is the summed intercept.
    """
    m = leaf.theta.shape[-1]
    if not 0 <= e <= m:
        raise InvalidParameterError(f"e={e} outside [0, {m}]")
    if e == 0:
        mask = np.zeros_like(leaf.theta)
        return SparseController(mask, np.zeros_like(leaf.beta), leaf.phi.sum(axis=-1))
    tape = Tape(grad_enabled=False)
    u = ad.diff_topk(ad.abs_(tape.param(leaf.theta)), e).data
    return SparseController(u, u * leaf.beta * u, (u * leaf.phi).sum(axis=-1))


# --------------------------------------------------------------------------
# whole-model operations


def act(model: IcctModel, x, training: bool = False, rng: np.random.Generator | None = None, low=-1.0, high=1.0):
    """Choose one action for observation ``x``.

    Returns ``(action, log_prob, leaf_index)``.  In training mode the action
    is a tanh-squashed Gaussian sample; otherwise ``tanh(mean)``.  Actions
    are affinely mapped from ``[-1, 1]`` to ``[low, high]``; ``log_prob`` is
    the density of the squashed ``[-1, 1]`` action.
    """
    from .policy import squashed_sample  # local: policy imports model

    model.check_finite()
    x = _check_x(x, model.config.input_dim)
    tape = Tape(grad_enabled=False)
    pv = model.param_values(tape)
    noise_rng = rng if (training and model.config.argmax_mode == "gumbel") else None
    mean, log_std, leaf = model.distribution(tape, pv, x[None, :], noise_rng)
    if training:
        if rng is None:
            raise InvalidParameterError("training mode needs an rng")
        eps = rng.standard_normal(mean.shape)
        a, logp = squashed_sample(mean, log_std, eps)
        a, logp = a.data[0], float(logp.data[0])
    else:
        a, logp = np.tanh(mean.data[0]), float("nan")
    low, high = np.asarray(low, dtype=float), np.asarray(high, dtype=float)
    return low + (a + 1.0) * 0.5 * (high - low), logp, int(leaf[0])


def fuzzy_forward(model: IcctModel, x) -> np.ndarray:
    """Mixture mean of a fuzzy (CDDT) tree at one input."""
    if not model.config.fuzzy:
        raise InvalidModeError("fuzzy_forward requires a cddt variant")
    x = _check_x(x, model.config.input_dim)
    return model.mean_action(x[None, :])[0]


def fuzzy_path_probabilities(model: IcctModel, X) -> np.ndarray:
    if not model.config.fuzzy:
        raise InvalidModeError("fuzzy path probabilities require a cddt variant")
    tape = Tape(grad_enabled=False)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return model.path_probabilities(tape, model.param_values(tape), X).data


def post_hoc_crispify(model: IcctModel) -> IcctModel:
    """Single-feature, hard-threshold copy of a fuzzy tree.

    Each node keeps only its largest-magnitude weight; routing becomes the
    sign test of ``alpha * (w_k x_k - b)``.  Leaves are unchanged.
    """
    c = model.config
    if not c.fuzzy:
        raise InvalidModeError("post_hoc_crispify requires a cddt variant")
    variant = "icct_static" if c.variant == "cddt" else "icct_complete"
    out = model.copy()
    out.config = c.replace(variant=variant)
    k = np.argmax(np.abs(out.W), axis=1)
    W = np.zeros_like(out.W)
    W[np.arange(len(k)), k] = out.W[np.arange(len(k)), k]
    out.W = W
    return out


# --------------------------------------------------------------------------
# simple form


@dataclass(frozen=True)
class SimpleNode:
    feature: int
    threshold: float
    comparator: str  # ">" or "<"

    def test(self, x) -> bool:
        v = x[self.feature]
        return bool(v > self.threshold) if self.comparator == ">" else bool(v < self.threshold)


@dataclass(frozen=True)
class SimpleLeaf:
    terms: tuple  # per action dim: tuple of (feature, coefficient)
    intercepts: tuple  # per action dim

    def coefficients(self, input_dim: int) -> np.ndarray:
        coef = np.zeros((len(self.terms), input_dim))
        for a, terms in enumerate(self.terms):
            for f, c in terms:
                coef[a, f] = c
        return coef

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (self.coefficients(x.shape[0]) * x).sum(axis=1) + np.asarray(self.intercepts)


@dataclass(frozen=True)
class SimpleFormTree:
    nodes: tuple
    leaves: tuple
    input_dim: int
    action_dim: int

    @property
    def num_leaves(self):
        return len(self.leaves)

    def route(self, x) -> int:
        i, n = 0, len(self.nodes)
        while i < n:
            i = 2 * i + 1 if self.nodes[i].test(x) else 2 * i + 2
        return i - n

    def evaluate(self, x) -> tuple[np.ndarray, int]:
        x = np.asarray(x, dtype=np.float64)
        leaf = self.route(x)
        return self.leaves[leaf].evaluate(x), leaf


def to_simple_form(model: IcctModel) -> SimpleFormTree:
    """Reduce every crisp node to ``x_k > b / w_k`` (or ``<`` when ``alpha * w_k < 0``)."""
    model.check_finite()
    c = model.config
    nodes = []
    for i in range(c.num_nodes):
        w, b, alpha = model.W[i], model.b[i], model.alpha[i]
        k = int(np.argmax(np.abs(w)))
        s = alpha * w[k]
        if w[k] == 0 or s == 0:
            raise DegenerateNodeError(i, "selected weight is zero" if w[k] == 0 else "alpha is zero")
        nodes.append(SimpleNode(k, float(b / w[k]), ">" if s > 0 else "<"))
    leaves = []
    e = c.leaf_sparsity if c.leaf_kind == "sparse" else (0 if c.leaf_kind == "static" else c.input_dim)
    for d in range(c.num_leaves):
        leaf = model.leaf(d)
        if c.leaf_kind == "dense":
            coef, intercept = leaf.beta, leaf.phi.sum(axis=-1)
            mask = np.ones_like(coef)
        else:
            ctrl = enforce_controller_sparsity(leaf, e)
            coef, intercept, mask = ctrl.coef, ctrl.intercept, ctrl.mask
        terms = tuple(
            tuple((int(j), float(coef[a, j])) for j in np.flatnonzero(mask[a]))
            for a in range(c.action_dim)
        )
        leaves.append(SimpleLeaf(terms, tuple(float(v) for v in intercept)))
    return SimpleFormTree(tuple(nodes), tuple(leaves), c.input_dim, c.action_dim)
