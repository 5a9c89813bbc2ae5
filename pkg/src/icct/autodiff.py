"""Minimal define-by-run reverse-mode autodiff over dense float64 arrays.

A :class:`Tape` records every operation of one forward pass.  Calling
:meth:`Tape.backward` walks the records in reverse and accumulates exact
vector-Jacobian products into one gradient slot per record.

The straight-through primitives (:func:`diff_argmax`, :func:`diff_topk`,
:func:`gumbel_softmax_argmax`) produce exactly one-/k-hot forward values
while routing gradients through the softmax relaxation.

Example
-------
>>> tape = Tape()
>>> x = tape.param(2.0)
>>> y = tape.param(3.0)
>>> tape.backward(x * y)
>>> float(tape.grad(x)), float(tape.grad(y))
(3.0, 2.0)
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "InvalidParameterError",
    "Tape",
    "Value",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "dot",
    "scale",
    "abs_",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "softplus",
    "square",
    "sum_",
    "mean",
    "concat",
    "stack",
    "reshape",
    "take",
    "transpose",
    "clip",
    "minimum",
    "stop_grad",
    "straight_through",
    "softmax",
    "one_hot_argmax",
    "diff_argmax",
    "diff_topk",
    "gumbel_softmax_argmax",
    "sample_gumbel",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class InvalidParameterError(ValueError):
    """A scalar or structural argument is outside its valid range."""


class _Node:
    __slots__ = ("op", "inputs", "value", "vjp")

    def __init__(self, op, inputs, value, vjp):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.vjp = vjp


class Tape:
    """Append-only record of one forward pass.

    Parameters
    ----------
    grad_enabled : bool
        When False, operations compute values only and nothing can be
        differentiated.  Used for target networks and rollouts.
    """

    def __init__(self, grad_enabled: bool = True):
        self.grad_enabled = grad_enabled
        self.nodes: list[_Node] = []
        self.grads: list[np.ndarray | None] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, op, value, inputs=(), vjp=None, requires_grad=False):
        self.nodes.append(_Node(op, inputs, value, vjp))
        self.grads.append(None)
        return Value(self, len(self.nodes) - 1, value, requires_grad)

    def constant(self, data) -> "Value":
        return self._push("const", np.asarray(data, dtype=np.float64))

    def param(self, data) -> "Value":
        """Register a differentiable leaf."""
        return self._push(
            "param", np.asarray(data, dtype=np.float64), requires_grad=self.grad_enabled
        )

    def wrap(self, x) -> "Value":
        if isinstance(x, Value):
            if x.tape is not self:
                raise ValueError("Value belongs to a different tape")
            return x
        return self.constant(x)

    def backward(self, root: "Value", seed=None) -> None:
        """Accumulate d(root)/d(node) into every gradient slot."""
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if seed is None:
            seed = np.ones_like(root.data)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != root.data.shape:
            raise ShapeError(f"seed shape {seed.shape} != root shape {root.data.shape}")
        grads = self.grads
        for i in range(len(grads)):
            grads[i] = None
        grads[root.index] = seed
        nodes = self.nodes
        for i in range(root.index, -1, -1):
            g = grads[i]
            node = nodes[i]
            if g is None or node.vjp is None:
                continue
            parent_grads = node.vjp(g)
            for j, pg in zip(node.inputs, parent_grads):
                if pg is None:
                    continue
                if grads[j] is None:
                    grads[j] = pg
                else:
                    grads[j] = grads[j] + pg

    def grad(self, value: "Value") -> np.ndarray:
        g = self.grads[value.index]
        if g is None:
            return np.zeros_like(value.data)
        return g


class Value:
    """Handle to one tape record."""

    __slots__ = ("tape", "index", "data", "requires_grad")
    __array_priority__ = 100

    def __init__(self, tape: Tape, index: int, data: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.index = index
        self.data = data
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Value(op={self.tape.nodes[self.index].op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


# --------------------------------------------------------------------------
# helpers


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Value):
            return x.tape
    raise TypeError("at least one operand must be a Value")


def _needs(tape: Tape, *xs) -> bool:
    return tape.grad_enabled and any(x.requires_grad for x in xs)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op, a, b, fwd, ga, gb):
    tape = _tape_of(a, b)
    va, vb = isinstance(a, Value), isinstance(b, Value)
    if (va and a.tape is not tape) or (vb and b.tape is not tape):
        raise ValueError("operands belong to different tapes")
    ad = a.data if va else np.asarray(a, dtype=np.float64)
    bd = b.data if vb else np.asarray(b, dtype=np.float64)
    try:
        out = fwd(ad, bd)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {ad.shape} and {bd.shape} do not broadcast") from exc
    # raw-array operands are closed over instead of being recorded
    inputs = ((a.index,) if va else ()) + ((b.index,) if vb else ())
    ra = va and a.requires_grad
    rb = vb and b.requires_grad
    if not (tape.grad_enabled and (ra or rb)):
        return tape._push(op, out, inputs)
    sa, sb = ad.shape, bd.shape

    def vjp(g):
        grads = ()
        if va:
            grads += (_unbroadcast(ga(g, ad, bd, out), sa) if ra else None,)
        if vb:
            grads += (_unbroadcast(gb(g, ad, bd, out), sb) if rb else None,)
        return grads

    return tape._push(op, out, inputs, vjp, True)


def _unary(op, a, out, local):
    """``local(g)`` maps the output cotangent to the input cotangent."""
    tape = a.tape
    if not _needs(tape, a):
        return tape._push(op, out, (a.index,))
    return tape._push(op, out, (a.index,), lambda g: (local(g),), True)


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Value:
    return _binary("add", a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Value:
    return _binary("sub", a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Value:
    return _binary("mul", a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Value:
    return _binary(
        "div", a, b, np.divide, lambda g, x, y, o: g / y, lambda g, x, y, o: -g * o / y
    )


def minimum(a, b) -> Value:
    """Elementwise minimum; ties send the gradient to ``a``."""
    return _binary(
        "minimum",
        a,
        b,
        np.minimum,
        lambda g, x, y, o: g * (x <= y),
        lambda g, x, y, o: g * (x > y),
    )


def neg(a: Value) -> Value:
    return _unary("neg", a, -a.data, lambda g: -g)


def scale(a: Value, c: float) -> Value:
    c = float(c)
    return _unary("scale", a, a.data * c, lambda g: g * c)


def abs_(a: Value) -> Value:
    s = np.sign(a.data)
    return _unary("abs", a, np.abs(a.data), lambda g: g * s)


def sigmoid(a: Value) -> Value:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _unary("sigmoid", a, out, lambda g: g * out * (1.0 - out))


def tanh(a: Value) -> Value:
    out = np.tanh(a.data)
    return _unary("tanh", a, out, lambda g: g * (1.0 - out * out))


def relu(a: Value) -> Value:
    mask = a.data > 0
    return _unary("relu", a, a.data * mask, lambda g: g * mask)


def exp(a: Value) -> Value:
    out = np.exp(a.data)
    return _unary("exp", a, out, lambda g: g * out)


def log(a: Value) -> Value:
    x = a.data
    return _unary("log", a, np.log(x), lambda g: g / x)


def softplus(a: Value) -> Value:
    x = a.data
    out = np.logaddexp(0.0, x)
    return _unary("softplus", a, out, lambda g: g * np.exp(x - out))


def square(a: Value) -> Value:
    x = a.data
    return _unary("square", a, x * x, lambda g: 2.0 * g * x)


def clip(a: Value, lo: float, hi: float) -> Value:
    """Clamp values; gradient passes only where the input is inside [lo, hi]."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _unary("clip", a, np.clip(x, lo, hi), lambda g: g * inside)


def stop_grad(a: Value) -> Value:
    """Same value as ``a``; contributes nothing to any gradient."""
    return a.tape._push("stop_grad", a.data, (a.index,))


def straight_through(hard, soft: Value) -> Value:
    """Forward value ``hard``; backward is the identity onto ``soft``.

    Equivalent to ``hard + soft - stop_grad(soft)`` but with the forward
    value exactly equal to ``hard`` (no rounding from the add/subtract).
    """
    hard = np.asarray(hard.data if isinstance(hard, Value) else hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: {hard.shape} vs {soft.shape}")
    return _unary("straight_through", soft, hard, lambda g: g)


# --------------------------------------------------------------------------
# reductions and structure


def sum_(a: Value, axis=None, keepdims=False) -> Value:
    shape = a.data.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def local(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _unary("sum", a, np.asarray(out), local)


def prod(a: Value, axis: int = -1) -> Value:
    """Product along one axis.

    The gradient uses exclusive prefix and suffix products, so it stays
    exact when factors are exactly zero (hard routing indicators).
    """
    axis = axis % a.data.ndim
    out = np.prod(a.data, axis=axis)
    if not _needs(a.tape, a):
        return a.tape._push("prod", out, (a.index,))
    x = np.moveaxis(a.data, axis, -1)
    ones = np.ones(x.shape[:-1] + (1,))
    before = np.cumprod(np.concatenate([ones, x[..., :-1]], axis=-1), axis=-1)
    after = np.cumprod(np.concatenate([ones, x[..., :0:-1]], axis=-1), axis=-1)[..., ::-1]
    excl = np.moveaxis(before * after, -1, axis)
    return _unary("prod", a, out, lambda g: np.expand_dims(g, axis) * excl)


def mean(a: Value, axis=None, keepdims=False) -> Value:
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Value, shape) -> Value:
    old = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} into {shape}") from exc
    return _unary("reshape", a, out, lambda g: g.reshape(old))


def transpose(a: Value) -> Value:
    """Reverse the axes (matrix transpose for 2-D)."""
    return _unary("transpose", a, a.data.T, lambda g: g.T)


def take(a: Value, idx) -> Value:
    """Basic or fancy indexing; repeated indices accumulate in backward."""
    shape = a.data.shape
    out = np.asarray(a.data[idx])

    def local(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return full

    return _unary("take", a, out, local)


def concat(xs, axis=0) -> Value:
    tape = _tape_of(*xs)
    xs = [tape.wrap(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[x.shape for x in xs]}") from exc
    idx = tuple(x.index for x in xs)
    if not _needs(tape, *xs):
        return tape._push("concat", out, idx)
    splits = np.cumsum([x.data.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape._push("concat", out, idx, vjp, True)


def stack(xs, axis=0) -> Value:
    tape = _tape_of(*xs)
    xs = [tape.wrap(x) for x in xs]
    return concat([reshape(x, np.expand_dims(x.data, axis).shape) for x in xs], axis=axis)


def matmul(a, b) -> Value:
    """Matrix product with numpy semantics (1-D operands promoted)."""
    tape = _tape_of(a, b)
    a = tape.wrap(a)
    b = tape.wrap(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError("matmul: scalar operands are not allowed; use mul")
    if ad.shape[-1] != bd.shape[0 if bd.ndim == 1 else -2]:
        raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
    out = np.matmul(ad, bd)
    if not _needs(tape, a, b):
        return tape._push("matmul", out, (a.index, b.index))
    ra, rb = a.requires_grad, b.requires_grad

    def vjp(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return (g * bd if ra else None), (g * ad if rb else None)
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if ra:
            ga = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(ad.shape)
        if rb:
            gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape).reshape(bd.shape)
        return ga, gb

    return tape._push("matmul", out, (a.index, b.index), vjp, True)


def dense(x, W: Value, b: Value, relu: bool = False) -> Value:
    """Fused ``x @ W + b`` with optional ReLU; ``W`` and ``b`` may carry a leading stack axis."""
    tape = _tape_of(x, W, b)
    x, W, b = tape.wrap(x), tape.wrap(W), tape.wrap(b)
    xd, Wd, bd = x.data, W.data, b.data
    if xd.ndim < 2 or Wd.ndim < 2 or xd.shape[-1] != Wd.shape[-2]:
        raise ShapeError(f"dense: {xd.shape} @ {Wd.shape}")
    out = np.matmul(xd, Wd)
    out += bd
    if relu:
        np.maximum(out, 0.0, out=out)
    inputs = (x.index, W.index, b.index)
    if not _needs(tape, x, W, b):
        return tape._push("dense", out, inputs)
    rx, rW, rb = x.requires_grad, W.requires_grad, b.requires_grad

    def vjp(g):
        if relu:
            g = g * (out > 0)
        gx = _unbroadcast(np.matmul(g, np.swapaxes(Wd, -1, -2)), xd.shape) if rx else None
        gW = _unbroadcast(np.matmul(np.swapaxes(xd, -1, -2), g), Wd.shape) if rW else None
        gb = _unbroadcast(g, bd.shape) if rb else None
        return gx, gW, gb

    return tape._push("dense", out, inputs, vjp, True)


def dot(a, b) -> Value:
    """Inner product of two vectors."""
    tape = _tape_of(a, b)
    a = tape.wrap(a)
    b = tape.wrap(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: {a.shape} . {b.shape}")
    return matmul(a, b)


# --------------------------------------------------------------------------
# softmax and straight-through selection


def _check_tau(tau):
    if not np.isfinite(tau) or tau <= 0:
        raise InvalidParameterError(f"temperature must be positive, got {tau}")


def _softmax_np(q: np.ndarray, axis=-1) -> np.ndarray:
    m = np.max(q, axis=axis, keepdims=True)
    e = np.exp(q - m)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(q, tau: float = 1.0, axis: int = -1) -> Value:
    """Temperature softmax along ``axis`` with max-subtraction.

    Accepts a Value or a plain array; plain arrays return a numpy array.
    """
    _check_tau(tau)
    if not isinstance(q, Value):
        return _softmax_np(np.asarray(q, dtype=np.float64) / tau, axis)
    out = _softmax_np(q.data / tau, axis)

    def local(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True)) / tau

    return _unary("softmax", q, out, local)


def one_hot_argmax(q: np.ndarray, axis: int = -1) -> np.ndarray:
    """One-hot of argmax along ``axis``; ties go to the lowest index."""
    q = np.asarray(q)
    idx = np.expand_dims(np.argmax(q, axis=axis), axis)
    out = np.zeros(q.shape)
    np.put_along_axis(out, idx, 1.0, axis=axis)
    return out


def _check_nonempty(q, axis):
    if q.ndim == 0 or q.shape[axis] == 0:
        raise InvalidParameterError("argmax over an empty vector")


def diff_argmax(q: Value, axis: int = -1) -> Value:
    """Exact one-hot forward, softmax(q, tau=1) gradient backward."""
    _check_nonempty(q.data, axis)
    soft = softmax(q, 1.0, axis)
    return straight_through(one_hot_argmax(q.data, axis), soft)


def _masked_topk(q: Value, k: int, axis: int, tau: float, noise) -> Value:
    n = q.shape[axis]
    if not 0 <= k <= n:
        raise InvalidParameterError(f"k={k} outside [0, {n}]")
    tape = q.tape
    if k == 0:
        return tape.constant(np.zeros(q.shape))
    logits = q if noise is None else add(q, noise)
    mask = np.zeros(q.shape)
    total = None
    for _ in range(k):
        masked = logits if not mask.any() else add(logits, np.where(mask > 0, -np.inf, 0.0))
        soft = softmax(masked, tau, axis)
        hard = one_hot_argmax(masked.data, axis)
        h = straight_through(hard, soft)
        total = h if total is None else add(total, h)
        mask = mask + hard
    return total


def diff_topk(q: Value, k: int, axis: int = -1) -> Value:
    """k-hot straight-through selector built from k masked diff_argmax rounds.

    Entries already selected are masked to -inf for later rounds, so the
    gradient is the sum of the per-round softmax gradients.
    """
    _check_nonempty(q.data, axis)
    if not 1 <= k <= q.shape[axis]:
        raise InvalidParameterError(f"k={k} outside [1, {q.shape[axis]}]")
    return _masked_topk(q, k, axis, 1.0, None)


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    # rng.random is in [0, 1); keep away from log(0)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0)
    return -np.log(-np.log(u))


def gumbel_softmax_argmax(
    q: Value, tau: float = 1.0, rng: np.random.Generator | None = None, axis: int = -1, noise=None, k: int = 1
) -> Value:
    """Straight-through Gumbel-softmax selection of ``k`` entries.

    ``noise`` overrides sampling (pass zeros for the noise-free case).
    The hard value is the (top-k) argmax of ``(q + g) / tau``.
    """
    _check_tau(tau)
    _check_nonempty(q.data, axis)
    if noise is None:
        if rng is None:
            raise InvalidParameterError("gumbel_softmax_argmax needs rng or noise")
        noise = sample_gumbel(rng, q.shape)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != q.shape:
        raise ShapeError(f"noise shape {noise.shape} != {q.shape}")
    return _masked_topk(q, k, axis, tau, noise)
