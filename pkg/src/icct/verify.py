"""Robustness verification of crisp trees via per-leaf bounding boxes.

Every leaf of a :class:`~icct.model.SimpleFormTree` owns an axis-aligned
box of inputs.  Boxes are found by one depth-first pass, so questions about
perturbations or output ranges reduce to O(d) work per leaf.

Boundary convention: the false branch of ``x_k > c`` owns ``x_k == c``
(``x_k <= c``) and the false branch of ``x_k < c`` owns it as well
(``x_k >= c``), so the boxes partition the input space.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import IcctModel, SimpleFormTree, to_simple_form


class MalformedTreeError(ValueError):
    """Tree node/leaf counts or feature indices are inconsistent."""


class QueryError(ValueError):
    """A verification query is missing fields or has inconsistent shapes."""


@dataclass
class LeafBox:
    leaf: int
    lower: np.ndarray  # (m,), may be -inf
    upper: np.ndarray  # (m,), may be +inf
    lower_closed: np.ndarray  # (m,) bool
    upper_closed: np.ndarray  # (m,) bool
    coef: np.ndarray  # (d_a, m)
    intercept: np.ndarray  # (d_a,)

    @property
    def is_static(self) -> bool:
        return not np.any(self.coef)

    @property
    def is_empty(self) -> bool:
        gap = self.lower > self.upper
        pinch = (self.lower == self.upper) & ~(self.lower_closed & self.upper_closed)
        return bool(np.any(gap | pinch))

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=np.float64)
        above = np.where(self.lower_closed, x >= self.lower, x > self.lower)
        below = np.where(self.upper_closed, x <= self.upper, x < self.upper)
        return bool(np.all(above & below))

    def output(self, x) -> np.ndarray:
        return (self.coef * np.asarray(x, dtype=np.float64)).sum(axis=1) + self.intercept


def _as_tree(tree) -> SimpleFormTree:
    if isinstance(tree, IcctModel):
        return to_simple_form(tree)
    return tree


def extract_boxes(tree) -> list[LeafBox]:
    """Leaf boxes in leaf order, by depth-first interval splitting."""
    tree = _as_tree(tree)
    n, m = len(tree.nodes), tree.input_dim
    if len(tree.leaves) != n + 1 or n < 1:
        raise MalformedTreeError(f"{n} nodes need {n + 1} leaves, got {len(tree.leaves)}")
    for i, node in enumerate(tree.nodes):
        if not 0 <= node.feature < m or node.comparator not in (">", "<") or not np.isfinite(node.threshold):
            raise MalformedTreeError(f"node {i} is malformed: {node}")
    boxes: list[LeafBox | None] = [None] * (n + 1)
    lo0, hi0 = np.full(m, -np.inf), np.full(m, np.inf)
    lc0, hc0 = np.zeros(m, bool), np.zeros(m, bool)
    stack = [(0, lo0, hi0, lc0, hc0)]
    while stack:
        i, lo, hi, lc, hc = stack.pop()
        if i >= n:
            leaf = tree.leaves[i - n]
            boxes[i - n] = LeafBox(i - n, lo, hi, lc, hc, leaf.coefficients(m), np.asarray(leaf.intercepts, float))
            continue
        node = tree.nodes[i]
        k, c = node.feature, node.threshold
        # greater side: x_k > c (open) or x_k >= c (closed); lesser side the complement
        gt_closed = node.comparator == "<"
        greater = _tighten_lower(lo, lc, k, c, gt_closed), (hi, hc)
        lesser = (lo, lc), _tighten_upper(hi, hc, k, c, not gt_closed)
        true_side, false_side = (greater, lesser) if node.comparator == ">" else (lesser, greater)
        for child, ((l2, lc2), (h2, hc2)) in ((2 * i + 2, false_side), (2 * i + 1, true_side)):
            stack.append((child, l2, h2, lc2, hc2))
    return boxes


def _tighten_lower(lo, lc, k, c, closed):
    lo, lc = lo.copy(), lc.copy()
    if c > lo[k]:
        lo[k], lc[k] = c, closed
    elif c == lo[k]:
        lc[k] = lc[k] and closed
    return lo, lc


def _tighten_upper(hi, hc, k, c, closed):
    hi, hc = hi.copy(), hc.copy()
    if c < hi[k]:
        hi[k], hc[k] = c, closed
    elif c == hi[k]:
        hc[k] = hc[k] and closed
    return hi, hc


def point_to_box_distance(x, box: LeafBox) -> tuple[np.ndarray, float]:
    """Per-dimension excess and the L-infinity distance from ``x`` to the box.

    Each entry is 0 inside the interval, ``x_t - r_t`` above it and
    ``l_t - x_t`` below it; the distance is the maximum entry (the infimum
    over the box, so open faces count as reachable).
    """
    x = np.asarray(x, dtype=np.float64)
    if box.is_empty:
        return np.full(x.shape, np.inf), float("inf")
    vec = np.maximum(np.maximum(x - box.upper, box.lower - x), 0.0)
    return vec, float(vec.max()) if vec.size else 0.0


def _clip_box(box: LeafBox, clip):
    lo, hi = box.lower, box.upper
    if clip is not None:
        lo = np.maximum(lo, np.asarray(clip[0], float))
        hi = np.minimum(hi, np.asarray(clip[1], float))
    return lo, hi


def leaf_output_range(box: LeafBox, clip=None):
    """Per-action ``(low, high)`` of a leaf's output over ``box`` (closure) within ``clip``.

    Returns ``None`` when the clipped box is empty.  Linear leaves are
    monotone in every feature, so each end picks the interval endpoint
    matching the coefficient's sign.
    """
    lo, hi = _clip_box(box, clip)
    if box.is_empty or np.any(lo > hi):
        return None
    c = box.coef
    with np.errstate(invalid="ignore"):
        at_lo, at_hi = c * lo, c * hi
    at_lo = np.where(c == 0, 0.0, at_lo)
    at_hi = np.where(c == 0, 0.0, at_hi)
    low = np.minimum(at_lo, at_hi).sum(axis=1) + box.intercept
    high = np.maximum(at_lo, at_hi).sum(axis=1) + box.intercept
    return low, high


def _first_crossing(x, lo, hi, c, intercept, level, t0, upward):
    """Smallest ``t >= t0`` at which ``c . p`` over ``[lo, hi] ∩ [x - t, x + t]`` exceeds ``level``.

    ``upward`` asks for ``max > level``; otherwise for ``min < level``
    (handled by negating).  Returns ``inf`` when never reached.
    """
    if not upward:
        c, intercept, level = -c, -intercept, -level
    active = c != 0
    c, x, lo, hi = c[active], x[active], lo[active], hi[active]
    # moving coordinate j toward its better end; it stops at that end
    pos = c > 0
    stop = np.where(pos, hi - x, x - lo)  # t at which the coordinate saturates

    def value(t):
        p = np.where(pos, np.minimum(hi, x + t), np.maximum(lo, x - t))
        return intercept + float(c @ p)

    v0 = value(t0)
    if v0 > level:
        return t0
    order = np.argsort(stop)
    t, v = t0, v0
    slope = float(np.abs(c[stop > t0]).sum())
    for j in order:
        if stop[j] <= t0:
            continue
        if not np.isfinite(stop[j]):
            break
        v_next = v + slope * (stop[j] - t)
        if v_next > level and slope > 0:
            return t + (level - v) / slope
        t, v = stop[j], v_next
        slope -= abs(c[j])
    if slope > 0:
        return t + (level - v) / slope
    return float("inf")


@dataclass
class Perturbation:
    radius: float
    leaf: int | None
    point: np.ndarray | None


def min_adversarial_perturbation(tree, x, y_lower, y_upper, clip=None, boxes=None) -> Perturbation:
    """Smallest L-infinity change of ``x`` that moves the output outside ``[y_lower, y_upper]``.

    For a static leaf the cost is the distance from ``x`` to its box; for a
    linear leaf it is the smallest radius at which the leaf's output over
    the reachable part of its box leaves the interval.  The minimum over
    leaves is returned with the witness leaf and a point at (the infimum
    of) that radius.  ``radius`` is ``inf`` when no leaf can violate.
    """
    tree = _as_tree(tree)
    boxes = extract_boxes(tree) if boxes is None else boxes
    x = np.asarray(x, dtype=np.float64)
    y_lower = np.broadcast_to(np.asarray(y_lower, float), (tree.action_dim,))
    y_upper = np.broadcast_to(np.asarray(y_upper, float), (tree.action_dim,))
    out, leaf = tree.evaluate(x)
    if np.any(out < y_lower) or np.any(out > y_upper):
        return Perturbation(0.0, leaf, x.copy())
    best = Perturbation(float("inf"), None, None)
    for box in boxes:
        lo, hi = _clip_box(box, clip)
        if box.is_empty or np.any(lo > hi):
            continue
        _, t0 = point_to_box_distance(x, LeafBox(box.leaf, lo, hi, box.lower_closed, box.upper_closed, box.coef, box.intercept))
        if t0 >= best.radius:
            continue
        radius = float("inf")
        for a in range(tree.action_dim):
            c, b = box.coef[a], box.intercept[a]
            radius = min(
                radius,
                _first_crossing(x, lo, hi, c, b, y_upper[a], t0, True),
                _first_crossing(x, lo, hi, c, b, y_lower[a], t0, False),
            )
        if radius < best.radius:
            p = np.clip(x, np.maximum(lo, x - radius), np.minimum(hi, x + radius))
            best = Perturbation(radius, box.leaf, p)
    return best


@dataclass
class Verdict:
    verified: bool
    leaf: int | None = None
    action: int | None = None
    point: np.ndarray | None = None
    value: float | None = None
    box: LeafBox | None = None
    excluded: tuple = ()

    def to_dict(self) -> dict:
        if self.verified:
            return {"verdict": "verified", "excluded_leaves": list(self.excluded)}
        return {
            "verdict": "violated",
            "leaf": self.leaf,
            "action": self.action,
            "point": [float(v) for v in self.point],
            "value": float(self.value),
            "box": {"lower": [float(v) for v in self.box.lower], "upper": [float(v) for v in self.box.upper]},
        }


def verify_output_range(tree, input_lower, input_upper, y_lower, y_upper, boxes=None) -> Verdict:
    """Check that every output over the finite input box lies in ``[y_lower, y_upper]``.

    Returns the first violating leaf (largest excess) with the extremal
    corner that attains the out-of-range value.
    """
    tree = _as_tree(tree)
    clip = (np.asarray(input_lower, float), np.asarray(input_upper, float))
    if not (np.all(np.isfinite(clip[0])) and np.all(np.isfinite(clip[1]))):
        raise QueryError("input box must be finite")
    if np.any(clip[0] > clip[1]):
        raise QueryError("input box has lower > upper")
    y_lower = np.broadcast_to(np.asarray(y_lower, float), (tree.action_dim,))
    y_upper = np.broadcast_to(np.asarray(y_upper, float), (tree.action_dim,))
    boxes = extract_boxes(tree) if boxes is None else boxes
    worst, excluded = None, []
    for box in boxes:
        rng_ = leaf_output_range(box, clip)
        if rng_ is None:
            excluded.append(box.leaf)
            continue
        low, high = rng_
        lo, hi = _clip_box(box, clip)
        for a in range(tree.action_dim):
            c = box.coef[a]
            for excess, value, point in (
                (high[a] - y_upper[a], high[a], np.where(c > 0, hi, lo)),
                (y_lower[a] - low[a], low[a], np.where(c > 0, lo, hi)),
            ):
                if excess > 0 and (worst is None or excess > worst[0]):
                    worst = (excess, Verdict(False, box.leaf, a, point.astype(float), float(value), box))
    if worst is None:
        return Verdict(True, excluded=tuple(excluded))
    worst[1].excluded = tuple(excluded)
    return worst[1]


def output_hull(tree, input_lower, input_upper, boxes=None):
    """Per-action ``(low, high)`` over all leaves reachable inside the input box."""
    tree = _as_tree(tree)
    clip = (np.asarray(input_lower, float), np.asarray(input_upper, float))
    boxes = extract_boxes(tree) if boxes is None else boxes
    lows, highs = [], []
    for box in boxes:
        r = leaf_output_range(box, clip)
        if r is not None:
            lows.append(r[0])
            highs.append(r[1])
    return np.min(lows, axis=0), np.max(highs, axis=0)


def padded_hull(X, pad: float = 0.1):
    """Bounding box of observed inputs, widened by ``pad`` of its span per side."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return lo - pad * span, hi + pad * span


# --------------------------------------------------------------------------
# query documents


@dataclass
class VerificationQuery:
    model_path: str | None
    y_lower: np.ndarray
    y_upper: np.ndarray
    point: np.ndarray | None = None
    input_lower: np.ndarray | None = None
    input_upper: np.ndarray | None = None
    clip_lower: np.ndarray | None = None
    clip_upper: np.ndarray | None = None
    radius: float = 0.0


def _vector(doc, key, where):
    try:
        v = np.asarray(doc[key], dtype=np.float64)
    except KeyError:
        raise QueryError(f"{where}: missing field {key!r}") from None
    except (TypeError, ValueError):
        raise QueryError(f"{where}.{key} must be a list of numbers") from None
    if v.ndim != 1:
        raise QueryError(f"{where}.{key} must be a flat list")
    return v


def _interval(doc, key):
    if key not in doc:
        return None, None
    sub = doc[key]
    if not isinstance(sub, dict):
        raise QueryError(f"{key} must be an object with 'lower' and 'upper'")
    lo, hi = _vector(sub, "lower", key), _vector(sub, "upper", key)
    if lo.shape != hi.shape:
        raise QueryError(f"{key}: lower and upper lengths differ")
    if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or np.any(lo > hi):
        raise QueryError(f"{key}: needs lower <= upper")
    return lo, hi


def parse_query(doc: dict) -> VerificationQuery:
    """Validate a query document.

    Fields: ``model_path`` (optional), exactly one of ``point`` or
    ``input_box`` (``{"lower": [...], "upper": [...]}``), ``output_interval``
    (same shape, one entry per action; ``null`` means unbounded), and an
    optional ``clip_box`` domain for perturbation queries.  A perturbation
    query holds when ``r* > radius`` (``radius`` defaults to 0, i.e. the
    point itself satisfies the interval).
    """
    if not isinstance(doc, dict):
        raise QueryError("query must be a JSON object")
    known = {"model_path", "point", "input_box", "output_interval", "clip_box", "radius"}
    unknown = set(doc) - known
    if unknown:
        raise QueryError(f"unknown query fields: {sorted(unknown)}")
    if "output_interval" not in doc:
        raise QueryError("missing field 'output_interval'")
    oi = doc["output_interval"]
    if not isinstance(oi, dict):
        raise QueryError("output_interval must be an object")
    conv = lambda v, inf: np.array([inf if e is None else e for e in v], dtype=np.float64)
    try:
        y_lo, y_hi = conv(oi["lower"], -np.inf), conv(oi["upper"], np.inf)
    except KeyError as exc:
        raise QueryError(f"output_interval: missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError):
        raise QueryError("output_interval bounds must be lists of numbers or null") from None
    if y_lo.shape != y_hi.shape or np.any(y_lo > y_hi):
        raise QueryError("output_interval needs matching lengths and lower <= upper")
    has_point, has_box = "point" in doc, "input_box" in doc
    if has_point == has_box:
        raise QueryError("give exactly one of 'point' or 'input_box'")
    q = VerificationQuery(doc.get("model_path"), y_lo, y_hi)
    if has_point:
        q.point = _vector(doc, "point", "query")
        if not np.all(np.isfinite(q.point)):
            raise QueryError("point must be finite")
        r = doc.get("radius", 0.0)
        if isinstance(r, bool) or not isinstance(r, (int, float)) or not 0 <= r < np.inf:
            raise QueryError("radius must be a finite non-negative number")
        q.radius = float(r)
    else:
        if "radius" in doc:
            raise QueryError("radius applies to point queries only")
        q.input_lower, q.input_upper = _interval(doc, "input_box")
        if not (np.all(np.isfinite(q.input_lower)) and np.all(np.isfinite(q.input_upper))):
            raise QueryError("input_box must be finite")
    q.clip_lower, q.clip_upper = _interval(doc, "clip_box")
    return q


def run_query(tree, query: VerificationQuery) -> dict:
    """Answer a parsed query; the result's ``ok`` is False on a violation."""
    tree = _as_tree(tree)
    m, d = tree.input_dim, tree.action_dim
    if query.y_lower.shape != (d,):
        raise QueryError(f"output_interval needs {d} entries, got {query.y_lower.size}")
    if query.point is not None:
        if query.point.shape != (m,):
            raise QueryError(f"point needs {m} entries, got {query.point.size}")
        clip = None
        if query.clip_lower is not None:
            if query.clip_lower.shape != (m,):
                raise QueryError(f"clip_box needs {m} entries")
            clip = (query.clip_lower, query.clip_upper)
        res = min_adversarial_perturbation(tree, query.point, query.y_lower, query.y_upper, clip)
        return {
            "kind": "perturbation",
            "ok": res.radius > query.radius,
            "radius": query.radius,
            "r_star": res.radius,
            "witness_leaf": res.leaf,
            "witness_point": None if res.point is None else [float(v) for v in res.point],
        }
    if query.input_lower.shape != (m,):
        raise QueryError(f"input_box needs {m} entries, got {query.input_lower.size}")
    verdict = verify_output_range(tree, query.input_lower, query.input_upper, query.y_lower, query.y_upper)
    out = {"kind": "output_range", "ok": verdict.verified}
    out.update(verdict.to_dict())
    return out
