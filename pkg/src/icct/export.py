"""Model files and human-readable renderings.

A model file is one UTF-8 JSON document.  Every real number is stored as a
hex-float string (``float.hex``) so ``load(save(m))`` is bitwise exact::

    {"format_version": 1, "kind": "icct",
     "config": {"num_leaves": 4, "input_dim": 3, ...},
     "nodes":  [{"w": [...m], "b": "0x...", "alpha": "0x..."}, ...],
     "leaves": [[{"beta": [...m], "theta": [...m], "phi": [...m],
                  "log_std": "0x..."}, ...d_a], ...N_l],
     "feature_names": [...] | null, "action_names": [...] | null}

MLP baselines use ``"kind": "mlp"`` with ``input_dim``, ``action_dim``,
``hidden`` and a ``params`` map of name to ``{"shape", "values"}``.

Renderings work on the simple form: predicates ``feature > threshold`` (or
``<``) and per-leaf linear expressions, rounded to two decimals for display.
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .model import IcctConfig, IcctModel, SimpleFormTree, to_simple_form
from .policy import MlpActor

FORMAT_VERSION = 1

_NEGATE = {">": "≤", "<": "≥"}


class ModelFileError(ValueError):
    """Unreadable or inconsistent model file; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


# --------------------------------------------------------------------------
# hex-float helpers


def _hex(x) -> str:
    return float(x).hex()


def _hex_list(a) -> list:
    return [float(v).hex() for v in np.asarray(a, dtype=np.float64).ravel()]


def _unhex(v, field: str) -> float:
    if isinstance(v, str):
        try:
            return float.fromhex(v)
        except ValueError:
            raise ModelFileError(field, f"not a hex-float string: {v!r}") from None
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return float(v)
    raise ModelFileError(field, f"expected a number, got {type(v).__name__}")


def _unhex_list(v, length: int, field: str) -> np.ndarray:
    if not isinstance(v, list):
        raise ModelFileError(field, "expected an array")
    if len(v) != length:
        raise ModelFileError(field, f"length mismatch: expected {length} entries, got {len(v)}")
    return np.array([_unhex(x, f"{field}[{i}]") for i, x in enumerate(v)], dtype=np.float64)


def _get(doc: dict, key: str, field: str | None = None):
    if not isinstance(doc, dict):
        raise ModelFileError(field or key, "expected an object")
    if key not in doc:
        raise ModelFileError(field or key, "missing")
    return doc[key]


# --------------------------------------------------------------------------
# documents


def to_document(model) -> dict:
    """JSON-ready document for an ICCT/CDDT or MLP actor."""
    if isinstance(model, MlpActor):
        return {
            "format_version": FORMAT_VERSION,
            "kind": "mlp",
            "input_dim": model.input_dim,
            "action_dim": model.action_dim,
            "hidden": list(model.hidden),
            "params": {k: {"shape": list(v.shape), "values": _hex_list(v)} for k, v in model.params.items()},
        }
    c = model.config
    nodes = [{"w": _hex_list(model.W[i]), "b": _hex(model.b[i]), "alpha": _hex(model.alpha[i])} for i in range(c.num_nodes)]
    leaves = [
        [
            {
                "beta": _hex_list(model.beta[d, a]),
                "theta": _hex_list(model.theta[d, a]),
                "phi": _hex_list(model.phi[d, a]),
                "log_std": _hex(model.log_std[d, a]),
            }
            for a in range(c.action_dim)
        ]
        for d in range(c.num_leaves)
    ]
    config = dataclasses.asdict(c)
    for k, v in config.items():
        if isinstance(v, float):
            config[k] = _hex(v)
    return {
        "format_version": FORMAT_VERSION,
        "kind": "icct",
        "config": config,
        "nodes": nodes,
        "leaves": leaves,
        "feature_names": None if model.feature_names is None else list(model.feature_names),
        "action_names": None if model.action_names is None else list(model.action_names),
    }


def _names(doc, key, length):
    names = doc.get(key)
    if names is None:
        return None
    if not isinstance(names, list) or not all(isinstance(s, str) for s in names):
        raise ModelFileError(key, "expected an array of strings")
    if len(names) != length:
        raise ModelFileError(key, f"length mismatch: expected {length} entries, got {len(names)}")
    return names


def from_document(doc: dict):
    """Inverse of :func:`to_document`; raises :class:`ModelFileError` naming the bad field."""
    if not isinstance(doc, dict):
        raise ModelFileError("document", "expected a JSON object")
    version = _get(doc, "format_version")
    if version != FORMAT_VERSION:
        raise ModelFileError("format_version", f"unsupported version {version!r}, expected {FORMAT_VERSION}")
    kind = doc.get("kind", "icct")
    if kind == "mlp":
        return _mlp_from_document(doc)
    if kind != "icct":
        raise ModelFileError("kind", f"unknown model kind {kind!r}")
    raw = _get(doc, "config")
    if not isinstance(raw, dict):
        raise ModelFileError("config", "expected an object")
    fields = {f.name: f for f in dataclasses.fields(IcctConfig)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ModelFileError("config", f"unknown fields {sorted(unknown)}")
    kwargs = {}
    for k, v in raw.items():
        kwargs[k] = _unhex(v, f"config.{k}") if fields[k].type in (float, "float") else v
    try:
        config = IcctConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ModelFileError("config", str(exc)) from None
    n, m, d, L = config.num_nodes, config.input_dim, config.action_dim, config.num_leaves
    nodes = _get(doc, "nodes")
    if not isinstance(nodes, list) or len(nodes) != n:
        raise ModelFileError("nodes", f"length mismatch: expected {n} nodes")
    W, b, alpha = np.zeros((n, m)), np.zeros(n), np.zeros(n)
    for i, nd in enumerate(nodes):
        where = f"nodes[{i}]"
        W[i] = _unhex_list(_get(nd, "w", where), m, f"{where}.w")
        b[i] = _unhex(_get(nd, "b", where), f"{where}.b")
        alpha[i] = _unhex(_get(nd, "alpha", where), f"{where}.alpha")
    leaves = _get(doc, "leaves")
    if not isinstance(leaves, list) or len(leaves) != L:
        raise ModelFileError("leaves", f"length mismatch: expected {L} leaves")
    beta, theta, phi = np.zeros((L, d, m)), np.zeros((L, d, m)), np.zeros((L, d, m))
    log_std = np.zeros((L, d))
    for j, leaf in enumerate(leaves):
        if not isinstance(leaf, list) or len(leaf) != d:
            raise ModelFileError(f"leaves[{j}]", f"length mismatch: expected {d} action entries")
        for a, ctrl in enumerate(leaf):
            where = f"leaves[{j}][{a}]"
            beta[j, a] = _unhex_list(_get(ctrl, "beta", where), m, f"{where}.beta")
            theta[j, a] = _unhex_list(_get(ctrl, "theta", where), m, f"{where}.theta")
            phi[j, a] = _unhex_list(_get(ctrl, "phi", where), m, f"{where}.phi")
            log_std[j, a] = _unhex(_get(ctrl, "log_std", where), f"{where}.log_std")
    return IcctModel(
        config, W=W, b=b, alpha=alpha, beta=beta, theta=theta, phi=phi, log_std=log_std,
        feature_names=_names(doc, "feature_names", m), action_names=_names(doc, "action_names", d),
    )


def _mlp_from_document(doc):
    try:
        m, d = int(_get(doc, "input_dim")), int(_get(doc, "action_dim"))
        hidden = tuple(int(h) for h in _get(doc, "hidden"))
    except (TypeError, ValueError):
        raise ModelFileError("hidden", "expected integer sizes") from None
    template = MlpActor(m, d, hidden, rng=np.random.default_rng(0))
    raw = _get(doc, "params")
    if not isinstance(raw, dict) or set(raw) != set(template.params):
        raise ModelFileError("params", f"expected entries {sorted(template.params)}")
    params = {}
    for k, ref in template.params.items():
        shape = tuple(_get(raw[k], "shape", f"params.{k}"))
        if shape != ref.shape:
            raise ModelFileError(f"params.{k}", f"shape {shape} does not match {ref.shape}")
        params[k] = _unhex_list(_get(raw[k], "values", f"params.{k}"), ref.size, f"params.{k}.values").reshape(shape)
    return MlpActor(m, d, hidden, params=params)


def dumps(model) -> str:
    return json.dumps(to_document(model), indent=1) + "\n"


def loads(text: str):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFileError("document", f"malformed JSON ({exc})") from None
    return from_document(doc)


def save(model, path) -> None:
    Path(path).write_text(dumps(model), encoding="utf-8", newline="\n")


def load(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise ModelFileError("document", "not UTF-8 text") from None
    return loads(text)


# --------------------------------------------------------------------------
# renderings


def _fmt(x: float) -> str:
    return f"{round(float(x), 2) + 0.0:.2f}"


def _tree_and_names(model, feature_names=None, action_names=None):
    tree = model if isinstance(model, SimpleFormTree) else to_simple_form(model)
    if feature_names is None:
        feature_names = getattr(model, "feature_names", None) or [f"x{k}" for k in range(tree.input_dim)]
    if action_names is None:
        default = ["action"] if tree.action_dim == 1 else [f"action_{a}" for a in range(tree.action_dim)]
        action_names = getattr(model, "action_names", None) or default
    if len(feature_names) != tree.input_dim or len(action_names) != tree.action_dim:
        raise ValueError("name lists must match the model's input and action dimensions")
    return tree, list(feature_names), list(action_names)


def predicate(node, feature_names, negate=False) -> str:
    op = _NEGATE[node.comparator] if negate else node.comparator
    return f"{feature_names[node.feature]} {op} {_fmt(node.threshold)}"


def linear_expression(terms, intercept, feature_names, times="*", wrap=False) -> str:
    """``c1 * f1 + c2 * f2 + b`` with two-decimal display rounding."""
    parts = []
    for f, c in terms:
        name = f"({feature_names[f]})" if wrap else feature_names[f]
        parts.append((c, f"{_fmt(abs(c))} {times} {name}"))
    parts.append((intercept, _fmt(abs(intercept))))
    text = ("-" if parts[0][0] < 0 and _fmt(abs(parts[0][0])) != "0.00" else "") + parts[0][1]
    for c, body in parts[1:]:
        text += (" - " if c < 0 and _fmt(abs(c)) != "0.00" else " + ") + body
    return text


def render_simple_text(model, feature_names=None, action_names=None) -> str:
    """Indented if/else tree with one predicate per decision node.

    Example for a depth-1 tree::

        if pole_angle > 0.50:
            force = 2.10 * pole_velocity + 0.20
        else:
            force = -1.00
    """
    tree, fnames, anames = _tree_and_names(model, feature_names, action_names)
    lines = []
    n = len(tree.nodes)

    def walk(i, depth):
        pad = "    " * depth
        if i >= n:
            leaf = tree.leaves[i - n]
            for a, name in enumerate(anames):
                lines.append(f"{pad}{name} = {linear_expression(leaf.terms[a], leaf.intercepts[a], fnames)}")
            return
        lines.append(f"{pad}if {predicate(tree.nodes[i], fnames)}:")
        walk(2 * i + 1, depth + 1)
        lines.append(f"{pad}else:")
        walk(2 * i + 2, depth + 1)

    walk(0, 0)
    return "\n".join(lines) + "\n"


def leaf_conditions(tree: SimpleFormTree, leaf: int, feature_names) -> list[str]:
    """Root-to-leaf predicates, negated on false branches."""
    n = len(tree.nodes)
    i = leaf + n
    conds = []
    while i > 0:
        parent = (i - 1) // 2
        conds.append(predicate(tree.nodes[parent], feature_names, negate=(i == 2 * parent + 2)))
        i = parent
    return conds[::-1]


def render_paragraph(model, feature_names=None, action_names=None) -> str:
    """One sub-paragraph per leaf: its conditions, then one consequence per action."""
    tree, fnames, anames = _tree_and_names(model, feature_names, action_names)
    paragraphs = []
    for j, leaf in enumerate(tree.leaves):
        conds = " and ".join(leaf_conditions(tree, j, fnames))
        effects = " and ".join(
            f"the {name} is {linear_expression(leaf.terms[a], leaf.intercepts[a], fnames, times='×', wrap=True)}"
            for a, name in enumerate(anames)
        )
        paragraphs.append(f"If {conds}, then {effects}.")
    return "\n\n".join(paragraphs) + "\n"


def _dot_escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace('"', '\\"')


def render_dot(model, feature_names=None, action_names=None) -> str:
    """Graphviz digraph: boxes for decisions, ellipses for leaf controllers."""
    tree, fnames, anames = _tree_and_names(model, feature_names, action_names)
    n = len(tree.nodes)
    lines = ["digraph icct {", "  node [fontname=\"Helvetica\"];"]
    for i, node in enumerate(tree.nodes):
        lines.append(f'  n{i} [shape=box, label="{_dot_escape(predicate(node, fnames))}"];')
    for j, leaf in enumerate(tree.leaves):
        label = "\\n".join(
            _dot_escape(f"{name} = {linear_expression(leaf.terms[a], leaf.intercepts[a], fnames)}")
            for a, name in enumerate(anames)
        )
        lines.append(f'  leaf{j} [shape=ellipse, label="{label}"];')

    def ident(i):
        return f"n{i}" if i < n else f"leaf{i - n}"

    for i in range(n):
        lines.append(f'  {ident(i)} -> {ident(2 * i + 1)} [label="true"];')
        lines.append(f'  {ident(i)} -> {ident(2 * i + 2)} [label="false"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


RENDERERS = {"text": render_simple_text, "paragraph": render_paragraph, "dot": render_dot}
