import json
import re

import numpy as np
import pydot
import pytest

from icct import export
from icct.envs import CartPole
from icct.export import ModelFileError, render_dot, render_paragraph, render_simple_text
from icct.model import IcctConfig, IcctModel, act, to_simple_form
from icct.policy import MlpActor
from icct.sac import evaluate
from oracles import random_model

VARIANT_CONFIGS = [
    dict(variant="icct", leaf_sparsity=1),
    dict(variant="icct", leaf_sparsity=2),
    dict(variant="icct_static"),
    dict(variant="icct_complete"),
    dict(variant="cddt"),
    dict(variant="cddt_controllers"),
    dict(variant="icct", leaf_sparsity=1, argmax_mode="gumbel", gumbel_tau=0.5),
    dict(variant="icct_complete", l1_leaf_penalty=1e-3),
]


def random_config(rng):
    kw = dict(VARIANT_CONFIGS[rng.integers(len(VARIANT_CONFIGS))])
    m = int(rng.integers(3, 6))
    return IcctConfig(int(2 ** rng.integers(1, 5)), m, int(rng.integers(1, 3)), **kw)


# ---------------------------------------------------------------- persistence


def test_roundtrip_bitwise_100_models(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(100):
        cfg = random_config(rng)
        model = random_model(rng, cfg, scale=float(rng.uniform(0.1, 10)))
        if i % 3 == 0:
            model.feature_names = [f"f{k}" for k in range(cfg.input_dim)]
            model.action_names = [f"a{k}" for k in range(cfg.action_dim)]
        path = tmp_path / f"m{i}.json"
        export.save(model, path)
        back = export.load(path)
        assert back.config == model.config
        for k, v in model.params.items():
            assert back.params[k].tobytes() == v.tobytes(), k
        assert back.feature_names == model.feature_names
        assert back.action_names == model.action_names


def test_roundtrip_preserves_special_values():
    model = IcctModel.init(IcctConfig(2, 2, variant="icct_static"), np.random.default_rng(0))
    model.b[0] = -0.0
    model.phi[0, 0, 0] = 5e-324
    back = export.loads(export.dumps(model))
    assert np.signbit(back.b[0])
    assert back.phi[0, 0, 0] == 5e-324


def test_mlp_roundtrip():
    mlp = MlpActor(4, 2, (5, 3), np.random.default_rng(1))
    back = export.loads(export.dumps(mlp))
    assert back.hidden == (5, 3)
    for k, v in mlp.params.items():
        assert back.params[k].tobytes() == v.tobytes()


def test_file_is_utf8_json_with_lf(tmp_path):
    model = IcctModel.init(IcctConfig(2, 2, variant="icct_static"), np.random.default_rng(0), feature_names=["winkel", "geschwindigkeit"])
    path = tmp_path / "m.json"
    export.save(model, path)
    raw = path.read_bytes()
    assert b"\r\n" not in raw
    doc = json.loads(raw.decode("utf-8"))
    assert doc["format_version"] == export.FORMAT_VERSION
    assert isinstance(doc["nodes"][0]["b"], str) and doc["nodes"][0]["b"].startswith(("0x", "-0x"))


def test_truncated_file_is_malformed(tmp_path):
    model = IcctModel.init(IcctConfig(4, 3), np.random.default_rng(0))
    text = export.dumps(model)
    path = tmp_path / "t.json"
    path.write_text(text[: len(text) // 2])
    with pytest.raises(ModelFileError) as err:
        export.load(path)
    assert err.value.field == "document"


def test_length_mismatch_names_node():
    doc = export.to_document(IcctModel.init(IcctConfig(4, 3), np.random.default_rng(0)))
    doc["nodes"][2]["w"] = doc["nodes"][2]["w"][:2]
    with pytest.raises(ModelFileError) as err:
        export.from_document(doc)
    assert err.value.field == "nodes[2].w"
    assert "nodes[2]" in str(err.value)


@pytest.mark.parametrize(
    "mutate, field",
    [
        (lambda d: d.update(format_version=99), "format_version"),
        (lambda d: d.pop("nodes"), "nodes"),
        (lambda d: d["config"].update(color="red"), "config"),
        (lambda d: d["config"].update(num_leaves=3), "config"),
        (lambda d: d["leaves"].pop(), "leaves"),
        (lambda d: d["leaves"][1][0].update(phi=["zz", "0x0p+0", "0x0p+0"]), "leaves[1][0].phi[0]"),
        (lambda d: d["leaves"][0][0].pop("log_std"), "leaves[0][0]"),
        (lambda d: d.update(feature_names=["a"]), "feature_names"),
        (lambda d: d.update(kind="forest"), "kind"),
    ],
)
def test_malformed_documents_name_field(mutate, field):
    doc = export.to_document(IcctModel.init(IcctConfig(4, 3), np.random.default_rng(0)))
    mutate(doc)
    with pytest.raises(ModelFileError) as err:
        export.from_document(doc)
    assert err.value.field == field


def test_evaluation_survives_roundtrip():
    model = random_model(np.random.default_rng(3), IcctConfig(4, 4, 1, leaf_sparsity=1))
    back = export.loads(export.dumps(model))
    a = evaluate(model, CartPole(), episodes=3, seed=1)
    b = evaluate(back, CartPole(), episodes=3, seed=1)
    assert a.returns == b.returns


# ---------------------------------------------------------------- simple text


def _one_node_model(w, b, variant="icct_static"):
    cfg = IcctConfig(2, 2, variant=variant)
    model = IcctModel.init(cfg, np.random.default_rng(0), feature_names=["x0", "x1"])
    model.W[0] = [0.0, w]
    model.b[0] = b
    return model


def test_threshold_example():
    text = render_simple_text(_one_node_model(2.0, 1.0))
    assert text.splitlines()[0] == "if x1 > 0.50:"


def test_negative_weight_flips_comparator():
    text = render_simple_text(_one_node_model(-2.0, 1.0))
    assert text.splitlines()[0] == "if x1 < -0.50:"


def test_static_leaf_constant_form():
    model = _one_node_model(2.0, 1.0)
    model.phi[:] = 0.0
    model.phi[0, 0, 0] = 0.2
    lines = render_simple_text(model).splitlines()
    assert lines[1].strip() == "action = 0.20"
    assert lines[3].strip() == "action = 0.00"


_ASSIGN = re.compile(r"^(\s*)(\S+) = (.*)$")
_IF = re.compile(r"^(\s*)if (\S+) ([<>]) (\S+):$")
_TERM = re.compile(r"^(-?)([0-9.]+) \* (\S+)$")


def parse_simple_text(text, feature_names):
    """Test-only reader: rebuild the nested if/else tree from rendered text."""
    lines = text.splitlines()
    pos = 0

    def expr(s):
        s = s.replace(" - ", " + -")
        coef, const = {}, 0.0
        for part in s.split(" + "):
            m = _TERM.match(part.replace("--", ""))
            if m:
                coef[feature_names.index(m.group(3))] = float(m.group(1) + m.group(2))
            else:
                const = float(part)
        return coef, const

    def block(depth):
        nonlocal pos
        line = lines[pos]
        m = _IF.match(line)
        if m:
            assert len(m.group(1)) == 4 * depth
            pos += 1
            feat, op, thr = feature_names.index(m.group(2)), m.group(3), float(m.group(4))
            yes = block(depth + 1)
            assert lines[pos].strip() == "else:"
            pos += 1
            no = block(depth + 1)
            return ("node", feat, op, thr, yes, no)
        outs = []
        while pos < len(lines) and (m := _ASSIGN.match(lines[pos])) and len(m.group(1)) == 4 * depth:
            outs.append(expr(m.group(3)))
            pos += 1
        return ("leaf", outs)

    tree = block(0)
    assert pos == len(lines)
    return tree


def eval_parsed(tree, x):
    while tree[0] == "node":
        _, f, op, thr, yes, no = tree
        tree = yes if (x[f] > thr if op == ">" else x[f] < thr) else no
    return np.array([sum(c * x[k] for k, c in coef.items()) + const for coef, const in tree[1]])


def _parsed_thresholds(tree, out):
    if tree[0] == "node":
        out.append((tree[1], tree[3]))
        _parsed_thresholds(tree[4], out)
        _parsed_thresholds(tree[5], out)
    return out


@pytest.mark.parametrize("seed", range(6))
def test_render_parse_evaluate_oracle(seed):
    rng = np.random.default_rng(seed)
    kw = VARIANT_CONFIGS[seed % 4]
    cfg = IcctConfig(8, 4, int(1 + seed % 2), **kw)
    model = random_model(rng, cfg)
    names = [f"s{k}" for k in range(cfg.input_dim)]
    parsed = parse_simple_text(render_simple_text(model, names), names)
    thresholds = _parsed_thresholds(parsed, [])
    X = rng.uniform(-2, 2, (1000, cfg.input_dim))
    # keep inputs clear of the display-rounded thresholds
    X = X[[all(abs(x[f] - t) > 0.011 for f, t in thresholds) for x in X]]
    assert len(X) > 500
    tree = to_simple_form(model)
    for x in X:
        want = model.mean_action(x)[0]
        got = eval_parsed(parsed, x)
        coef_count = max(len(t) for leaf in tree.leaves for t in leaf.terms) + 1
        tol = 0.005 * (np.abs(x).max() * coef_count + 1) + 1e-12
        np.testing.assert_allclose(got, want, atol=tol)
        assert np.allclose(np.tanh(want), act(model, x)[0])


# ---------------------------------------------------------------- paragraph


def test_paragraph_counts():
    for leaves in (2, 4, 8):
        model = random_model(np.random.default_rng(leaves), IcctConfig(leaves, 3, leaf_sparsity=1))
        paras = render_paragraph(model).strip().split("\n\n")
        assert len(paras) == leaves
        depth = int(np.log2(leaves))
        for p in paras:
            conds = p.split(", then ")[0][len("If "):].split(" and ")
            assert len(conds) == depth


def test_paragraph_negates_false_branch():
    text = render_paragraph(_one_node_model(2.0, 1.0), action_names=["force"])
    first, second = text.strip().split("\n\n")
    assert first.startswith("If x1 > 0.50, then the force is")
    assert second.startswith("If x1 ≤ 0.50, then the force is")
    text = render_paragraph(_one_node_model(-2.0, 1.0))
    assert "x1 ≥ -0.50" in text


def test_paragraph_linear_consequence():
    model = _one_node_model(2.0, 1.0, variant="icct_complete")
    model.beta[0, 0] = [2.1, 0.0]
    model.phi[0, 0] = [0.2, 0.0]
    text = render_paragraph(model, ["lander angle", "x1"], ["main engine action"])
    assert "then the main engine action is 2.10 × (lander angle) + 0.00 × (x1) + 0.20." in text


# ---------------------------------------------------------------- DOT


def test_dot_two_leaf_structure():
    dot = render_dot(_one_node_model(2.0, 1.0))
    (graph,) = pydot.graph_from_dot_data(dot)
    names = {n.get_name() for n in graph.get_nodes()} - {"node"}
    assert names == {"n0", "leaf0", "leaf1"}
    edges = graph.get_edges()
    assert len(edges) == 2
    assert sorted(e.get_label().strip('"') for e in edges) == ["false", "true"]


def test_dot_parses_and_is_deterministic():
    rng = np.random.default_rng(4)
    for _ in range(10):
        cfg = random_config(rng)
        model = random_model(rng, cfg)
        model.feature_names = [f'f"{k}\\' for k in range(cfg.input_dim)]  # quoting stress
        dot = render_dot(model)
        assert dot == render_dot(export.loads(export.dumps(model)))
        graphs = pydot.graph_from_dot_data(dot)
        assert graphs is not None and len(graphs) == 1
        g = graphs[0]
        assert len(g.get_nodes()) - 1 == 2 * cfg.num_leaves - 1
        assert len(g.get_edges()) == 2 * (cfg.num_leaves - 1)


# ---------------------------------------------------------------- cross-render agreement


def test_renderings_agree_on_structure():
    rng = np.random.default_rng(9)
    for _ in range(20):
        cfg = random_config(rng)
        model = random_model(rng, cfg)
        tree = to_simple_form(model)
        names = [f"s{k}" for k in range(cfg.input_dim)]
        preds = [export.predicate(nd, names) for nd in tree.nodes]
        # text: predicates in preorder; DOT: n<i> labels; paragraph: conditions on each leaf path
        text_preds = [m.group(2) + " " + m.group(3) + " " + m.group(4) for m in map(_IF.match, render_simple_text(model, names).splitlines()) if m]
        preorder = []

        def walk(i):
            if i < len(tree.nodes):
                preorder.append(preds[i])
                walk(2 * i + 1)
                walk(2 * i + 2)

        walk(0)
        assert text_preds == preorder
        (g,) = pydot.graph_from_dot_data(render_dot(model, names))
        for i, p in enumerate(preds):
            assert g.get_node(f"n{i}")[0].get("label").strip('"') == p
        paras = render_paragraph(model, names).strip().split("\n\n")
        for j, para in enumerate(paras):
            assert para.split(", then ")[0][len("If "):].split(" and ") == export.leaf_conditions(tree, j, names)
