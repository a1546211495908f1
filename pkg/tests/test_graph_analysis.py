import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from graphgen import random_graphs
from scg import exact_oracle as eo
from scg import fixtures as fx
from scg.graph_analysis import (
    DecompositionInvalid,
    ancestors_closure,
    check_decomposition,
    d_separated,
    det_closure,
    is_congruent,
    is_markov,
    is_valid_baseline_set,
    is_valid_critic_set,
    maximal_congruent_baseline,
    root_decomposition,
    separator_verdict,
    validate_bootstrap,
    with_logp_node,
)
from scg.graph_core import build_graph, cost, input_node, stochastic

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="module")
def chain2():
    return fx.chain2().graph


@pytest.fixture(scope="module")
def fig11b():
    return fx.fig11b().graph


def _hidden_parent_graph():
    # h drives both u and the cost after u, so {u} alone is not Markov
    return build_graph([
        stochastic("h", [], fx.cat(0, 0.3)),
        stochastic("v", ["h"], fx.cat(0, "(affine -0.2 1 h)")),
        stochastic("u", ["v", "h"], fx.cat(0, "(affine 0.1 1 v -1.5 h)")),
        cost("l1", ["v"], "(mul 2 v)"),
        cost("l2", ["u", "h"], "(affine 0 1 u 3 h)"),
    ])


# ---------------------------------------------------------------- closures

def test_det_closure_examples(fig11b, chain2):
    assert det_closure(fig11b, {"x"}) == set(fig11b.order)
    # inputs are constants, so th is computable from anything
    assert det_closure(chain2, {"s0", "a0"}) == {"th", "s0", "a0", "r0"}
    assert det_closure(fx.decomp().graph, set()) == set()


def test_ancestors_closure_examples(chain2):
    assert ancestors_closure(chain2, {"s1"}) == {"s1", "s0", "a0", "th"}
    assert ancestors_closure(chain2, {"th", "s0"}) == {"th", "s0"}
    assert ancestors_closure(chain2, set()) == set()


@settings(max_examples=60, deadline=None)
@given(random_graphs(), st.data())
def test_det_closure_is_a_closure(g, data):
    C = set(data.draw(st.lists(st.sampled_from(g.order), max_size=3)))
    D = det_closure(g, C)
    assert C <= D
    assert det_closure(g, D) == D


# ---------------------------------------------------------------- root decomposition

def test_root_decomposition_decomp_fixture():
    rd = root_decomposition(fx.decomp().graph, "l", {"vr", "v2", "v4"})
    assert rd.W == {"v1", "v3"}
    assert "vr" not in rd.W


def test_root_decomposition_chain2(chain2):
    rd = root_decomposition(chain2, "r1", {"s1", "a1"})
    assert rd.W == set()
    assert rd.V == {"s1", "a1"}


def test_root_decomposition_all_stochastic_blocks_everything(chain2):
    assert root_decomposition(chain2, "r1", set(chain2.stochastic)).W == set()


# ---------------------------------------------------------------- d-separation

def test_dsep_examples(chain2):
    g2, lp = with_logp_node(chain2, "a0")
    assert d_separated(g2, {lp}, {"r1"}, {"s0", "a0", "s1"})
    assert d_separated(chain2, {"s0"}, {"r1"}, {"s0"})
    assert d_separated(fx.noise().graph, {"z"}, {"zp"}, set())


def test_dsep_collider_is_opened_by_conditioning():
    g = build_graph([
        stochastic("a", [], fx.cat(0, 0.2)),
        stochastic("b", [], fx.cat(0, -0.4)),
        stochastic("c", ["a", "b"], fx.cat(0, "(affine -1 2 a 2 b)")),
    ])
    table = eo.enumerate_support(g)
    assert d_separated(g, {"a"}, {"b"}, set())
    assert eo.check_ci_numeric(table, ["a"], ["b"], [])
    assert not d_separated(g, {"a"}, {"b"}, {"c"})
    assert not eo.check_ci_numeric(table, ["a"], ["b"], ["c"])


@settings(max_examples=80, deadline=None)
@given(random_graphs(max_nodes=6), st.data())
def test_dsep_verdicts_are_sound(g, data):
    nodes = [n for n in g.order if g.kind(n) != "input"]
    A = data.draw(st.sampled_from(nodes))
    B = data.draw(st.sampled_from(nodes))
    Z = set(data.draw(st.lists(st.sampled_from(nodes), max_size=3)))
    table = eo.enumerate_support(g, {"th": 0.3})
    if d_separated(g, {A}, {B}, Z):
        assert eo.check_ci_numeric(table, [A], [B], sorted(Z), tol=1e-9)


# ---------------------------------------------------------------- baseline and critic sets

def test_baseline_examples(chain2):
    assert is_valid_baseline_set(chain2, "a1", {"s0", "a0", "s1"})
    assert is_valid_baseline_set(chain2, "a1", set())
    assert not is_valid_baseline_set(chain2, "a0", {"s1"})


def test_critic_examples(chain2):
    assert is_valid_critic_set(chain2, "a0", {"s0", "a0"})
    assert not is_valid_critic_set(chain2, "a0", {"s0"})
    assert not is_valid_critic_set(fx.tree4().graph, "v1", {"v1"})
    assert is_valid_critic_set(fx.tree4().graph, "v1", {"v0", "v1"})


def _random_set(data, g, v):
    pool = [n for n in g.order if n != v and g.kind(n) != "input"]
    return set(data.draw(st.lists(st.sampled_from(pool), max_size=3))) if pool else set()


@settings(max_examples=60, deadline=None)
@given(random_graphs(max_nodes=6), st.data())
def test_valid_baseline_has_zero_mean_score_term(g, data):
    targets = [v for v in g.stochastic if eo.cost_to_go_set(g, v) and "th" in g.parents(v)]
    assume(targets)
    v = data.draw(st.sampled_from(targets))
    B = _random_set(data, g, v)
    table = eo.enumerate_support(g, {"th": 0.3})
    if is_valid_baseline_set(g, v, B):
        b = eo.exact_value(table, B, "total").lookup(table.atoms)
        s = eo.score(table, v, "th")
        assert abs(np.sum(table.prob * s * b)) < 1e-10


@settings(max_examples=60, deadline=None)
@given(random_graphs(max_nodes=6), st.data())
def test_valid_critic_keeps_the_expected_score_term(g, data):
    targets = [v for v in g.stochastic if eo.cost_to_go_set(g, v) and "th" in g.parents(v)]
    assume(targets)
    v = data.draw(st.sampled_from(targets))
    C = _random_set(data, g, v) | {v}
    table = eo.enumerate_support(g, {"th": 0.3})
    if is_valid_critic_set(g, v, C):
        q = eo.exact_value(table, C, v).lookup(table.atoms)
        L = table.atoms.cost_to_go(g, v)
        s = eo.score(table, v, "th")
        assert abs(np.sum(table.prob * s * (L - q))) < 1e-10


def test_invalid_critic_changes_the_expectation():
    f = fx.tree4()
    table = eo.enumerate_support(f.graph, f.inputs)
    q = eo.exact_value(table, {"v1"}, "v1").lookup(table.atoms)
    L = table.atoms.cost_to_go(f.graph, "v1")
    s = eo.score(table, "v1", "th")
    assert abs(np.sum(table.prob * s * (L - q))) > 1e-3


# ---------------------------------------------------------------- Markov sets

def test_markov_examples(chain2):
    assert is_markov(chain2, {"s1", "a1"}, "a1")
    assert is_markov(chain2, set(chain2.order), "a1")
    assert not is_markov(fx.tree4().graph, {"v1"}, "v2")
    assert not is_markov(_hidden_parent_graph(), {"u"}, "u")


@settings(max_examples=60, deadline=None)
@given(random_graphs(max_nodes=6), st.data())
def test_markov_sets_satisfy_the_tower_identity_for_ancestor_subsets(g, data):
    targets = [v for v in g.stochastic if eo.cost_to_go_set(g, v)]
    assume(targets)
    v = data.draw(st.sampled_from(targets))
    X = _random_set(data, g, None)
    assume(is_markov(g, X, v))
    pool = sorted(ancestors_closure(g, X) - set(g.inputs))
    X1 = set(data.draw(st.lists(st.sampled_from(pool), max_size=3))) if pool else set()
    table = eo.enumerate_support(g, {"th": 0.3})
    inner = eo.exact_value(table, X, v).lookup(table.atoms)
    lhs = eo.conditional_mean(table, X1, inner)
    rhs = eo.exact_value(table, X1, v).lookup(table.atoms)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


# ---------------------------------------------------------------- congruence

def test_congruence_examples(chain2):
    assert is_congruent(set(), {"s0", "a0"})
    assert is_congruent({"s0"}, {"s0", "a0"})
    assert not is_congruent({"zp"}, {"z"})


def test_maximal_congruent_baseline_examples(chain2):
    assert maximal_congruent_baseline(chain2, "a1", {"s1", "a1"}) == {"s1"}
    assert maximal_congruent_baseline(chain2, "a1", {"s0", "s1"}) == {"s0", "s1"}
    assert maximal_congruent_baseline(chain2, "a0", {"a0"}) == set()


@settings(max_examples=60, deadline=None)
@given(random_graphs(), st.data())
def test_maximal_congruent_baseline_is_valid_and_congruent(g, data):
    assume(g.stochastic)
    v = data.draw(st.sampled_from(g.stochastic))
    C = _random_set(data, g, v) | {v}
    B = maximal_congruent_baseline(g, v, C)
    assert is_congruent(B, C)
    assert is_valid_baseline_set(g, v, B)


# ---------------------------------------------------------------- separators

def test_separator_examples(fig11b):
    assert separator_verdict(fig11b, "x", ["v2", "v3"]).kind == "Unordered"
    v = separator_verdict(fig11b, "x", ["v3", "v4"])
    assert v.kind == "OrderedOnly" and v.order == ("v3", "v4")
    assert separator_verdict(fig11b, "x", ["v3"]).kind == "NotSeparator"
    assert separator_verdict(fig11b, "x", ["v4", "v3"]).order == ("v3", "v4")


# ---------------------------------------------------------------- decompositions

def test_check_decomposition_examples(chain2):
    assert check_decomposition(chain2, "s0", [{"r0"}, {"s1"}])
    assert check_decomposition(chain2, "s0", [{"s0"}])
    assert not check_decomposition(chain2, "s0", [{"a0"}, {"s1"}])
    assert not check_decomposition(chain2, "s0", [{"s1"}])


def test_validate_bootstrap_examples(chain2):
    assert validate_bootstrap(chain2, "s0", {"s0"}, [({"s1"}, {"s1"})], {"r0"})
    assert validate_bootstrap(chain2, "a0", {"s0", "a0"}, [({"s1"}, {"s0", "a0", "s1"})], {"r0"})
    with pytest.raises(DecompositionInvalid):
        validate_bootstrap(chain2, "s0", {"s0"}, [({"s1"}, {"s1"})])


def test_bootstrap_refused_with_shared_hidden_parent():
    g = _hidden_parent_graph()
    assert not validate_bootstrap(g, "v", {"v"}, [({"u"}, {"u"})], {"l1"})
    # and the identity really fails numerically
    table = eo.enumerate_support(g)
    target = table.column("l1") + eo.exact_value(table, {"u"}, "u").lookup(table.atoms)
    lhs = eo.exact_value(table, {"v"}, "v").lookup(table.atoms)
    rhs = eo.conditional_mean(table, {"v"}, target)
    assert np.max(np.abs(lhs - rhs)) > 1e-3


# ---------------------------------------------------------------- goldens

@pytest.mark.parametrize("name", fx.fixture_names())
def test_analysis_report_matches_golden(name):
    committed = json.loads((GOLDEN / f"{name}.json").read_text())
    assert fx.fixture_report(fx.get_fixture(name)) == committed


def test_golden_highlights():
    fig = {r["node"]: r for r in json.loads((GOLDEN / "FIG11B.json").read_text())}
    seps = {s["set"]: s["separator"] for s in fig["x"]["sets"]}
    assert seps["v2_v3"] == {"kind": "Unordered"}
    assert seps["v3_v4"] == {"kind": "OrderedOnly", "order": ["v3", "v4"]}
    noise = {r["node"]: r for r in json.loads((GOLDEN / "NOISE.json").read_text())}
    rows = {s["set"]: s for s in noise["z"]["sets"]}
    assert rows["zp"]["baseline"] is True
