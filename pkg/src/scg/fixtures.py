"""Small named graphs used by tests, the acceptance suite and the CLI."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .graph_core import (
    Bernoulli,
    Categorical,
    Gaussian,
    Graph,
    build_graph,
    cost,
    deterministic,
    input_node,
    stochastic,
)
from .expr import as_expr
from .graph_analysis import analysis_report

THETA = 0.3
LOG_STD = math.log(0.3)
ES_CENTER = 0.3
ES_HALF_WIDTH = 0.5


@dataclass
class Fixture:
    name: str
    graph: Graph
    inputs: dict
    sets: dict = field(default_factory=dict)  # node -> {label: members}, for analysis reports
    chain: tuple = ()  # ((state, action, reward), ...) for chain-structured fixtures
    param: str | None = None


def cat(*logits) -> Categorical:
    return Categorical(tuple(as_expr(e) for e in logits))


def fig11a() -> Fixture:
    g = build_graph([
        input_node("v"),
        deterministic("v1", ["v"], "(mul 2 v)"),
        deterministic("v2", ["v", "v1"], "(mul v v1)"),
        cost("l", ["v1", "v2"], "(add v1 (mul 3 v2))"),
    ])
    sets = {"v": {"v1_v2": ["v1", "v2"], "v1": ["v1"]}}
    return Fixture("FIG11A", g, {"v": 0.5}, sets=sets, param="v")


def fig11b() -> Fixture:
    g = build_graph([
        input_node("x"),
        deterministic("v1", ["x"], "(add x 1)"),
        deterministic("v2", ["v1", "x"], "(add v1 (mul x x) -1)"),
        deterministic("v3", ["v1"], "(mul 2 v1)"),
        deterministic("v4", ["v2", "v3"], "(add v2 v3)"),
        cost("l", ["v3", "v4"], "(mul v3 v4)"),
    ])
    sets = {"x": {"v2_v3": ["v2", "v3"], "v3_v4": ["v3", "v4"], "v3": ["v3"], "v1": ["v1"]}}
    return Fixture("FIG11B", g, {"x": 1.0}, sets=sets, param="x")


def noise() -> Fixture:
    # z' is a +-1 coin scaled by 10: large, uncontrollable noise on the loss.
    g = build_graph([
        input_node("th"),
        stochastic("z", ["th"], cat(0, "th")),
        stochastic("zp", [], cat(0, 0)),
        cost("l", ["z", "zp"], "(add (select z 1 3) (affine -10 20 zp))"),
    ])
    sets = {"z": {"z": ["z"], "zp": ["zp"], "z_zp": ["z", "zp"], "empty": []}}
    return Fixture("NOISE", g, {"th": THETA}, sets=sets, param="th")


def noncongruent() -> Fixture:
    # v0 is a hidden +-10 shift shared by v1 and v1p; e1, e1p are small +-0.5 jitters.
    g = build_graph([
        input_node("th"),
        stochastic("z", ["th"], cat(0, "th")),
        stochastic("v0", [], cat(0, 0)),
        stochastic("e1", [], cat(0, 0)),
        stochastic("e1p", [], cat(0, 0)),
        deterministic("v1", ["z", "v0", "e1"], "(add (select z 1 3) (affine -10.5 20 v0 1 e1))"),
        deterministic("v1p", ["v0", "e1p"], "(affine -10.5 20 v0 1 e1p)"),
        cost("l", ["v1", "v1p"], "(add v1 v1p)"),
    ])
    sets = {"z": {"critic": ["z", "v1"], "empty": [], "v1p": ["v1p"]}}
    return Fixture("NONCONG", g, {"th": THETA}, sets=sets, param="th")


def tree4() -> Fixture:
    g = build_graph([
        input_node("th"),
        stochastic("v0", [], cat(0, 0.5)),
        stochastic("v1", ["th", "v0"], cat(0, "(affine -0.75 1 th 1.5 v0)")),
        stochastic("v2", ["v1", "v0"], cat(0, "(affine -1 1 v1 2 v0)")),
        stochastic("v3", ["v1"], cat(0, "(affine -0.5 1.5 v1)")),
        cost("l1", ["v1", "v2"], "(add (mul 2 v1) (mul 3 v2) (mul v1 v2))"),
        cost("l3", ["v3"], "(affine 0.5 2 v3)"),
    ])
    sets = {
        "v1": {"v1": ["v1"], "v0_v1": ["v0", "v1"], "v0": ["v0"]},
        "v2": {"v1": ["v1"], "v0_v1": ["v0", "v1"]},
    }
    return Fixture("TREE4", g, {"th": THETA}, sets=sets, param="th")


def decomp() -> Fixture:
    g = build_graph([
        stochastic("vr", [], cat(0, 0)),
        stochastic("v1", ["vr"], cat(0, "(affine -0.5 1 vr)")),
        stochastic("v2", ["vr"], cat(0, "(affine 0.3 -1 vr)")),
        stochastic("v3", ["v1"], cat(0, "(affine 0.2 1.2 v1)")),
        deterministic("v4", ["v2"], "(affine 1 2 v2)"),
        deterministic("m", ["v3", "v4"], "(add v3 v4)"),
        cost("l", ["m", "v2"], "(mul m (affine 1 1 v2))"),
    ])
    sets = {"l": {"C": ["vr", "v2", "v4"], "all_stochastic": ["vr", "v1", "v2", "v3"]}}
    return Fixture("DECOMP", g, {}, sets=sets)


_R0 = "(select s0 (select a0 1 -0.5) (select a0 0.3 2))"
_S1 = "(select s0 (select a0 0.5 -1) (select a0 1.2 -0.3))"
_R1 = "(select s1 (select a1 0.7 -1) (select a1 1.5 0.2))"


def chain2() -> Fixture:
    g = build_graph([
        input_node("th"),
        stochastic("s0", [], cat(0, 0.4)),
        stochastic("a0", ["th", "s0"], cat(0, "(mul th (affine 1 -2 s0))")),
        cost("r0", ["s0", "a0"], _R0),
        stochastic("s1", ["s0", "a0"], cat(0, _S1)),
        stochastic("a1", ["th", "s1"], cat(0, "(mul th (affine 1 -2 s1))")),
        cost("r1", ["s1", "a1"], _R1),
    ])
    sets = {
        "a0": {"s0": ["s0"], "s0_a0": ["s0", "a0"], "s1": ["s1"], "s0_a0_s1": ["s0", "a0", "s1"]},
        "a1": {"s1": ["s1"], "s1_a1": ["s1", "a1"], "s0_a0_s1": ["s0", "a0", "s1"]},
        "s0": {"s0": ["s0"], "s1": ["s1"]},
        "r1": {"s1_a1": ["s1", "a1"]},
    }
    chain = (("s0", "a0", "r0"), ("s1", "a1", "r1"))
    return Fixture("CHAIN2", g, {"th": THETA}, sets=sets, chain=chain, param="th")


def chain2_gaussian() -> Fixture:
    # Polynomial costs and a linear transition probability keep quadrature exact.
    g = build_graph([
        input_node("th"),
        stochastic("s0", [], cat(0, 0.4)),
        deterministic("mu0", ["th", "s0"], "(mul th (affine 1 -2 s0))"),
        stochastic("a0", ["mu0"], Gaussian(as_expr("mu0"), as_expr(LOG_STD))),
        cost("r0", ["a0", "s0"], "(add (pow (affine -0.4 1 a0 0.6 s0) 2) (mul 0.3 s0))"),
        stochastic("s1", ["s0", "a0"], Bernoulli("(affine 0.35 0.3 s0 0.1 a0)")),
        deterministic("mu1", ["th", "s1"], "(mul th (affine 1 -2 s1))"),
        stochastic("a1", ["mu1"], Gaussian(as_expr("mu1"), as_expr(LOG_STD))),
        cost("r1", ["a1", "s1"], "(add (pow (affine 0.2 1 a1 -0.5 s1) 2) (mul 0.5 s1))"),
    ])
    sets = {
        "a0": {"s0_a0": ["s0", "a0"], "s0": ["s0"]},
        "a1": {"s1_a1": ["s1", "a1"], "s1": ["s1"]},
    }
    chain = (("s0", "a0", "r0"), ("s1", "a1", "r1"))
    return Fixture("CHAIN2-G", g, {"th": THETA}, sets=sets, chain=chain, param="th")


def chain2_es() -> Fixture:
    # Black-box variant: the policy parameter is a two-point perturbation of th
    # whose mean is th; the gradient only reaches th through the coin k.
    lo, hi = ES_CENTER - ES_HALF_WIDTH, ES_CENTER + ES_HALF_WIDTH
    bias = 0.5 - ES_CENTER / (2 * ES_HALF_WIDTH)
    slope = 1 / (2 * ES_HALF_WIDTH)
    g = build_graph([
        input_node("th"),
        stochastic("k", ["th"], Bernoulli(f"(affine {bias!r} {slope!r} th)")),
        deterministic("thp", ["k"], f"(select k {lo!r} {hi!r})"),
        stochastic("s0", [], cat(0, 0.4)),
        deterministic("logit0", ["thp", "s0"], "(mul thp (affine 1 -2 s0))"),
        stochastic("a0", ["logit0"], cat(0, "logit0")),
        cost("r0", ["s0", "a0"], _R0),
        stochastic("s1", ["s0", "a0"], cat(0, _S1)),
        deterministic("logit1", ["thp", "s1"], "(mul thp (affine 1 -2 s1))"),
        stochastic("a1", ["logit1"], cat(0, "logit1")),
        cost("r1", ["s1", "a1"], _R1),
    ])
    chain = (("s0", "a0", "r0"), ("s1", "a1", "r1"))
    return Fixture("CHAIN2-ES", g, {"th": ES_CENTER}, chain=chain, param="th")


def factored() -> Fixture:
    g = build_graph([
        input_node("th"),
        stochastic("s", [], cat(0, 0.2)),
        stochastic("b1", ["th", "s"], cat(0, "(mul th (affine 1 -2 s))")),
        stochastic("b2", ["th", "s"], cat(0, "(mul th (affine -0.5 1 s))")),
        cost("r", ["s", "b1", "b2"],
             "(select s (select b1 (select b2 1 0.2) (select b2 -0.5 0.8)) (select b1 (select b2 0 2) (select b2 1.5 -1)))"),
    ])
    sets = {
        "b1": {"s_b1": ["s", "b1"], "s_b2": ["s", "b2"], "s": ["s"]},
        "b2": {"s_b2": ["s", "b2"], "s_b1": ["s", "b1"], "s": ["s"]},
    }
    return Fixture("FACTORED", g, {"th": THETA}, sets=sets, param="th")


_BUILDERS = {
    "FIG11A": fig11a,
    "FIG11B": fig11b,
    "NOISE": noise,
    "NONCONG": noncongruent,
    "TREE4": tree4,
    "DECOMP": decomp,
    "CHAIN2": chain2,
    "CHAIN2-G": chain2_gaussian,
    "CHAIN2-ES": chain2_es,
    "FACTORED": factored,
}


def fixture_names() -> list[str]:
    return list(_BUILDERS)


def get_fixture(name: str) -> Fixture:
    try:
        return _BUILDERS[name]()
    except KeyError:
        raise KeyError(f"unknown fixture {name!r}; known: {', '.join(_BUILDERS)}") from None


def fixtures() -> list[Fixture]:
    return [b() for b in _BUILDERS.values()]


def fixture_report(f: Fixture) -> list[dict]:
    """Analysis report of every node with the fixture's registered sets."""
    return [analysis_report(f.graph, v, f.sets.get(v, {})) for v in f.graph.order]
