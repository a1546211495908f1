"""Stochastic computation graphs: data model, reachability and forward sampling."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .expr import NUMERIC, Const, Expr, GraphError, NumericalDomain, Op, ParseError, as_expr

STOCHASTIC, DETERMINISTIC, INPUT, COST = "stochastic", "deterministic", "input", "cost"
KINDS = (STOCHASTIC, DETERMINISTIC, INPUT, COST)
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


class CycleDetected(GraphError):
    pass


class UnknownParent(GraphError):
    pass


class CostWithChild(GraphError):
    pass


class InputWithParent(GraphError):
    pass


@dataclass(frozen=True)
class Categorical:
    logits: tuple

    def __post_init__(self):
        if len(self.logits) < 2:
            raise GraphError("Categorical needs K >= 2 outcomes")

    @property
    def size(self) -> int:
        return len(self.logits)

    def refs(self) -> frozenset:
        out: frozenset = frozenset()
        for e in self.logits:
            out |= e.refs()
        return out

    def probs(self, env) -> list:
        logits = np.broadcast_arrays(*[np.asarray(e.evaluate(env), dtype=float) for e in self.logits])
        top = np.maximum.reduce(logits)
        ex = [np.exp(l - top) for l in logits]
        z = sum(ex)
        return [e / z for e in ex]

    def log_prob(self, value, env, lib=NUMERIC):
        logits = [e.evaluate(env, lib) for e in self.logits]
        acc = lib.exp(logits[0])
        for l in logits[1:]:
            acc = lib.add(acc, lib.exp(l))
        z = lib.log(acc)
        return lib.add(lib.select(value, logits), lib.neg(z))

    def to_json(self) -> dict:
        return {"type": "categorical", "logits": [str(e) for e in self.logits]}


def Bernoulli(prob) -> Categorical:
    """Two-outcome categorical; outcome 1 has probability ``prob``."""
    p = as_expr(prob)
    return Categorical((Op("log", (Op("add", (Const(1.0), Op("neg", (p,)))),)), Op("log", (p,))))


@dataclass(frozen=True)
class Gaussian:
    mean: Expr
    logstd: Expr

    def refs(self) -> frozenset:
        return self.mean.refs() | self.logstd.refs()

    def params(self, env):
        mu = np.asarray(self.mean.evaluate(env), dtype=float)
        ls = np.asarray(self.logstd.evaluate(env), dtype=float)
        if not np.all(np.isfinite(ls)):
            raise NumericalDomain("Gaussian logstd is not finite")
        return mu, np.exp(ls)

    def log_prob(self, value, env, lib=NUMERIC):
        mu = self.mean.evaluate(env, lib)
        ls = self.logstd.evaluate(env, lib)
        z = lib.mul(lib.add(value, lib.neg(mu)), lib.exp(lib.neg(ls)))
        return lib.add(lib.add(lib.mul(-0.5, lib.powi(z, 2)), lib.neg(ls)), -HALF_LOG_2PI)

    def to_json(self) -> dict:
        return {"type": "gaussian", "mean": str(self.mean), "logstd": str(self.logstd)}


@dataclass(frozen=True)
class Node:
    name: str
    kind: str
    parents: tuple = ()
    expr: Expr | None = None
    family: Categorical | Gaussian | None = None

    def to_json(self) -> dict:
        out = {"name": self.name, "kind": self.kind, "parents": list(self.parents)}
        if self.expr is not None:
            out["expr"] = str(self.expr)
        if self.family is not None:
            out["family"] = self.family.to_json()
        return out


def stochastic(name, parents, family) -> Node:
    return Node(name, STOCHASTIC, tuple(parents), family=family)


def deterministic(name, parents, expr) -> Node:
    return Node(name, DETERMINISTIC, tuple(parents), expr=as_expr(expr, name))


def cost(name, parents, expr) -> Node:
    return Node(name, COST, tuple(parents), expr=as_expr(expr, name))


def input_node(name) -> Node:
    return Node(name, INPUT)


class Graph:
    """Immutable DAG; node ids are node names, ``order`` is topological."""

    def __init__(self, nodes: Mapping[str, Node], order: tuple):
        self.nodes = dict(nodes)
        self.order = tuple(order)
        self.position = {n: i for i, n in enumerate(self.order)}
        self.children: dict[str, tuple] = {n: () for n in self.order}
        for n in self.order:
            for p in dict.fromkeys(self.nodes[n].parents):
                self.children[p] = self.children[p] + (n,)
        self.edges = tuple((p, n) for n in self.order for p in self.nodes[n].parents)
        self.costs = tuple(n for n in self.order if self.nodes[n].kind == COST)
        self.inputs = tuple(n for n in self.order if self.nodes[n].kind == INPUT)
        self.stochastic = tuple(n for n in self.order if self.nodes[n].kind == STOCHASTIC)

    def __contains__(self, name) -> bool:
        return name in self.nodes

    def __len__(self) -> int:
        return len(self.order)

    def kind(self, name: str) -> str:
        return self.nodes[name].kind

    def parents(self, name: str) -> tuple:
        return self.nodes[name].parents

    def sort(self, names: Iterable[str]) -> tuple:
        return tuple(sorted(set(names), key=self.position.__getitem__))

    def to_json(self) -> dict:
        return {"nodes": [self.nodes[n].to_json() for n in self.order], "costs": list(self.costs)}


def build_graph(decls: Iterable[Node]) -> Graph:
    decls = list(decls)
    nodes: dict[str, Node] = {}
    for d in decls:
        if d.kind not in KINDS:
            raise GraphError(f"node {d.name!r}: unknown kind {d.kind!r}")
        if d.name in nodes:
            raise GraphError(f"duplicate node {d.name!r}")
        nodes[d.name] = d
    for d in decls:
        for p in d.parents:
            if p not in nodes:
                raise UnknownParent(f"node {d.name!r} references unknown parent {p!r}")
            if nodes[p].kind == COST:
                raise CostWithChild(f"cost node {p!r} has child {d.name!r}")
        if d.kind == INPUT and d.parents:
            raise InputWithParent(f"input node {d.name!r} has parents")
        if d.kind in (DETERMINISTIC, COST) and d.expr is None:
            raise GraphError(f"node {d.name!r} needs an expression")
        if d.kind == STOCHASTIC and d.family is None:
            raise GraphError(f"stochastic node {d.name!r} needs a distribution family")
        refs = d.expr.refs() if d.expr is not None else d.family.refs() if d.family else frozenset()
        stray = refs - set(d.parents)
        if stray:
            raise ParseError(f"references undeclared parents {sorted(stray)}", d.name)

    # Kahn's algorithm, ties broken by declaration order.
    indeg = {d.name: len(set(d.parents)) for d in decls}
    kids: dict[str, list] = {d.name: [] for d in decls}
    for d in decls:
        for p in set(d.parents):
            kids[p].append(d.name)
    rank = {d.name: i for i, d in enumerate(decls)}
    ready = sorted((n for n, k in indeg.items() if k == 0), key=rank.get)
    order = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for c in kids[n]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
                ready.sort(key=rank.get)
    if len(order) != len(decls):
        raise CycleDetected("graph has a directed cycle through " + ", ".join(sorted(set(nodes) - set(order))))
    return Graph(nodes, order)


# ---------------------------------------------------------------- reachability

def descendants(g: Graph, v: str) -> frozenset:
    seen = {v}
    todo = [v]
    while todo:
        for c in g.children[todo.pop()]:
            if c not in seen:
                seen.add(c)
                todo.append(c)
    return frozenset(seen)


def ancestors(g: Graph, v: str) -> frozenset:
    seen = {v}
    todo = [v]
    while todo:
        for p in g.parents(todo.pop()):
            if p not in seen:
                seen.add(p)
                todo.append(p)
    return frozenset(seen)


def exists_unblocked_path(g: Graph, src: str, dst: str, blockers: Iterable[str] = ()) -> bool:
    """Directed path src -> dst none of whose nodes after ``src`` is a blocker."""
    if src == dst:
        return True
    blockers = set(blockers)
    seen = {src}
    todo = [src]
    while todo:
        for c in g.children[todo.pop()]:
            if c in blockers or c in seen:
                continue
            if c == dst:
                return True
            seen.add(c)
            todo.append(c)
    return False


def deterministically_computable(g: Graph, x: str, V: Iterable[str]) -> bool:
    """True iff every path from a stochastic node to ``x`` meets ``V``."""
    V = set(V)
    if x in V:
        return True
    seen = {x}
    todo = [x]
    while todo:
        n = todo.pop()
        if g.kind(n) == STOCHASTIC:
            return False
        for p in g.parents(n):
            if p not in V and p not in seen:
                seen.add(p)
                todo.append(p)
    return True


def cost_to_go_set(g: Graph, v) -> frozenset:
    """Cost nodes downstream of ``v`` (a node or an iterable of nodes)."""
    members = [v] if isinstance(v, str) else list(v)
    out: set = set()
    for m in members:
        out |= {n for n in descendants(g, m) if g.kind(n) == COST}
    return frozenset(out)


# ---------------------------------------------------------------- sampling

@dataclass
class Assignment:
    """Node values and stochastic log-probabilities.

    Values are floats for a single draw, or equal-length arrays for a batch
    of draws (``n`` is then the batch size).
    """

    values: dict
    logp: dict = field(default_factory=dict)
    n: int | None = None

    def __getitem__(self, name):
        return self.values[name]

    def row(self, i: int) -> "Assignment":
        pick = lambda v: float(np.broadcast_to(v, (self.n,))[i])
        return Assignment({k: pick(v) for k, v in self.values.items()},
                          {k: pick(v) for k, v in self.logp.items()})

    def cost_to_go(self, g: Graph, v) -> np.ndarray | float:
        return sum((self.values[c] for c in g.sort(cost_to_go_set(g, v))), 0.0)


def _input_values(g: Graph, inputs: Mapping[str, float] | None) -> dict:
    inputs = dict(inputs or {})
    missing = [n for n in g.inputs if n not in inputs]
    if missing:
        raise GraphError(f"missing input values for {missing}")
    return {n: float(inputs[n]) for n in g.inputs}


def forward_sample(g: Graph, inputs: Mapping[str, float] | None, rng, n: int | None = None) -> Assignment:
    """Ancestral sampling in topological order.

    ``rng`` is a numpy Generator or an int seed.  With ``n`` set, returns a
    batch of ``n`` independent draws as arrays.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    size = 1 if n is None else int(n)
    fixed = _input_values(g, inputs)
    values: dict = {}
    logp: dict = {}
    for name in g.order:
        node = g.nodes[name]
        if node.kind == INPUT:
            values[name] = np.full(size, fixed[name])
        elif node.kind in (DETERMINISTIC, COST):
            values[name] = np.broadcast_to(np.asarray(node.expr.evaluate(values), dtype=float), (size,)).copy()
        elif isinstance(node.family, Categorical):
            probs = np.stack([np.broadcast_to(p, (size,)) for p in node.family.probs(values)], axis=1)
            u = rng.random(size)
            k = np.minimum((np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1), node.family.size - 1)
            values[name] = k.astype(float)
            logp[name] = np.log(probs[np.arange(size), k])
        else:
            mu, sigma = node.family.params(values)
            x = np.broadcast_to(mu, (size,)) + np.broadcast_to(sigma, (size,)) * rng.standard_normal(size)
            values[name] = x
            logp[name] = np.asarray(node.family.log_prob(x, values), dtype=float)
    a = Assignment(values, logp, size)
    return a.row(0) if n is None else a


def total_cost(a: Assignment, g: Graph):
    return sum((a.values[c] for c in g.costs), 0.0)


def recompute_deterministic(g: Graph, a: Assignment) -> dict:
    """Re-evaluate every deterministic and cost node from its parents."""
    return {n: g.nodes[n].expr.evaluate(a.values) for n in g.order
            if g.kind(n) in (DETERMINISTIC, COST)}


# ---------------------------------------------------------------- JSON

def _family_from_json(spec: dict, name: str):
    kind = spec.get("type")
    if kind == "categorical":
        return Categorical(tuple(as_expr(e, name) for e in spec["logits"]))
    if kind == "bernoulli":
        return Bernoulli(as_expr(spec["prob"], name))
    if kind == "gaussian":
        return Gaussian(as_expr(spec["mean"], name), as_expr(spec["logstd"], name))
    raise GraphError(f"node {name!r}: unknown family {kind!r}")


def graph_from_dict(doc: dict) -> Graph:
    decls = []
    for item in doc.get("nodes", []):
        name = item["name"]
        kind = item["kind"]
        parents = tuple(item.get("parents", ()))
        expr = as_expr(item["expr"], name) if "expr" in item else None
        family = _family_from_json(item["family"], name) if "family" in item else None
        decls.append(Node(name, kind, parents, expr, family))
    g = build_graph(decls)
    declared = set(doc.get("costs", g.costs))
    if declared != set(g.costs):
        raise GraphError(f"'costs' {sorted(declared)} disagrees with cost-kind nodes {sorted(g.costs)}")
    return g


def load_graph(path) -> Graph:
    with open(path) as fh:
        return graph_from_dict(json.load(fh))
