"""Set-validity analysis on stochastic computation graphs.

Sets are plain iterables of node names.  Input nodes are constants: they are
always deterministically computable and never mediate dependence.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .graph_core import (
    COST,
    DETERMINISTIC,
    INPUT,
    STOCHASTIC,
    Graph,
    Node,
    ancestors,
    build_graph,
    cost_to_go_set,
    descendants,
    deterministically_computable,
    exists_unblocked_path,
)
from .expr import Const

NOT_SEPARATOR, UNORDERED, ORDERED_ONLY = "NotSeparator", "Unordered", "OrderedOnly"


class DecompositionInvalid(Exception):
    pass


@dataclass(frozen=True)
class SeparatorVerdict:
    kind: str
    order: tuple = ()

    def to_json(self):
        return {"kind": self.kind, "order": list(self.order)} if self.kind == ORDERED_ONLY else {"kind": self.kind}


@dataclass(frozen=True)
class RootDecomposition:
    V: frozenset
    W: frozenset


def det_closure(g: Graph, C: Iterable[str]) -> frozenset:
    C = set(C)
    return frozenset(x for x in g.order if deterministically_computable(g, x, C))


def ancestors_closure(g: Graph, X: Iterable[str]) -> frozenset:
    out: set = set()
    for x in X:
        out |= ancestors(g, x)
    return frozenset(out)


def _unblocked_from_outside(g: Graph, w: str, targets: Iterable[str], X: set) -> bool:
    # A path starting inside X counts as blocked.
    return w not in X and any(exists_unblocked_path(g, w, t, X) for t in targets)


def root_decomposition(g: Graph, target: str, C: Iterable[str]) -> RootDecomposition:
    C = set(C)
    current = {target}
    while True:
        nxt: set = set()
        for x in current:
            kind = g.kind(x)
            if kind in (STOCHASTIC, INPUT) or x in C:
                nxt.add(x)
            else:
                nxt.update(g.parents(x))
        if nxt == current:
            break
        current = nxt
    free = current - C
    W = frozenset(
        w for w in g.stochastic
        if w not in C and any(exists_unblocked_path(g, w, t, C) for t in free)
    )
    return RootDecomposition(frozenset(current), W)


def _moral_ancestral(g: Graph, keep: set) -> dict:
    adj: dict = {n: set() for n in keep}
    for n in keep:
        ps = [p for p in dict.fromkeys(g.parents(n)) if p in keep]
        for p in ps:
            adj[n].add(p)
            adj[p].add(n)
        for i, p in enumerate(ps):
            for q in ps[i + 1:]:
                adj[p].add(q)
                adj[q].add(p)
    return adj


def d_separated(g: Graph, A: Iterable[str], B: Iterable[str], Z: Iterable[str]) -> bool:
    """Sound d-separation test with the conditioning set closed under determinism."""
    Zc = det_closure(g, Z)
    A = set(A) - Zc
    B = set(B) - Zc
    if not A or not B:
        return True
    if A & B:
        return False
    keep = set(ancestors_closure(g, A | B | Zc))
    adj = _moral_ancestral(g, keep)
    seen = set(A)
    todo = list(A)
    while todo:
        for m in adj[todo.pop()]:
            if m in Zc or m in seen:
                continue
            if m in B:
                return False
            seen.add(m)
            todo.append(m)
    return True


def with_logp_node(g: Graph, v: str) -> tuple[Graph, str]:
    """Copy of ``g`` with an extra deterministic node standing for log p(v)."""
    name = f"logp[{v}]"
    parents = (v,) + tuple(p for p in g.parents(v) if p != v)
    nodes = [g.nodes[n] for n in g.order] + [Node(name, DETERMINISTIC, parents, expr=Const(0.0))]
    return build_graph(nodes), name


def is_valid_baseline_set(g: Graph, v: str, B: Iterable[str]) -> bool:
    return not (set(B) & descendants(g, v))


def is_valid_critic_set(g: Graph, v: str, C: Iterable[str]) -> bool:
    C = set(C)
    if v not in C:
        return False
    ga, lam = with_logp_node(g, v)
    targets = cost_to_go_set(g, v) - det_closure(ga, C)
    return d_separated(ga, {lam}, targets, C)


def is_markov(g: Graph, X: Iterable[str], v) -> bool:
    """Markov test for the cost-to-go of ``v`` (a node or a set of nodes)."""
    X = set(X)
    costs = cost_to_go_set(g, v)
    for w in g.order:
        if g.kind(w) == INPUT:
            continue
        if _unblocked_from_outside(g, w, costs, X) and descendants(g, w) & X:
            return False
    return True


def is_congruent(B: Iterable[str], C: Iterable[str]) -> bool:
    return set(B) <= set(C)


def maximal_congruent_baseline(g: Graph, v: str, C: Iterable[str]) -> frozenset:
    return frozenset(set(C) - descendants(g, v))


def separator_verdict(g: Graph, u: str, S: Sequence[str]) -> SeparatorVerdict:
    """Classify ``S`` as a separator between ``u`` and the surrogate loss.

    A deterministic path leaves ``u`` through deterministic nodes and ends at
    a cost or at a stochastic node (whose log-probability enters the loss).
    """
    S = list(S)
    members = set(S)
    if not members or len(members) != len(S):
        raise ValueError("separator must be a nonempty list of distinct nodes")
    seen = {u}
    todo = [u]
    while todo:
        for c in g.children[todo.pop()]:
            if c in members or c in seen:
                continue
            if g.kind(c) in (COST, STOCHASTIC):
                return SeparatorVerdict(NOT_SEPARATOR)
            seen.add(c)
            todo.append(c)
    ordered = g.sort(members)
    for i, a in enumerate(ordered):
        if descendants(g, a) & (members - {a}):
            return SeparatorVerdict(ORDERED_ONLY, ordered)
    return SeparatorVerdict(UNORDERED)


def check_decomposition(g: Graph, v: str, parts: Sequence[Iterable[str]]) -> bool:
    target = cost_to_go_set(g, v)
    seen: set = set()
    for part in parts:
        costs = cost_to_go_set(g, list(part))
        if costs & seen:
            return False
        seen |= costs
    return seen == target


def validate_bootstrap(g: Graph, v: str, X_v: Iterable[str], parts: Sequence, V0: Iterable[str] = ()) -> bool:
    """Bootstrap condition for ``V(X_v)`` in terms of part values.

    ``parts`` is a list of ``(V_i, X_i)``; ``V0`` holds the cost nodes kept
    as empirical terms.
    """
    X_v = set(X_v)
    V0 = set(V0)
    if not check_decomposition(g, v, [V0] + [set(p[0]) for p in parts]):
        raise DecompositionInvalid(f"parts do not partition the cost-to-go of {v!r}")
    if all(X_v <= set(X_i) for _, X_i in parts):
        return True
    return all(
        is_markov(g, X_i, list(V_i)) and X_v <= ancestors_closure(g, X_i)
        for V_i, X_i in parts
    )


def analysis_report(g: Graph, v: str, sets: dict | None = None) -> dict:
    """Per-node verdicts of the analysis operations, as plain JSON data."""
    sets = sets or {}
    report: dict = {
        "node": v,
        "kind": g.kind(v),
        "descendants": list(g.sort(descendants(g, v))),
        "cost_to_go": list(g.sort(cost_to_go_set(g, v))),
        "ancestors": list(g.sort(ancestors(g, v))),
    }
    rows = []
    for label, members in sorted(sets.items()):
        members = list(g.sort(members))
        row = {
            "set": label,
            "members": members,
            "det_closure": list(g.sort(det_closure(g, members))),
            "ancestors_closure": list(g.sort(ancestors_closure(g, members))),
            "markov": is_markov(g, members, v),
        }
        if g.kind(v) == STOCHASTIC:
            row["baseline"] = is_valid_baseline_set(g, v, members)
            row["critic"] = is_valid_critic_set(g, v, members)
            row["maximal_congruent_baseline"] = list(g.sort(maximal_congruent_baseline(g, v, members)))
        if g.kind(v) == INPUT:
            row["separator"] = separator_verdict(g, v, members).to_json()
        if g.kind(v) == COST:
            rd = root_decomposition(g, v, members)
            row["root_decomposition"] = {"V": list(g.sort(rd.V)), "W": list(g.sort(rd.W))}
        rows.append(row)
    report["sets"] = rows
    return report
