"""Ground truth by exhaustive enumeration.

Discrete nodes are expanded over their support; Gaussian nodes over
Gauss-Hermite abscissae (weights become probabilities).  Everything
downstream -- values, critics, gradient-critics, exact gradients, moments,
conditional independence -- is a weighted sum over the resulting atoms.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from numpy.polynomial.hermite import hermgauss

from . import autodiff as ad
from .graph_core import (
    COST,
    INPUT,
    STOCHASTIC,
    Assignment,
    Categorical,
    Gaussian,
    Graph,
    _input_values,
    cost_to_go_set,
)

DEFAULT_CAP = 10 ** 6
DEFAULT_ORDER = 16


class SupportTooLarge(Exception):
    pass


class UnsupportedFamily(Exception):
    pass


def support_cap() -> int:
    return int(os.environ.get("SCG_SUPPORT_CAP", DEFAULT_CAP))


@dataclass
class SupportTable:
    graph: Graph
    inputs: dict
    atoms: Assignment
    prob: np.ndarray
    order: int = DEFAULT_ORDER
    clamp: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.prob)

    def column(self, name: str) -> np.ndarray:
        return self.atoms.values[name]


def enumerate_support(g: Graph, inputs: Mapping[str, float] | None = None, order: int = DEFAULT_ORDER,
                      cap: int | None = None, clamp: Mapping[str, float] | None = None) -> SupportTable:
    """All joint atoms with probabilities.

    ``clamp`` fixes node values (an intervention); clamped stochastic nodes
    keep their log-probability but are not expanded.
    """
    cap = support_cap() if cap is None else cap
    clamp = dict(clamp or {})
    fixed = _input_values(g, inputs)
    size = 1
    for name in g.stochastic:
        if name in clamp:
            continue
        fam = g.nodes[name].family
        if isinstance(fam, Categorical):
            size *= fam.size
        elif isinstance(fam, Gaussian):
            size *= order
        else:
            raise UnsupportedFamily(f"node {name!r}: {type(fam).__name__}")
    if size > cap:
        raise SupportTooLarge(f"support of {size} atoms exceeds cap {cap}")

    t_nodes, t_weights = hermgauss(order)
    gh_x = np.sqrt(2.0) * t_nodes
    gh_p = t_weights / np.sqrt(np.pi)

    values: dict = {}
    logp: dict = {}
    prob = np.ones(1)

    def expand(k: int):
        nonlocal prob
        rows = np.repeat(np.arange(len(prob)), k)
        for key in values:
            values[key] = values[key][rows]
        for key in logp:
            logp[key] = logp[key][rows]
        prob = prob[rows]
        return rows

    for name in g.order:
        node = g.nodes[name]
        n = len(prob)
        if node.kind == INPUT:
            values[name] = np.full(n, fixed[name])
            continue
        if name in clamp and node.kind != STOCHASTIC:
            values[name] = np.full(n, float(clamp[name]))
            continue
        if node.kind != STOCHASTIC:
            values[name] = np.broadcast_to(np.asarray(node.expr.evaluate(values), dtype=float), (n,)).copy()
            continue
        fam = node.family
        if name in clamp:
            x = np.full(n, float(clamp[name]))
            values[name] = x
            logp[name] = np.broadcast_to(np.asarray(fam.log_prob(x, values), dtype=float), (n,)).copy()
            continue
        if isinstance(fam, Categorical):
            probs = np.stack([np.broadcast_to(p, (n,)) for p in fam.probs(values)], axis=1)
            k = fam.size
            expand(k)
            choice = np.tile(np.arange(k), n)
            p = probs.reshape(-1)
            values[name] = choice.astype(float)
            logp[name] = np.log(p)
            prob = prob * p
        else:
            mu, sigma = fam.params(values)
            mu = np.broadcast_to(mu, (n,))
            sigma = np.broadcast_to(sigma, (n,))
            rows = expand(order)
            x = mu[rows] + sigma[rows] * np.tile(gh_x, n)
            values[name] = x
            logp[name] = np.asarray(fam.log_prob(x, values), dtype=float)
            prob = prob * np.tile(gh_p, n)
    atoms = Assignment(values, logp, len(prob))
    return SupportTable(g, dict(fixed), atoms, prob, order, clamp)


# ---------------------------------------------------------------- values

def _target_values(table: SupportTable, S) -> np.ndarray:
    g = table.graph
    if callable(S):
        out = S(table.atoms)
    elif isinstance(S, str) and S == "total":
        out = sum((table.column(c) for c in g.costs), 0.0)
    elif isinstance(S, str):
        out = table.atoms.cost_to_go(g, S)
    elif isinstance(S, (set, frozenset, list, tuple)):
        out = table.atoms.cost_to_go(g, list(S))
    else:
        out = S
    return np.broadcast_to(np.asarray(out, dtype=float), (len(table),))


@dataclass
class ValueFn:
    """Conditional expectation table keyed by values of ``members``."""

    members: tuple
    table: dict
    mass: dict
    features: tuple = ()

    def keys_of(self, a: Assignment) -> list:
        cols = [np.broadcast_to(a.values[m], (a.n or 1,)) for m in self.members]
        cols += [np.broadcast_to(f(a), (a.n or 1,)) for f in self.features]
        if not cols:
            return [()] * (a.n or 1)
        return list(zip(*[c.tolist() for c in cols]))

    def lookup(self, a: Assignment) -> np.ndarray:
        out = np.array([self.table[k] for k in self.keys_of(a)], dtype=float)
        return out if a.n is not None else float(out[0])

    def __call__(self, a: Assignment):
        return self.lookup(a)

    def scaled(self, c: float) -> "ValueFn":
        return ValueFn(self.members, {k: c * v for k, v in self.table.items()}, dict(self.mass), self.features)


def group_keys(table: SupportTable, members: Iterable[str], features: tuple = ()) -> tuple[list, np.ndarray]:
    members = table.graph.sort(members)
    cols = [table.column(m) for m in members] + [np.broadcast_to(f(table.atoms), (len(table),)) for f in features]
    if not cols:
        return [()], np.zeros(len(table), dtype=int)
    stacked = np.stack(cols, axis=1)
    uniq, inverse = np.unique(stacked, axis=0, return_inverse=True)
    return [tuple(r) for r in uniq.tolist()], inverse.reshape(-1)


def exact_value(table: SupportTable, X: Iterable[str], S="total", features: tuple = ()) -> ValueFn:
    """V(X; S): conditional expectation of S for every reachable key of X."""
    members = table.graph.sort(X)
    keys, inv = group_keys(table, members, features)
    s = _target_values(table, S)
    mass = np.bincount(inv, weights=table.prob, minlength=len(keys))
    num = np.bincount(inv, weights=table.prob * s, minlength=len(keys))
    return ValueFn(members, dict(zip(keys, (num / mass).tolist())), dict(zip(keys, mass.tolist())), tuple(features))


def conditional_mean(table: SupportTable, X: Iterable[str], values: np.ndarray) -> np.ndarray:
    """Per-atom E[values | X] (the ValueFn broadcast back onto atoms)."""
    keys, inv = group_keys(table, X)
    mass = np.bincount(inv, weights=table.prob, minlength=len(keys))
    num = np.bincount(inv, weights=table.prob * values, minlength=len(keys))
    return (num / mass)[inv]


def per_atom(table: SupportTable, vf: ValueFn) -> np.ndarray:
    return np.asarray(vf.lookup(table.atoms), dtype=float)


def surrogate_gradients(g: Graph, a: Assignment, wrt: Iterable[str]) -> dict:
    """Per-row dL^s/dw of the plain score-function surrogate (empirical critics)."""
    tape = ad.record(g, a)
    loss = 0.0
    for c in g.costs:
        loss = loss + tape.node_var[c]
    for v in g.stochastic:
        loss = loss + tape.logp_var[v] * a.cost_to_go(g, v)
    gm = ad.backward(tape, loss)
    n = a.n or 1
    return {w: np.broadcast_to(np.asarray(gm[w], dtype=float), (n,)) for w in wrt}


@dataclass
class GradCritic:
    anchor: str
    value: ValueFn


def exact_gradient_critic(table: SupportTable, v: str, C: Iterable[str]) -> GradCritic:
    """g_v(C) = E[dL^s/dv | C] over the enumerated support."""
    grads = surrogate_gradients(table.graph, table.atoms, [v])[v]
    return GradCritic(v, exact_value(table, C, grads))


# ---------------------------------------------------------------- gradients

def expected_loss_var(table: SupportTable, params: Iterable[str], loss: Callable | None = None):
    """Tape expression for sum_atoms p(atom; theta) * L(atom; theta).

    Atoms stay fixed; each probability is rescaled by exp(logp(theta) -
    logp(theta0)), which reproduces p at theta0 and carries its derivative.
    """
    g = table.graph
    tape = ad.record(g, table.atoms)
    logp = 0.0
    logp0 = np.zeros(len(table))
    for v in g.stochastic:
        if v in table.clamp:
            continue
        logp = logp + tape.logp_var[v]
        logp0 = logp0 + table.atoms.logp[v]
    weight = ad.exp(logp - logp0) * table.prob if isinstance(logp, ad.Var) else table.prob
    L = 0.0
    for c in g.costs:
        L = L + tape.node_var[c]
    if loss is not None:
        L = loss(tape)
    J = ad.total(weight * L)
    return tape, J


def exact_parameter_gradient(g: Graph, inputs: Mapping[str, float], theta: str, order: int = DEFAULT_ORDER,
                             table: SupportTable | None = None) -> float:
    if g.kind(theta) != INPUT:
        raise ValueError(f"{theta!r} is not an input node")
    table = table or enumerate_support(g, inputs, order)
    tape, J = expected_loss_var(table, [theta])
    if not isinstance(J, ad.Var):
        return 0.0
    return float(np.sum(ad.backward(tape, J)[theta]))


def expected_loss(g: Graph, inputs: Mapping[str, float], order: int = DEFAULT_ORDER) -> float:
    table = enumerate_support(g, inputs, order)
    L = sum((table.column(c) for c in g.costs), np.zeros(len(table)))
    return float(np.sum(table.prob * L))


# ---------------------------------------------------------------- checks

def check_ci_numeric(table: SupportTable, A: Iterable[str], B: Iterable[str], Z: Iterable[str],
                     tol: float = 1e-9) -> bool:
    """True iff p(A, B | z) factorizes within ``tol`` total variation for every z."""
    A, B, Z = list(A), list(B), list(Z)
    zkeys, zinv = group_keys(table, Z)
    akeys, ainv = group_keys(table, A)
    bkeys, binv = group_keys(table, B)
    nz, na, nb = len(zkeys), len(akeys), len(bkeys)
    joint = np.zeros((nz, na, nb))
    np.add.at(joint, (zinv, ainv, binv), table.prob)
    pz = joint.sum(axis=(1, 2))
    cond = joint / pz[:, None, None]
    prod = cond.sum(axis=2)[:, :, None] * cond.sum(axis=1)[:, None, :]
    tv = 0.5 * np.abs(cond - prod).sum(axis=(1, 2))
    return bool(np.all(tv <= tol))


def estimator_moments(table: SupportTable, estimator) -> tuple[float, float]:
    """Exact mean and variance of a per-atom quantity (array or callable)."""
    x = estimator(table.atoms) if callable(estimator) else estimator
    x = np.broadcast_to(np.asarray(x, dtype=float), (len(table),))
    mean = float(np.sum(table.prob * x))
    var = float(np.sum(table.prob * (x - mean) ** 2))
    return mean, var


def score(table: SupportTable, v: str, theta: str) -> np.ndarray:
    """Per-atom d log p(v) / d theta with the sampled value held fixed."""
    tape = ad.record(table.graph, table.atoms)
    s = ad.backward(tape, tape.logp_var[v])[theta]
    return np.broadcast_to(np.asarray(s, dtype=float), (len(table),))


def clamped_value(g: Graph, inputs: Mapping[str, float], clamp: Mapping[str, float], X: Iterable[str], S,
                  order: int = DEFAULT_ORDER) -> ValueFn:
    """E[S | X, do(clamp)]; with clamped nodes whose parents are fixed by X this is conditioning."""
    table = enumerate_support(g, inputs, order, clamp=clamp)
    return exact_value(table, X, S)
