"""Gradient estimators for stochastic computation graphs.

An ``EstimatorSpec`` picks, per stochastic node, a critic and a baseline
(plus optional debiasing or reparameterization) and optionally injects
gradient-critics at a separator.  ``compile_estimator`` validates the EstimatorSpec
against the graph and returns an object that evaluates per-sample gradients
on any assignment batch: forward samples for Monte Carlo, or the atoms of a
full enumeration for exact moments.

Value sources are either ``"exact"`` (computed from the enumeration oracle),
``"zero"``, or any callable mapping an assignment batch to values (e.g. a
fitted table from ``value_store``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .exact_oracle import (
    DEFAULT_ORDER,
    SupportTable,
    ValueFn,
    UnsupportedFamily,
    conditional_mean,
    enumerate_support,
    exact_parameter_gradient,
    exact_value,
    group_keys,
    score,
    surrogate_gradients,
)
from .graph_analysis import (
    NOT_SEPARATOR,
    ancestors_closure,
    check_decomposition,
    det_closure,
    is_congruent,
    is_markov,
    is_valid_baseline_set,
    is_valid_critic_set,
    separator_verdict,
)
from .graph_core import (
    COST,
    DETERMINISTIC,
    INPUT,
    STOCHASTIC,
    Assignment,
    Categorical,
    Gaussian,
    Graph,
    Node,
    build_graph,
    cost_to_go_set,
    forward_sample,
)
from .expr import Op, Ref
from .value_store import DEGREE, PolyValueFn

CLAMP_POINTS = (-1.5, -0.5, 0.5, 1.5)


class InvalidSpec(Exception):
    def __init__(self, node: str | None, check: str, detail: str = ""):
        self.node = node
        self.check = check
        msg = f"node {node!r}: {check}" if node is not None else check
        super().__init__(msg + (f" ({detail})" if detail else ""))


class NotCongruent(InvalidSpec):
    pass


class NotAChain(Exception):
    pass


class MissingCriticKey(Exception):
    pass


class PreconditionFailed(Exception):
    pass


# ---------------------------------------------------------------- spec types

@dataclass(frozen=True)
class Scaled:
    """A value source multiplied by a constant (used to build deliberately wrong critics)."""

    source: Any
    factor: float


@dataclass(frozen=True)
class Empirical:
    pass


@dataclass(frozen=True)
class ValueCritic:
    C: tuple
    source: Any = "exact"
    bucket: tuple | None = None  # (node, width): key on floor(value / width) of that member


@dataclass(frozen=True)
class Part:
    X: tuple
    source: Any = "exact"
    V: tuple | None = None  # nodes whose cost-to-go this part averages; defaults to X

    @property
    def nodes(self) -> tuple:
        return self.V if self.V is not None else self.X


@dataclass(frozen=True)
class PartialAverage:
    V0: tuple
    parts: tuple = ()


@dataclass(frozen=True)
class Mixture:
    terms: tuple  # ((weight, critic), ...) with weights summing to one


@dataclass(frozen=True)
class NoBaseline:
    pass


@dataclass(frozen=True)
class ValueBaseline:
    B: tuple
    source: Any = "exact"


@dataclass(frozen=True)
class OptimalBaseline:
    B: tuple


@dataclass(frozen=True)
class NodeChoice:
    critic: Any = Empirical()
    baseline: Any = NoBaseline()
    debias: bool = False
    reparameterize: bool = False


@dataclass(frozen=True)
class Injection:
    """Gradient-critics injected at a separator of the input ``u``.

    ``sources`` has one ``(C_i, source)`` per separator member.
    """

    u: str
    separator: tuple
    sources: tuple
    use_holds: bool = True


@dataclass
class EstimatorSpec:
    name: str = ""
    nodes: dict = field(default_factory=dict)
    injection: Injection | None = None
    params: tuple | None = None

    def choice(self, v: str) -> NodeChoice:
        return self.nodes.get(v, NodeChoice())


@dataclass
class GradientEstimate:
    mean: dict
    stderr: dict
    n: int
    stderr_defined: bool = True


# ---------------------------------------------------------------- graph helpers

def is_discrete(g: Graph, name: str, _memo: dict | None = None) -> bool:
    memo = {} if _memo is None else _memo
    if name in memo:
        return memo[name]
    kind = g.kind(name)
    if kind == INPUT:
        out = True
    elif kind == STOCHASTIC:
        out = isinstance(g.nodes[name].family, Categorical)
    else:
        out = all(is_discrete(g, p, memo) for p in g.parents(name))
    memo[name] = out
    return out


def noise_name(v: str) -> str:
    return f"eps_{v}"


def reparameterize(g: Graph, v: str, transform: str = "location-scale") -> Graph:
    """Rewrite Gaussian ``v`` as ``mean + exp(logstd) * eps`` with a new root ``eps ~ N(0, 1)``."""
    if transform != "location-scale":
        raise ValueError(f"unknown transform {transform!r}")
    node = g.nodes[v]
    if node.kind != STOCHASTIC:
        raise UnsupportedFamily(f"node {v!r} is not stochastic")
    if not isinstance(node.family, Gaussian):
        raise UnsupportedFamily(f"node {v!r}: only Gaussian nodes admit the location-scale transform")
    eps = noise_name(v)
    if eps in g.nodes:
        raise ValueError(f"name {eps!r} already used")
    fam = node.family
    body = Op("add", (fam.mean, Op("mul", (Op("exp", (fam.logstd,)), Ref(eps)))))
    decls = []
    for name in g.order:
        if name == v:
            decls.append(Node(eps, STOCHASTIC, (), family=Gaussian(_const(0.0), _const(0.0))))
            decls.append(Node(v, DETERMINISTIC, tuple(node.parents) + (eps,), expr=body))
        else:
            decls.append(g.nodes[name])
    return build_graph(decls)


def _const(x: float):
    from .expr import Const

    return Const(x)


def reparameterize_all(g: Graph, nodes: Iterable[str] | None = None) -> Graph:
    nodes = [n for n in g.stochastic if isinstance(g.nodes[n].family, Gaussian)] if nodes is None else list(nodes)
    for n in nodes:
        g = reparameterize(g, n)
    return g


def _single_noise_root(g: Graph, p: str, child: str) -> bool:
    return g.kind(p) == STOCHASTIC and not g.parents(p) and set(g.children[p]) == {child}


# ---------------------------------------------------------------- exact sources

def _target_key(target) -> Any:
    return target if isinstance(target, str) else tuple(sorted(target))


class Oracle:
    """Exact conditional expectations for one graph and input values."""

    def __init__(self, g: Graph, inputs: Mapping[str, float] | None, order: int = DEFAULT_ORDER):
        self.graph = g
        self.inputs = dict(inputs or {})
        self.order = order
        self._cache: dict = {}
        self._discrete: dict = {}

    @cached_property
    def table(self) -> SupportTable:
        return enumerate_support(self.graph, self.inputs, self.order)

    def discrete(self, name: str) -> bool:
        return is_discrete(self.graph, name, self._discrete)

    def value(self, members: Iterable[str], target, bucket: tuple | None = None):
        """V(members; L(target)) as a callable on assignment batches."""
        g = self.graph
        members = g.sort(members)
        key = ("value", members, _target_key(target), bucket)
        if key in self._cache:
            return self._cache[key]
        cont = [m for m in members if not self.discrete(m)]
        if not cont:
            features = ()
            keep = members
            if bucket is not None:
                node, width = bucket
                keep = tuple(m for m in members if m != node)
                features = (lambda a, node=node, width=width: np.floor(np.asarray(a.values[node]) / width),)
            out = exact_value(self.table, keep, target, features)
        elif len(cont) == 1 and bucket is None:
            out = self.poly(members, cont[0], target)
        else:
            raise InvalidSpec(None, "exact values support at most one continuous member", str(list(cont)))
        self._cache[key] = out
        return out

    def poly(self, members: Iterable[str], anchor: str, target) -> PolyValueFn:
        """Per-key cubic in ``anchor`` from clamped enumerations.

        Exact when the conditional expectation is a polynomial of degree at
        most 3 in the anchor; requires the anchor's parents to be fixed by the
        discrete members so that clamping coincides with conditioning.
        """
        g = self.graph
        key = ("poly", g.sort(members), anchor, _target_key(target))
        if key in self._cache:
            return self._cache[key]
        discrete = g.sort(set(members) - {anchor})
        known = det_closure(g, discrete)
        for p in g.parents(anchor):
            if p not in known and not _single_noise_root(g, p, anchor):
                raise InvalidSpec(anchor, "anchor parents must be fixed by the discrete conditioning members", p)
        tables = [exact_value(enumerate_support(g, self.inputs, self.order, clamp={anchor: x}), discrete, target)
                  for x in CLAMP_POINTS]
        params = {}
        xs = np.asarray(CLAMP_POINTS)
        for k in tables[0].table:
            ys = np.array([t.table[k] for t in tables])
            params[k] = {"center": 0.0, "scale": 1.0,
                         "coef": np.polynomial.polynomial.polyfit(xs, ys, DEGREE).tolist()}
        out = PolyValueFn(discrete, anchor, params)
        self._cache[key] = out
        return out

    def grad_critic(self, v: str, C: Iterable[str]):
        """g_v(C) as the anchor derivative of the exact critic; needs C Markov for v."""
        C = set(C)
        if v not in C:
            raise InvalidSpec(v, "gradient-critic set must contain the node")
        if not is_markov(self.graph, C, v):
            raise InvalidSpec(v, "gradient-critic set is not Markov", str(sorted(C)))
        poly = self.poly(C, v, v)
        return poly.derivative


def _zero(a: Assignment):
    return 0.0


def _resolve(source, oracle: Oracle, members, target, bucket=None):
    if isinstance(source, Scaled):
        inner = _resolve(source.source, oracle, members, target, bucket)
        if hasattr(inner, "scaled"):
            return inner.scaled(source.factor)
        return lambda a, f=inner, c=source.factor: c * np.asarray(f(a), dtype=float)
    if isinstance(source, str):
        if source == "exact":
            return oracle.value(members, target, bucket)
        if source == "zero":
            return _zero
        raise InvalidSpec(None, f"unknown value source {source!r}")
    if callable(source):
        return source
    raise InvalidSpec(None, f"unusable value source {source!r}")


def _grad_source(source, oracle: Oracle, v: str, C):
    if isinstance(source, str):
        if source == "exact":
            return oracle.grad_critic(v, C)
        if source == "zero":
            return _zero
        raise InvalidSpec(v, f"unknown gradient source {source!r}")
    if isinstance(source, PolyValueFn):
        return source.derivative
    if hasattr(source, "value") and isinstance(getattr(source, "value"), ValueFn):
        vf = source.value

        def lookup(a, vf=vf):
            try:
                return vf.lookup(a)
            except KeyError as exc:
                raise MissingCriticKey(f"no gradient-critic entry for key {exc.args[0]!r}") from None

        return lookup
    if callable(source):
        return source
    raise InvalidSpec(v, f"unusable gradient source {source!r}")


def _arr(x, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(x, dtype=float), (n,))


# ---------------------------------------------------------------- validation

def critic_set(g: Graph, v: str, critic) -> frozenset:
    """The conditioning set a critic choice amounts to (all nodes for Empirical)."""
    if isinstance(critic, Empirical):
        return frozenset(g.order)
    if isinstance(critic, ValueCritic):
        return frozenset(critic.C)
    if isinstance(critic, PartialAverage):
        return partial_average_set(g, v, critic)
    if isinstance(critic, Mixture):
        out = frozenset(g.order)
        for _, c in critic.terms:
            out &= critic_set(g, v, c)
        return out
    raise InvalidSpec(v, f"unknown critic {critic!r}")


def partial_average_set(g: Graph, v: str, pa: PartialAverage) -> frozenset:
    if not check_decomposition(g, v, [set(pa.V0)] + [set(p.nodes) for p in pa.parts]):
        raise InvalidSpec(v, "partial average parts do not decompose the cost-to-go")
    X_v = frozenset(g.order)
    for p in pa.parts:
        if not is_markov(g, p.X, list(p.nodes)):
            raise InvalidSpec(v, "partial average part set is not Markov", str(sorted(p.X)))
        X_v &= ancestors_closure(g, p.X)
    for p in pa.parts:
        if not set(p.X) <= X_v:
            raise InvalidSpec(v, "partial average part set is not contained in the implied critic set", str(sorted(p.X)))
    if not set(pa.V0) <= det_closure(g, X_v):
        raise InvalidSpec(v, "empirical costs are not computable from the implied critic set")
    return X_v


def validate_choice(g: Graph, v: str, choice: NodeChoice) -> None:
    if g.kind(v) != STOCHASTIC:
        raise InvalidSpec(v, "estimator choices apply to stochastic nodes only")
    critic = choice.critic
    if isinstance(critic, ValueCritic):
        if not is_valid_critic_set(g, v, critic.C):
            raise InvalidSpec(v, "critic set fails the critic validity check", str(sorted(critic.C)))
        if critic.bucket is not None and critic.bucket[0] not in critic.C:
            raise InvalidSpec(v, "bucketed node must belong to the critic set")
    elif isinstance(critic, Mixture):
        total = sum(w for w, _ in critic.terms)
        if abs(total - 1.0) > 1e-12 or any(w < 0 for w, _ in critic.terms):
            raise InvalidSpec(v, "mixture weights must be a convex combination")
        for _, c in critic.terms:
            validate_choice(g, v, NodeChoice(critic=c))
    else:
        Xv = critic_set(g, v, critic)
        if not is_valid_critic_set(g, v, Xv):
            raise InvalidSpec(v, "implied critic set fails the critic validity check", str(sorted(Xv)))
    base = choice.baseline
    if isinstance(base, (ValueBaseline, OptimalBaseline)):
        if not is_valid_baseline_set(g, v, base.B):
            raise InvalidSpec(v, "baseline set contains descendants of the node", str(sorted(base.B)))
    if isinstance(base, OptimalBaseline):
        if not isinstance(critic, (Empirical, ValueCritic)) or not is_congruent(base.B, critic_set(g, v, critic)):
            raise NotCongruent(v, "optimal baseline must be congruent with the critic set")
    if choice.debias:
        if not isinstance(critic, ValueCritic):
            raise InvalidSpec(v, "debiasing needs a value critic")
        if not isinstance(g.nodes[v].family, Gaussian):
            raise InvalidSpec(v, "debiasing needs a reparameterizable (Gaussian) node")
        if not is_markov(g, critic.C, v):
            raise InvalidSpec(v, "debiasing needs a Markov critic set")
    if choice.reparameterize:
        raise InvalidSpec(v, "reparameterized nodes are deterministic after compilation")


def validate_spec(g: Graph, spec: EstimatorSpec) -> None:
    for v, choice in spec.nodes.items():
        if v not in g:
            raise InvalidSpec(v, "unknown node")
        validate_choice(g, v, choice)
    inj = spec.injection
    if inj is not None:
        if g.kind(inj.u) != INPUT:
            raise InvalidSpec(inj.u, "gradient-critic injection is supported at input nodes")
        if len(inj.sources) != len(inj.separator):
            raise InvalidSpec(inj.u, "one gradient-critic source per separator member")
        if separator_verdict(g, inj.u, inj.separator).kind == NOT_SEPARATOR:
            raise ad.NotSeparator(f"{list(inj.separator)} does not separate {inj.u!r} from the loss")


# ---------------------------------------------------------------- compilation

class CompiledEstimator:
    def __init__(self, g: Graph, inputs: Mapping[str, float] | None, spec: EstimatorSpec, check: bool = True,
                 order: int = DEFAULT_ORDER, oracle: Oracle | None = None):
        rep = [v for v, c in spec.nodes.items() if c.reparameterize]
        if rep:
            g = reparameterize_all(g, rep)
            spec = EstimatorSpec(spec.name, {v: c for v, c in spec.nodes.items() if not c.reparameterize},
                                 spec.injection, spec.params)
        if check:
            validate_spec(g, spec)
        self.graph = g
        self.spec = spec
        self.inputs = dict(inputs or {})
        self.params = tuple(spec.params) if spec.params is not None else g.inputs
        self.oracle = oracle if oracle is not None and oracle.graph is g else Oracle(g, self.inputs, order)

    # -- per-node advantages
    def critic_values(self, a: Assignment, v: str, critic) -> np.ndarray:
        g, n = self.graph, a.n or 1
        if isinstance(critic, Empirical):
            return _arr(a.cost_to_go(g, v), n)
        if isinstance(critic, ValueCritic):
            return _arr(_resolve(critic.source, self.oracle, critic.C, v, critic.bucket)(a), n)
        if isinstance(critic, PartialAverage):
            out = sum((_arr(a.values[c], n) for c in critic.V0), np.zeros(n))
            for p in critic.parts:
                out = out + _arr(_resolve(p.source, self.oracle, p.X, list(p.nodes))(a), n)
            return out
        if isinstance(critic, Mixture):
            return sum((w * self.critic_values(a, v, c) for w, c in critic.terms), np.zeros(n))
        raise InvalidSpec(v, f"unknown critic {critic!r}")

    def baseline_values(self, a: Assignment, v: str, choice: NodeChoice) -> np.ndarray:
        base, n = choice.baseline, a.n or 1
        if isinstance(base, NoBaseline):
            return np.zeros(n)
        if isinstance(base, ValueBaseline):
            return _arr(_resolve(base.source, self.oracle, base.B, v)(a), n)
        if isinstance(base, OptimalBaseline):
            return _arr(self._optimal(v, choice)(a), n)
        raise InvalidSpec(v, f"unknown baseline {base!r}")

    def _optimal(self, v: str, choice: NodeChoice) -> ValueFn:
        key = ("optimal", v, choice)
        cache = self.oracle._cache
        if key not in cache:
            table = self.oracle.table
            q = self.critic_values(table.atoms, v, choice.critic)
            cache[key] = optimal_baseline_values(table, v, q, choice.baseline.B, self._param())
        return cache[key]

    def _param(self) -> str:
        if len(self.params) != 1:
            raise InvalidSpec(None, "optimal baselines need exactly one parameter")
        return self.params[0]

    # -- surrogate loss
    def surrogate(self, a: Assignment):
        g = self.graph
        n = a.n or 1
        t = ad.record(g, a)
        loss = 0.0
        for c in g.costs:
            loss = loss + t.node_var[c]
        for v in g.stochastic:
            choice = self.spec.choice(v)
            b = self.baseline_values(a, v, choice)
            if choice.debias:
                loss = loss + self._debias_terms(t, a, v, choice, b)
                continue
            q = self.critic_values(a, v, choice.critic)
            loss = loss + t.logp_var[v] * (q - b)
        return t, loss

    def _debias_terms(self, t, a: Assignment, v: str, choice: NodeChoice, b: np.ndarray):
        g = self.graph
        n = a.n or 1
        critic = choice.critic
        src = critic.source
        if isinstance(src, (str, Scaled)) and src != "zero":
            src = _resolve(src, self.oracle, critic.C, v)
        fam = g.nodes[v].family
        env = t.node_var
        mean = fam.mean.evaluate(env, ad.VARLIB)
        logstd = fam.logstd.evaluate(env, ad.VARLIB)
        eps = (np.asarray(a.values[v]) - ad._val(mean)) / np.exp(ad._val(logstd))
        moved = mean + ad.exp(logstd) * eps
        if isinstance(src, str) and src == "zero":
            qhat, pathwise = np.zeros(n), 0.0
        elif isinstance(src, PolyValueFn):
            qhat, pathwise = _arr(src.value(a), n), src.value_var(a, moved)
        else:
            raise InvalidSpec(v, "debiasing needs a critic differentiable in the node (polynomial source)")
        return t.logp_var[v] * (_arr(a.cost_to_go(g, v), n) - qhat - b) + pathwise

    # -- per-sample gradients
    def samples(self, a: Assignment) -> dict:
        n = a.n or 1
        t, loss = self.surrogate(a)
        out = {}
        inj = self.spec.injection
        if isinstance(loss, ad.Var):
            gm = ad.backward(t, loss)
            out = {p: _arr(gm[p], n).copy() for p in self.params}
        else:
            out = {p: np.zeros(n) for p in self.params}
        if inj is not None:
            injected = [_arr(_grad_source(src, self.oracle, m, C)(a), n)
                        for m, (C, src) in zip(inj.separator, inj.sources)]
            out[inj.u] = _arr(ad.horizon_backprop(t, inj.u, list(inj.separator), injected, inj.use_holds), n).copy()
        return out

    def exact_moments(self) -> dict:
        """{param: (mean, variance)} over the full enumeration."""
        table = self.oracle.table
        vals = self.samples(table.atoms)
        out = {}
        for p, x in vals.items():
            mean = float(np.sum(table.prob * x))
            out[p] = (mean, float(np.sum(table.prob * (x - mean) ** 2)))
        return out

    def exact_gradient(self) -> dict:
        return {p: exact_parameter_gradient(self.graph, self.inputs, p, self.oracle.order, self.oracle.table)
                for p in self.params}

    def monte_carlo(self, n: int, seed: int) -> GradientEstimate:
        a = forward_sample(self.graph, self.inputs, seed, n=n)
        vals = self.samples(a)
        mean = {p: float(np.mean(x)) for p, x in vals.items()}
        if n > 1:
            stderr = {p: float(np.std(x, ddof=1) / np.sqrt(n)) for p, x in vals.items()}
        else:
            stderr = {p: 0.0 for p in vals}
        return GradientEstimate(mean, stderr, n, n > 1)


def compile_estimator(g: Graph, inputs, spec: EstimatorSpec, check: bool = True,
                      order: int = DEFAULT_ORDER) -> CompiledEstimator:
    return CompiledEstimator(g, inputs, spec, check, order)


def surrogate_loss(g: Graph, a: Assignment, spec: EstimatorSpec, inputs: Mapping[str, float] | None = None,
                   check: bool = True):
    """(tape, L^s) for the assignment; ``backward`` of L^s is the gradient estimate."""
    if inputs is None:
        inputs = {p: float(np.broadcast_to(a.values[p], (a.n or 1,))[0]) for p in g.inputs}
    return CompiledEstimator(g, inputs, spec, check).surrogate(a)


# ---------------------------------------------------------------- named estimators

def score_function_estimate(g: Graph, spec: EstimatorSpec, inputs, n: int, seed: int) -> GradientEstimate:
    if any(c.reparameterize for c in spec.nodes.values()):
        raise InvalidSpec(None, "score-function estimates use no reparameterization")
    return compile_estimator(g, inputs, spec).monte_carlo(n, seed)


def pathwise_estimate(g_rep: Graph, spec: EstimatorSpec, inputs, n: int, seed: int) -> GradientEstimate:
    return compile_estimator(g_rep, inputs, spec).monte_carlo(n, seed)


def optimal_baseline_values(table: SupportTable, v: str, q: np.ndarray, B: Iterable[str], param: str) -> ValueFn:
    s2 = score(table, v, param) ** 2
    keys, inv = group_keys(table, B)
    w = np.bincount(inv, weights=table.prob * s2, minlength=len(keys))
    num = np.bincount(inv, weights=table.prob * s2 * q, minlength=len(keys))
    mass = np.bincount(inv, weights=table.prob, minlength=len(keys))
    plain = np.bincount(inv, weights=table.prob * q, minlength=len(keys)) / mass
    vals = np.where(w > 0, num / np.where(w > 0, w, 1.0), plain)
    return ValueFn(table.graph.sort(B), dict(zip(keys, vals.tolist())), dict(zip(keys, mass.tolist())))


def optimal_baseline(table: SupportTable, v: str, C: Iterable[str], B: Iterable[str], param: str | None = None) -> ValueFn:
    """B*(B) = E[s^2 Q(C) | B] / E[s^2 | B] for the score s of ``v``."""
    g = table.graph
    if not is_congruent(B, C):
        raise NotCongruent(v, "baseline set is not contained in the critic set")
    if param is None:
        if len(g.inputs) != 1:
            raise ValueError("specify the parameter")
        param = g.inputs[0]
    q = exact_value(table, C, v).lookup(table.atoms)
    return optimal_baseline_values(table, v, np.asarray(q, dtype=float), B, param)


def kstep_and_lambda(chain: Sequence[tuple], action: str, k: int | None = None, lam: float | None = None,
                     source: Any = "exact"):
    """k-step (or lambda-weighted) critic for ``action`` on a declared chain.

    ``chain`` lists ``(state, action, reward)`` per step.  k = 0 is the
    state-action value; k >= 1 sums rewards t..t+k and bootstraps on the
    value of state t+k+1, which becomes the empirical return once that
    state lies past the end of the chain.
    """
    steps = list(chain)
    index = {step[1]: t for t, step in enumerate(steps)}
    if not steps or action not in index:
        raise NotAChain(f"{action!r} is not an action of a declared chain")
    t = index[action]
    full = max(1, len(steps) - t - 1)  # smallest k whose critic is the empirical return
    if (k is None) == (lam is None):
        raise ValueError("give exactly one of k and lam")
    if k is not None:
        if k < 0:
            raise ValueError("k must be non-negative")
        return _kstep(steps, t, k, source)
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    terms = [((1 - lam) * lam ** j, _kstep(steps, t, j, source)) for j in range(full)]
    terms.append((lam ** full, Empirical()))
    terms = tuple((w, c) for w, c in terms if w > 0)
    return terms[0][1] if len(terms) == 1 else Mixture(terms)


def _kstep(steps, t: int, k: int, source):
    if k == 0:
        return ValueCritic((steps[t][0], steps[t][1]), source)
    if t + k + 1 >= len(steps):
        return Empirical()
    V0 = tuple(steps[j][2] for j in range(t, t + k + 1))
    return PartialAverage(V0, (Part((steps[t + k + 1][0],), source),))


def gradient_critic_estimate(g_rep: Graph, inputs, u: str, S: Sequence[str], sources: Sequence, n: int, seed: int,
                             use_holds: bool = True) -> GradientEstimate:
    spec = EstimatorSpec("gradient-critic", injection=Injection(u, tuple(S), tuple(sources), use_holds), params=(u,))
    return compile_estimator(g_rep, inputs, spec).monte_carlo(n, seed)


def debiased_estimate(g: Graph, inputs, v: str, qhat, C: Iterable[str], n: int, seed: int) -> GradientEstimate:
    spec = EstimatorSpec("debiased", {v: NodeChoice(ValueCritic(tuple(C), qhat), debias=True)})
    return compile_estimator(g, inputs, spec).monte_carlo(n, seed)


def gradient_critic_bootstrap_check(table: SupportTable, u: str, S: Sequence[str], C_u: Iterable[str],
                                    parts: Sequence[Iterable[str]], tol: float = 1e-8) -> bool:
    """g_u == sum_i E[g_{v_i} dv_i/du | C_u] per key, on the enumeration."""
    g = table.graph
    S = list(S)
    C_u = set(C_u)
    parts = [set(p) for p in parts]
    if len(parts) != len(S):
        raise PreconditionFailed("one conditioning set per separator member is required")
    if separator_verdict(g, u, S).kind == NOT_SEPARATOR:
        raise PreconditionFailed(f"{S} does not separate {u!r} from the loss")
    for v, C in zip(S, parts):
        if not C_u <= C:
            raise PreconditionFailed(f"C_u is not contained in the set of {v!r}")
        if not is_markov(g, C, v):
            raise PreconditionFailed(f"the set of {v!r} is not Markov")
    grads = surrogate_gradients(g, table.atoms, [u] + S)
    lhs = conditional_mean(table, C_u, grads[u])
    tape = ad.record(g, table.atoms)
    order = sorted(range(len(S)), key=lambda i: g.position[S[i]])
    rhs = np.zeros(len(table))
    for rank, i in enumerate(order):
        holds = [S[j] for j in order[:rank]]
        dv = _arr(ad.backward_with_holds(tape, S[i], holds)[u], len(table))
        g_v = conditional_mean(table, parts[i], grads[S[i]])
        rhs = rhs + conditional_mean(table, C_u, g_v * dv)
    return bool(np.max(np.abs(lhs - rhs)) <= tol)
