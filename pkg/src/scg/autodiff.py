"""Scalar reverse-mode autodiff with stop-gradient, hold-sets and horizon backprop.

Values on the tape may be floats or equal-length numpy arrays; an array tape
is a batch of independent scalar tapes sharing one trace, so per-sample
gradients come out as arrays.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .expr import NumericalDomain
from .graph_core import COST, DETERMINISTIC, INPUT, STOCHASTIC, Assignment, Graph


class NotSeparator(Exception):
    pass


class Var:
    __slots__ = ("tape", "idx")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.values[self.idx]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __truediv__(self, other):
        return mul(self, recip(other))

    def __rtruediv__(self, other):
        return mul(other, recip(self))

    def __pow__(self, n: int):
        return powi(self, n)

    def __repr__(self) -> str:
        return f"Var({self.value!r})"


class Tape:
    def __init__(self, graph: Graph | None = None):
        self.values: list = []
        self.inputs: list = []
        self.graph = graph
        self.node_var: dict[str, Var] = {}
        self.logp_var: dict[str, Var] = {}

    def __len__(self) -> int:
        return len(self.values)

    def leaf(self, value) -> Var:
        self.values.append(value)
        self.inputs.append(())
        return Var(self, len(self.values) - 1)

    def push(self, value, parents: tuple) -> Var:
        self.values.append(value)
        self.inputs.append(parents)
        return Var(self, len(self.values) - 1)

    def adjoints(self, target: Var, holds: Iterable[Var] = ()) -> list:
        """Reverse sweep from ``target``; held vars keep their adjoint but do not pass it on."""
        held = {v.idx for v in holds} - {target.idx}
        adj: list = [0.0] * (target.idx + 1)
        adj[target.idx] = 1.0
        for i in range(target.idx, -1, -1):
            a = adj[i]
            if i in held or (np.ndim(a) == 0 and a == 0.0):
                continue
            for j, local in self.inputs[i]:
                adj[j] = adj[j] + a * local
        return adj


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _val(x):
    return x.value if isinstance(x, Var) else x


def add(a, b):
    t = _tape_of(a, b)
    if t is None:
        return a + b
    parents = tuple((x.idx, 1.0) for x in (a, b) if isinstance(x, Var))
    return t.push(_val(a) + _val(b), parents)


def mul(a, b):
    t = _tape_of(a, b)
    if t is None:
        return a * b
    va, vb = _val(a), _val(b)
    parents = []
    if isinstance(a, Var):
        parents.append((a.idx, vb))
    if isinstance(b, Var):
        parents.append((b.idx, va))
    return t.push(va * vb, tuple(parents))


def _unary(x, value, local):
    if isinstance(x, Var):
        return x.tape.push(value, ((x.idx, local),))
    return value


def neg(x):
    return _unary(x, -_val(x), -1.0)


def recip(x):
    v = _val(x)
    if np.any(np.asarray(v) == 0):
        raise NumericalDomain("recip of zero")
    r = 1.0 / v
    return _unary(x, r, -r * r)


def exp(x):
    e = np.exp(_val(x))
    if not np.all(np.isfinite(e)):
        raise NumericalDomain("exp overflow")
    return _unary(x, e, e)


def log(x):
    v = _val(x)
    if np.any(np.asarray(v) <= 0):
        raise NumericalDomain("log of a non-positive value")
    return _unary(x, np.log(v), 1.0 / v)


def tanh(x):
    th = np.tanh(_val(x))
    return _unary(x, th, 1.0 - th * th)


def powi(x, n: int):
    v = _val(x)
    if n < 0 and np.any(np.asarray(v) == 0):
        raise NumericalDomain("negative power of zero")
    if n == 0:
        return _unary(x, np.ones_like(v) if np.ndim(v) else 1.0, 0.0)
    if n > 0:
        value, local = v ** n, n * v ** (n - 1)
    else:
        value, local = 1.0 / v ** (-n), n / v ** (1 - n)
    return _unary(x, value, local)


def select(idx, options: Sequence):
    """Pick ``options[idx]``; the index is a sampled value and carries no gradient."""
    k_raw = np.asarray(_val(idx))
    k = np.rint(k_raw).astype(int)
    if np.any(np.abs(k_raw - k) > 0) or np.any(k < 0) or np.any(k >= len(options)):
        raise NumericalDomain(f"select index outside 0..{len(options) - 1}")
    if k.ndim == 0:
        return options[int(k)]
    out = 0.0
    for i, o in enumerate(options):
        mask = (k == i).astype(float)
        if mask.any():
            out = add(out, mul(mask, o))
    return out


def total(x):
    """Sum over the batch axis (reduces an array-valued var to a scalar)."""
    if isinstance(x, Var):
        v = x.value
        return x.tape.push(float(np.sum(v)), ((x.idx, np.ones_like(v) if np.ndim(v) else 1.0),))
    return float(np.sum(x))


def stop_gradient(x):
    if isinstance(x, Var):
        return x.tape.leaf(x.value)
    return x


def identity(x):
    if isinstance(x, Var):
        return x.tape.push(x.value, ((x.idx, 1.0),))
    return x


class _VarLib:
    add = staticmethod(add)
    mul = staticmethod(mul)
    neg = staticmethod(neg)
    recip = staticmethod(recip)
    exp = staticmethod(exp)
    log = staticmethod(log)
    tanh = staticmethod(tanh)
    powi = staticmethod(powi)
    select = staticmethod(select)


VARLIB = _VarLib()


# ---------------------------------------------------------------- graph tapes

def record(g: Graph, a: Assignment, overrides: Mapping[str, Callable] | None = None) -> Tape:
    """Trace every deterministic node, cost and log-probability of ``a``.

    Inputs and sampled values are leaves (sampling has zero gradient).
    ``overrides`` maps a node name to ``f(tape, env) -> Var`` replacing its
    leaf or expression; used for reparameterized views of sampled nodes.
    """
    t = Tape(g)
    env: dict = {}
    overrides = overrides or {}
    for name in g.order:
        node = g.nodes[name]
        if name in overrides:
            var = identity(overrides[name](t, env))
            if not isinstance(var, Var):
                var = t.leaf(var)
        elif node.kind in (INPUT, STOCHASTIC):
            var = t.leaf(a.values[name])
        else:
            var = node.expr.evaluate(env, VARLIB)
            var = identity(var) if isinstance(var, Var) else t.leaf(var)
        env[name] = var
        t.node_var[name] = var
        if node.kind == STOCHASTIC:
            lp = node.family.log_prob(t.node_var[name], env, VARLIB)
            t.logp_var[name] = identity(lp) if isinstance(lp, Var) else t.leaf(lp)
    return t


class GradMap(dict):
    """Node name -> d(target)/d(node); nodes off every path map to 0."""

    def __missing__(self, key):
        return 0.0


def _gradmap(t: Tape, adj: list) -> GradMap:
    out = GradMap()
    for name, var in t.node_var.items():
        out[name] = adj[var.idx] if var.idx < len(adj) else 0.0
    return out


def _target_var(t: Tape, target) -> Var:
    return target if isinstance(target, Var) else t.node_var[target]


def backward(t: Tape, target) -> GradMap:
    return backward_with_holds(t, target, ())


def backward_with_holds(t: Tape, target, holds: Iterable[str]) -> GradMap:
    tv = _target_var(t, target)
    adj = t.adjoints(tv, [t.node_var[h] for h in holds])
    return _gradmap(t, adj)


def grad_of(t: Tape, target, wrt: Iterable[str], holds: Iterable[str] = ()) -> dict:
    gm = backward_with_holds(t, target, holds)
    return {w: gm[w] for w in wrt}


def horizon_backprop(t: Tape, u: str, S: Sequence[str], injected: Sequence, use_holds: bool = True):
    """Sum_i injected_i * d v_i / d u, holding the earlier members fixed.

    Members are processed in topological order.  ``use_holds=False`` gives
    the naive regrouping, which double counts paths through earlier members
    of an ordered separator.
    """
    from .graph_analysis import NOT_SEPARATOR, separator_verdict

    g = t.graph
    if len(injected) != len(S):
        raise ValueError("one injected value per separator member is required")
    verdict = separator_verdict(g, u, S)
    if verdict.kind == NOT_SEPARATOR:
        raise NotSeparator(f"{list(S)} does not separate {u!r} from the loss")
    pairs = sorted(zip(S, injected), key=lambda p: g.position[p[0]])
    acc = 0.0
    for i, (v, g_v) in enumerate(pairs):
        holds = [m for m, _ in pairs[:i]] if use_holds else []
        acc = acc + g_v * backward_with_holds(t, v, holds)[u]
    return acc


def finite_difference(f: Callable[[float], float], x: float, h: float = 1e-5) -> float:
    return (f(x + h) - f(x - h)) / (2 * h)


def node_functional(g: Graph, inputs: Mapping[str, float], wrt: str, target: str) -> Callable[[float], float]:
    """x -> value of ``target`` with input ``wrt`` set to x (deterministic graphs)."""
    from .graph_core import forward_sample

    def f(x: float) -> float:
        vals = dict(inputs)
        vals[wrt] = x
        return forward_sample(g, vals, 0).values[target]

    return f
