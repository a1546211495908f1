"""Function bodies: small expression trees over parent values.

Grammar (prefix s-expressions)::

    expr   := number | name | "(" op expr* ")"
    op     := add | mul | neg | recip | exp | log | tanh | pow | affine | select

``(pow e n)`` needs an integer literal ``n``.  ``(affine b w1 x1 w2 x2 ...)``
is ``b + w1*x1 + w2*x2 + ...`` with numeric ``b`` and ``wi``.
``(select i e0 e1 ...)`` picks ``e_i`` where ``i`` evaluates to an index.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np


class GraphError(Exception):
    """Base class for graph construction and evaluation errors."""


class ParseError(GraphError):
    def __init__(self, message: str, node: str | None = None, position: int | None = None):
        self.node = node
        self.position = position
        where = []
        if node is not None:
            where.append(f"node {node!r}")
        if position is not None:
            where.append(f"token {position}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class NumericalDomain(GraphError):
    """An elementary op was evaluated outside its domain."""


OPS = {
    "add": (1, None),
    "mul": (1, None),
    "neg": (1, 1),
    "recip": (1, 1),
    "exp": (1, 1),
    "log": (1, 1),
    "tanh": (1, 1),
    "pow": (2, 2),
    "affine": (1, None),
    "select": (2, None),
}


@dataclass(frozen=True)
class Const:
    value: float

    def refs(self) -> frozenset:
        return frozenset()

    def evaluate(self, env: Mapping[str, Any], lib=None):
        return self.value

    def __str__(self) -> str:
        v = self.value
        return str(int(v)) if float(v).is_integer() else repr(v)


@dataclass(frozen=True)
class Ref:
    name: str

    def refs(self) -> frozenset:
        return frozenset([self.name])

    def evaluate(self, env: Mapping[str, Any], lib=None):
        return env[self.name]

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Op:
    op: str
    args: tuple

    def refs(self) -> frozenset:
        out: frozenset = frozenset()
        for a in self.args:
            out = out | a.refs()
        return out

    def evaluate(self, env: Mapping[str, Any], lib=None):
        lib = lib or NUMERIC
        if self.op == "pow":
            return lib.powi(self.args[0].evaluate(env, lib), int(self.args[1].value))
        if self.op == "affine":
            total = self.args[0].value
            for w, x in zip(self.args[1::2], self.args[2::2]):
                total = lib.add(total, lib.mul(w.value, x.evaluate(env, lib)))
            return total
        if self.op == "select":
            idx = self.args[0].evaluate(env, lib)
            return lib.select(idx, [a.evaluate(env, lib) for a in self.args[1:]])
        vals = [a.evaluate(env, lib) for a in self.args]
        if self.op == "add":
            out = vals[0]
            for v in vals[1:]:
                out = lib.add(out, v)
            return out
        if self.op == "mul":
            out = vals[0]
            for v in vals[1:]:
                out = lib.mul(out, v)
            return out
        return getattr(lib, self.op)(vals[0])

    def __str__(self) -> str:
        return "(" + " ".join([self.op] + [str(a) for a in self.args]) + ")"


Expr = Const | Ref | Op


def _check_finite(x, what: str):
    if not np.all(np.isfinite(x)):
        raise NumericalDomain(f"{what} produced a non-finite value")
    return x


class _Numeric:
    """Float / ndarray evaluation with hard domain errors."""

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def mul(a, b):
        return a * b

    @staticmethod
    def neg(a):
        return -a

    @staticmethod
    def recip(a):
        if np.any(np.asarray(a) == 0):
            raise NumericalDomain("recip of zero")
        return 1.0 / a

    @staticmethod
    def exp(a):
        return _check_finite(np.exp(a), "exp")

    @staticmethod
    def log(a):
        if np.any(np.asarray(a) <= 0):
            raise NumericalDomain("log of a non-positive value")
        return np.log(a)

    @staticmethod
    def tanh(a):
        return np.tanh(a)

    @staticmethod
    def powi(a, n: int):
        if n < 0 and np.any(np.asarray(a) == 0):
            raise NumericalDomain("negative power of zero")
        return a ** n if n >= 0 else 1.0 / (a ** -n)

    @staticmethod
    def select(idx, options):
        idx_arr = np.asarray(idx)
        k = np.rint(idx_arr).astype(int)
        if np.any(np.abs(idx_arr - k) > 0) or np.any(k < 0) or np.any(k >= len(options)):
            raise NumericalDomain(f"select index outside 0..{len(options) - 1}")
        if k.ndim == 0 and all(np.ndim(o) == 0 for o in options):
            return options[int(k)]
        shape = np.broadcast_shapes(k.shape, *[np.shape(o) for o in options])
        return np.choose(np.broadcast_to(k, shape), [np.broadcast_to(o, shape) for o in options])


NUMERIC = _Numeric()


_TOKEN = re.compile(r"\s*(?:(\()|(\))|([^\s()]+))")


def tokenize(text: str) -> list[str]:
    tokens = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            break
        tokens.append(m.group(1) or m.group(2) or m.group(3))
        pos = m.end()
    return tokens


def _number(tok: str) -> float | None:
    try:
        v = float(tok)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def parse(text: str, node: str | None = None) -> Expr:
    """Parse an s-expression; errors carry the node name and token index."""
    tokens = tokenize(text)
    if not tokens:
        raise ParseError("empty expression", node, 0)
    pos = 0

    def walk() -> Expr:
        nonlocal pos
        if pos >= len(tokens):
            raise ParseError("unexpected end of expression", node, pos)
        tok = tokens[pos]
        if tok == ")":
            raise ParseError("unexpected ')'", node, pos)
        if tok != "(":
            pos += 1
            num = _number(tok)
            return Const(num) if num is not None else Ref(tok)
        start = pos
        pos += 1
        if pos >= len(tokens) or tokens[pos] in "()":
            raise ParseError("expected an operator after '('", node, pos)
        name = tokens[pos]
        if name not in OPS:
            raise ParseError(f"unknown operator {name!r}", node, pos)
        pos += 1
        args = []
        while pos < len(tokens) and tokens[pos] != ")":
            args.append(walk())
        if pos >= len(tokens):
            raise ParseError("missing ')'", node, start)
        pos += 1
        return _build(name, args, node, start)

    expr = walk()
    if pos != len(tokens):
        raise ParseError("trailing tokens", node, pos)
    return expr


def _build(name: str, args: list, node, position) -> Op:
    lo, hi = OPS[name]
    if len(args) < lo or (hi is not None and len(args) > hi):
        raise ParseError(f"wrong number of arguments for {name}", node, position)
    if name == "pow":
        n = args[1]
        if not isinstance(n, Const) or not float(n.value).is_integer():
            raise ParseError("pow needs an integer exponent", node, position)
    if name == "affine":
        if len(args) % 2 != 1 or not all(isinstance(a, Const) for a in [args[0]] + args[1::2]):
            raise ParseError("affine needs a numeric bias and numeric weights", node, position)
    return Op(name, tuple(args))


def as_expr(x, node: str | None = None) -> Expr:
    """Accept an Expr, a number, or an s-expression string."""
    if isinstance(x, (Const, Ref, Op)):
        return x
    if isinstance(x, (int, float)):
        return Const(float(x))
    if isinstance(x, str):
        return parse(x, node)
    raise ParseError(f"cannot interpret {x!r} as an expression", node)
