"""Learned value functions, critics and gradient-critics.

Two representations:

* ``TabularValueFn``: one scalar per discrete key, fitted by running means.
* ``PolyValueFn``: per discrete key, a cubic in one continuous anchor node,
  fitted by gradient descent on value and/or derivative residuals.

Both predict 0 on unseen keys and count the misses.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .exact_oracle import surrogate_gradients
from .graph_analysis import DecompositionInvalid, is_markov, validate_bootstrap
from .graph_core import Assignment, Graph, deterministically_computable

DEGREE = 3


class BootstrapInvalid(Exception):
    pass


class NotMarkov(Exception):
    pass


class InsufficientNoise(Exception):
    pass


@dataclass
class TrainReport:
    steps: int
    loss: float
    residual_max: float
    stderr: dict = field(default_factory=dict)


def _as_batch(stream) -> Assignment:
    if isinstance(stream, Assignment):
        if stream.n is None:
            return Assignment({k: np.array([v]) for k, v in stream.values.items()},
                              {k: np.array([v]) for k, v in stream.logp.items()}, 1)
        return stream
    rows = list(stream)
    if not rows:
        raise ValueError("empty stream")
    batches = [_as_batch(r) for r in rows]
    values = {k: np.concatenate([b.values[k] for b in batches]) for k in batches[0].values}
    logp = {k: np.concatenate([b.logp[k] for b in batches]) for k in batches[0].logp}
    return Assignment(values, logp, sum(b.n for b in batches))


def _key_columns(a: Assignment, members: Sequence[str]) -> list:
    n = a.n or 1
    cols = [np.broadcast_to(a.values[m], (n,)).tolist() for m in members]
    return list(zip(*cols)) if cols else [()] * n


def _key_to_json(key: tuple) -> list:
    return [float(x) for x in key]


class TabularValueFn:
    """Scalar per key of ``members``."""

    def __init__(self, members: Iterable[str], default: float = 0.0):
        self.members = tuple(members)
        self.default = default
        self.params: dict = {}
        self.weights: dict = {}
        self.misses = 0

    def keys_of(self, a: Assignment) -> list:
        return _key_columns(a, self.members)

    def update(self, key: tuple, target: float, weight: float = 1.0) -> None:
        # SGD on the squared loss with step weight/total_weight: an exact running mean.
        total = self.weights.get(key, 0.0) + weight
        mean = self.params.get(key, 0.0)
        self.params[key] = mean + (weight / total) * (target - mean)
        self.weights[key] = total

    def predict(self, a: Assignment):
        out = np.empty(a.n or 1)
        for i, key in enumerate(self.keys_of(a)):
            if key in self.params:
                out[i] = self.params[key]
            else:
                out[i] = self.default
                self.misses += 1
        return out if a.n is not None else float(out[0])

    __call__ = predict

    def to_json(self) -> dict:
        keys = sorted(self.params)
        return {
            "set": list(self.members),
            "keys": [_key_to_json(k) for k in keys],
            "params": [self.params[k] for k in keys],
            "misses": self.misses,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TabularValueFn":
        vf = cls(doc["set"])
        for k, p in zip(doc["keys"], doc["params"]):
            vf.params[tuple(k)] = float(p)
            vf.weights[tuple(k)] = 1.0
        vf.misses = int(doc.get("misses", 0))
        return vf


class PolyValueFn:
    """Per discrete key of ``members``, a cubic in the continuous ``anchor``.

    Each key stores ``center``, ``scale`` and ascending coefficients of the
    polynomial in ``(x - center) / scale``.
    """

    def __init__(self, members: Iterable[str], anchor: str, params: dict | None = None):
        self.members = tuple(members)
        self.anchor = anchor
        self.params: dict = dict(params or {})
        self.misses = 0

    def keys_of(self, a: Assignment) -> list:
        return _key_columns(a, self.members)

    def _rows(self, a: Assignment):
        keys = self.keys_of(a)
        n = len(keys)
        center = np.zeros(n)
        scale = np.ones(n)
        coef = np.zeros((n, DEGREE + 1))
        cache: dict = {}
        for i, key in enumerate(keys):
            p = self.params.get(key)
            if p is None:
                self.misses += 1
                continue
            if key not in cache:
                cache[key] = (p["center"], p["scale"], np.asarray(p["coef"], dtype=float))
            center[i], scale[i], coef[i] = cache[key]
        return center, scale, coef

    def value(self, a: Assignment, x=None):
        center, scale, coef = self._rows(a)
        x = a.values[self.anchor] if x is None else x
        z = (np.broadcast_to(x, center.shape) - center) / scale
        out = sum(coef[:, j] * z ** j for j in range(DEGREE + 1))
        return out if a.n is not None else float(out[0])

    __call__ = value

    def derivative(self, a: Assignment, x=None):
        center, scale, coef = self._rows(a)
        x = a.values[self.anchor] if x is None else x
        z = (np.broadcast_to(x, center.shape) - center) / scale
        out = sum(j * coef[:, j] * z ** (j - 1) for j in range(1, DEGREE + 1)) / scale
        return out if a.n is not None else float(out[0])

    def value_var(self, a: Assignment, x_var):
        """The polynomial evaluated on a tape variable standing for the anchor."""
        center, scale, coef = self._rows(a)
        if a.n is None:
            center, scale, coef = center[0], scale[0], coef[0]
        z = (x_var - center) * (1.0 / scale)
        out = coef[..., 0]
        for j in range(1, DEGREE + 1):
            out = out + coef[..., j] * ad.powi(z, j)
        return out

    def scaled(self, c: float) -> "PolyValueFn":
        params = {k: {**p, "coef": [c * x for x in p["coef"]]} for k, p in self.params.items()}
        return PolyValueFn(self.members, self.anchor, params)

    def to_json(self) -> dict:
        keys = sorted(self.params)
        return {
            "set": list(self.members) + [self.anchor],
            "anchor": self.anchor,
            "keys": [_key_to_json(k) for k in keys],
            "params": [{"center": float(self.params[k]["center"]), "scale": float(self.params[k]["scale"]),
                        "coef": [float(c) for c in self.params[k]["coef"]]} for k in keys],
            "misses": self.misses,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PolyValueFn":
        members = [m for m in doc["set"] if m != doc["anchor"]]
        vf = cls(members, doc["anchor"], {tuple(k): p for k, p in zip(doc["keys"], doc["params"])})
        vf.misses = int(doc.get("misses", 0))
        return vf


def dumps(vf) -> str:
    return json.dumps(vf.to_json(), sort_keys=True)


def loads(text: str):
    doc = json.loads(text)
    return PolyValueFn.from_json(doc) if "anchor" in doc else TabularValueFn.from_json(doc)


# ---------------------------------------------------------------- tabular fits

def _fit_table(members: Sequence[str], a: Assignment, targets: np.ndarray, weights) -> tuple:
    vf = TabularValueFn(members)
    keys = vf.keys_of(a)
    n = len(keys)
    w = np.ones(n) if weights is None else np.broadcast_to(np.asarray(weights, dtype=float), (n,))
    for key, y, wi in zip(keys, targets.tolist(), w.tolist()):
        vf.update(key, y, wi)
    sums: dict = {}
    for key, y, wi in zip(keys, targets.tolist(), w.tolist()):
        s = sums.setdefault(key, [0.0, 0.0, 0.0, 0])
        s[0] += wi
        s[1] += wi * y
        s[2] += wi * y * y
        s[3] += 1
    resid = 0.0
    stderr = {}
    for key, (sw, sy, syy, cnt) in sums.items():
        mean = sy / sw
        resid = max(resid, abs(vf.params[key] - mean))
        var = max(syy / sw - mean * mean, 0.0)
        stderr[key] = float(np.sqrt(var * cnt / max(cnt - 1, 1) / cnt)) if weights is None else 0.0
    pred = np.array([vf.params[k] for k in keys])
    loss = float(np.sum(w * (pred - targets) ** 2) / np.sum(w))
    return vf, TrainReport(n, loss, resid, stderr)


def fit_on_return(g: Graph, stream, X: Iterable[str], v, weights=None) -> tuple[TabularValueFn, TrainReport]:
    """Regression of the cost-to-go of ``v`` onto keys of ``X``.

    ``weights`` (e.g. atom probabilities of a full enumeration) replaces the
    empirical marginal of ``X`` by an exact one.
    """
    a = _as_batch(stream)
    targets = np.broadcast_to(np.asarray(a.cost_to_go(g, v), dtype=float), (a.n,))
    return _fit_table(g.sort(X), a, targets, weights)


def bootstrap_target(a: Assignment, V0: Iterable[str], part_fns: Sequence) -> np.ndarray:
    n = a.n or 1
    out = np.zeros(n)
    for c in V0:
        out = out + np.broadcast_to(a.values[c], (n,))
    for fn in part_fns:
        out = out + np.broadcast_to(np.asarray(fn(a), dtype=float), (n,))
    return out


def fit_bootstrap(g: Graph, stream, X_v: Iterable[str], v: str, parts: Sequence, V0: Iterable[str] = (),
                  weights=None) -> tuple[TabularValueFn, TrainReport]:
    """Regression onto ``sum(V0 costs) + sum_i fn_i(X_i)``.

    ``parts`` holds ``(V_i, X_i, fn_i)``; each ``fn_i`` maps an assignment
    batch to value predictions and may be exact or learned.
    """
    X_v = list(X_v)
    V0 = list(V0)
    try:
        ok = validate_bootstrap(g, v, X_v, [(p[0], p[1]) for p in parts], V0)
    except DecompositionInvalid as exc:
        raise BootstrapInvalid(str(exc)) from exc
    if not ok:
        raise BootstrapInvalid(f"the part sets do not support a bootstrap for {v!r} given {sorted(X_v)}")
    a = _as_batch(stream)
    targets = bootstrap_target(a, V0, [p[2] for p in parts])
    return _fit_table(g.sort(X_v), a, targets, weights)


# ---------------------------------------------------------------- gradient-critics

MODES = ("grad-only", "value-only", "sobolev")


def _basis(z: np.ndarray, scale: float) -> tuple[np.ndarray, np.ndarray]:
    phi = np.stack([z ** j for j in range(DEGREE + 1)], axis=1)
    dphi = np.stack([j * z ** (j - 1) if j else np.zeros_like(z) for j in range(DEGREE + 1)], axis=1) / scale
    return phi, dphi


def _descend(H: np.ndarray, b: np.ndarray, c0: float, lr: float, max_steps: int, tol: float) -> tuple:
    """Minimize 0.5 c'Hc - b'c + c0 by gradient descent with step decay on plateau."""
    c = np.zeros(len(b))
    loss = lambda c: 0.5 * c @ H @ c - b @ c + c0
    prev = loss(c)
    steps = 0
    window = 200
    while steps < max_steps and lr > 1e-8:
        for _ in range(window):
            step = lr * (H @ c - b)
            c = c - step
        steps += window
        cur = loss(c)
        if not np.isfinite(cur) or cur > prev:
            lr /= 10.0
            c = np.zeros(len(b)) if not np.isfinite(cur) else c
            prev = loss(c)
            continue
        if prev - cur <= tol * max(1.0, abs(cur)):
            if np.max(np.abs(H @ c - b)) <= tol ** 0.5:
                break
            lr /= 10.0
        prev = cur
    return c, steps, max(loss(c), 0.0)


def fit_gradient_critic(g: Graph, stream, v: str, C: Iterable[str], mode: str = "sobolev", alpha: float = 1.0,
                        beta: float = 1.0, lr: float = 1e-2, max_steps: int = 200_000,
                        tol: float = 1e-14) -> tuple[PolyValueFn, TrainReport]:
    """Per-key cubic Q(C) in the anchor ``v`` (a continuous node of ``g``).

    ``grad-only`` matches the derivative to dL^s/dv, ``value-only`` matches
    the value to L(v), ``sobolev`` weighs both by ``alpha`` and ``beta``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "grad-only":
        alpha = 0.0
    elif mode == "value-only":
        beta = 0.0
    C = set(C)
    if v not in C:
        raise ValueError(f"the conditioning set must contain the anchor {v!r}")
    members = g.sort(C - {v})
    if alpha > 0:
        if not is_markov(g, C, v):
            raise NotMarkov(f"{sorted(C)} is not Markov for {v!r}")
        if deterministically_computable(g, v, set(members)):
            raise InsufficientNoise(f"{v!r} is a deterministic function of {list(members)}; no value signal to differentiate")
    a = _as_batch(stream)
    y = np.broadcast_to(np.asarray(a.cost_to_go(g, v), dtype=float), (a.n,))
    d = surrogate_gradients(g, a, [v])[v] if beta > 0 else np.zeros(a.n)
    x = np.asarray(a.values[v], dtype=float)
    keys = _key_columns(a, members)
    groups: dict = {}
    for i, key in enumerate(keys):
        groups.setdefault(key, []).append(i)
    vf = PolyValueFn(members, v)
    steps = 0
    total_loss = 0.0
    resid = 0.0
    for key, idx in groups.items():
        idx = np.asarray(idx)
        xs = x[idx]
        center = float(xs.mean())
        scale = float(xs.std())
        if alpha > 0 and scale == 0.0:
            raise InsufficientNoise(f"{v!r} has no spread under key {key}")
        scale = scale or 1.0
        phi, dphi = _basis((xs - center) / scale, scale)
        m = len(idx)
        H = 2 * (alpha * phi.T @ phi + beta * dphi.T @ dphi) / m
        b = 2 * (alpha * phi.T @ y[idx] + beta * dphi.T @ d[idx]) / m
        c0 = (alpha * y[idx] @ y[idx] + beta * d[idx] @ d[idx]) / m
        coef, k, loss = _descend(H, b, c0, lr, max_steps, tol)
        steps += k
        total_loss += loss * m / a.n
        resid = max(resid, float(np.max(np.abs(H @ coef - b))))
        vf.params[key] = {"center": center, "scale": scale, "coef": coef.tolist()}
    return vf, TrainReport(steps, float(total_loss), resid)
