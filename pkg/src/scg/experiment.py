"""Experiment configs: JSON estimator menus run against Monte Carlo and the exact oracle."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Any

import jsonschema
import numpy as np

from .estimators import (
    CompiledEstimator,
    EstimatorSpec,
    Empirical,
    Injection,
    NoBaseline,
    NodeChoice,
    OptimalBaseline,
    Part,
    PartialAverage,
    Scaled,
    ValueBaseline,
    ValueCritic,
    kstep_and_lambda,
)
from .exact_oracle import SupportTooLarge
from .fixtures import fixture_names, get_fixture
from .graph_core import GraphError, graph_from_dict
from . import value_store

GATE_SIGMAS = 4.0

_SET = {"type": "array", "items": {"type": "string"}, "uniqueItems": True}
_SOURCE = {
    "oneOf": [
        {"enum": ["exact", "zero"]},
        {
            "type": "object",
            "properties": {
                "kind": {"enum": ["exact", "zero", "file"]},
                "scale": {"type": "number"},
                "path": {"type": "string"},
            },
            "required": ["kind"],
            "additionalProperties": False,
        },
    ]
}
_CRITIC = {
    "type": "object",
    "properties": {
        "type": {"enum": ["empirical", "value", "partial", "kstep", "lambda"]},
        "set": _SET,
        "source": _SOURCE,
        "bucket": {"type": "array", "prefixItems": [{"type": "string"}, {"type": "number", "exclusiveMinimum": 0}],
                   "minItems": 2, "maxItems": 2},
        "V0": _SET,
        "parts": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {"set": _SET, "nodes": _SET, "source": _SOURCE},
                "required": ["set"],
                "additionalProperties": False,
            },
        },
        "k": {"type": "integer", "minimum": 0},
        "lambda": {"type": "number", "minimum": 0, "maximum": 1},
    },
    "required": ["type"],
    "additionalProperties": False,
}
_BASELINE = {
    "type": "object",
    "properties": {
        "type": {"enum": ["none", "value", "optimal"]},
        "set": _SET,
        "source": _SOURCE,
    },
    "required": ["type"],
    "additionalProperties": False,
}
_NODE = {
    "type": "object",
    "properties": {
        "node": {"type": "string"},
        "critic": _CRITIC,
        "baseline": _BASELINE,
        "debias": {"type": "boolean"},
        "reparameterize": {"type": "boolean"},
    },
    "required": ["node"],
    "additionalProperties": False,
}
_ESTIMATOR = {
    "type": "object",
    "properties": {
        "id": {"type": "string"},
        "nodes": {"type": "array", "items": _NODE},
        "injection": {
            "type": "object",
            "properties": {
                "u": {"type": "string"},
                "separator": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "sets": {"type": "array", "items": _SET},
                "source": _SOURCE,
            },
            "required": ["u", "separator", "sets"],
            "additionalProperties": False,
        },
        "params": {"type": "array", "items": {"type": "string"}},
    },
    "required": ["id"],
    "additionalProperties": False,
}
CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "fixture": {"enum": fixture_names()},
        "graph": {"type": "object"},
        "inputs": {"type": "object", "additionalProperties": {"type": "number"}},
        "chain": {"type": "array", "items": {"type": "array", "items": {"type": "string"}, "minItems": 3, "maxItems": 3}},
        "estimators": {"type": "array", "items": _ESTIMATOR},
        "samples": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "order": {"type": "integer", "minimum": 1},
        "output": {"type": "string"},
    },
    "required": ["estimators"],
    "oneOf": [{"required": ["fixture"]}, {"required": ["graph"]}],
    "additionalProperties": False,
}


class ConfigError(Exception):
    pass


def validate_config(cfg: dict) -> None:
    errors = sorted(jsonschema.Draft202012Validator(CONFIG_SCHEMA).iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        lines = [f"{'/'.join(str(p) for p in e.path) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("invalid experiment config:\n  " + "\n  ".join(lines))


def _source(doc) -> Any:
    if doc is None or isinstance(doc, str):
        return doc or "exact"
    kind = doc["kind"]
    if kind == "file":
        if "path" not in doc:
            raise ConfigError("file sources need a 'path'")
        with open(doc["path"]) as fh:
            base = value_store.loads(fh.read())
    else:
        base = kind
    return Scaled(base, float(doc["scale"])) if "scale" in doc else base


def _critic(doc: dict | None, node: str, chain) -> Any:
    if doc is None or doc["type"] == "empirical":
        return Empirical()
    kind = doc["type"]
    if kind == "value":
        bucket = tuple(doc["bucket"]) if "bucket" in doc else None
        return ValueCritic(tuple(doc.get("set", ())), _source(doc.get("source")), bucket)
    if kind == "partial":
        parts = tuple(Part(tuple(p["set"]), _source(p.get("source")), tuple(p["nodes"]) if "nodes" in p else None)
                      for p in doc.get("parts", ()))
        return PartialAverage(tuple(doc.get("V0", ())), parts)
    if kind == "kstep":
        return kstep_and_lambda(chain, node, k=doc.get("k", 0), source=_source(doc.get("source")))
    return kstep_and_lambda(chain, node, lam=doc.get("lambda", 0.0), source=_source(doc.get("source")))


def _baseline(doc: dict | None) -> Any:
    if doc is None or doc["type"] == "none":
        return NoBaseline()
    if doc["type"] == "value":
        return ValueBaseline(tuple(doc.get("set", ())), _source(doc.get("source")))
    return OptimalBaseline(tuple(doc.get("set", ())))


def parse_spec(doc: dict, chain=()) -> EstimatorSpec:
    nodes = {}
    for rec in doc.get("nodes", ()):
        v = rec["node"]
        nodes[v] = NodeChoice(_critic(rec.get("critic"), v, chain), _baseline(rec.get("baseline")),
                              bool(rec.get("debias", False)), bool(rec.get("reparameterize", False)))
    inj = None
    if "injection" in doc:
        d = doc["injection"]
        src = _source(d.get("source"))
        inj = Injection(d["u"], tuple(d["separator"]), tuple((tuple(s), src) for s in d["sets"]))
    params = tuple(doc["params"]) if "params" in doc else None
    if inj is not None and params is None:
        params = (inj.u,)
    return EstimatorSpec(doc["id"], nodes, inj, params)


# ---------------------------------------------------------------- built-in menus

def _q(node, C, B=None, **extra):
    rec = {"node": node, "critic": {"type": "value", "set": list(C)}}
    if B is not None:
        rec["baseline"] = {"type": "value", "set": list(B)}
    rec.update(extra)
    return rec


def _base(node, B):
    return {"node": node, "baseline": {"type": "value", "set": list(B)}}


MENUS: dict = {
    "CHAIN2": [
        {"id": "chain2-empirical"},
        {"id": "chain2-empirical-vbase", "nodes": [_base("a0", ["s0"]), _base("a1", ["s1"])]},
        {"id": "chain2-q", "nodes": [_q("a0", ["s0", "a0"]), _q("a1", ["s1", "a1"])]},
        {"id": "chain2-q-vbase", "nodes": [_q("a0", ["s0", "a0"], ["s0"]), _q("a1", ["s1", "a1"], ["s1"])]},
        {"id": "chain2-kstep0", "nodes": [
            {"node": "a0", "critic": {"type": "kstep", "k": 0}, "baseline": {"type": "value", "set": ["s0"]}},
            {"node": "a1", "critic": {"type": "kstep", "k": 0}, "baseline": {"type": "value", "set": ["s1"]}}]},
        {"id": "chain2-lambda0.5", "nodes": [
            {"node": "a0", "critic": {"type": "lambda", "lambda": 0.5}, "baseline": {"type": "value", "set": ["s0"]}}]},
        {"id": "chain2-partial", "nodes": [
            {"node": "a0", "critic": {"type": "partial", "V0": ["r0"], "parts": [{"set": ["s1"]}]}},
            _q("a1", ["s1", "a1"], ["s1"])]},
        {"id": "chain2-optimal", "nodes": [
            {"node": "a0", "critic": {"type": "value", "set": ["s0", "a0"]}, "baseline": {"type": "optimal", "set": ["s0"]}},
            {"node": "a1", "critic": {"type": "value", "set": ["s1", "a1"]}, "baseline": {"type": "optimal", "set": ["s1"]}}]},
    ],
    "CHAIN2-ES": [
        {"id": "es-blackbox", "nodes": [
            {"node": "k", "baseline": {"type": "value", "set": []}},
            {"node": "a0", "critic": {"type": "value", "set": ["s0", "a0", "logit0"], "bucket": ["logit0", 0.25]}},
            {"node": "a1", "critic": {"type": "value", "set": ["s1", "a1", "logit1"], "bucket": ["logit1", 0.25]}}]},
    ],
    "CHAIN2-G": [
        {"id": "gauss-score-vbase", "nodes": [_base("a0", ["s0"]), _base("a1", ["s1"])]},
        {"id": "gauss-pathwise", "nodes": [{"node": "a0", "reparameterize": True},
                                            {"node": "a1", "reparameterize": True}]},
        {"id": "gauss-mixed", "nodes": [_q("a0", ["s0", "a0"], ["s0"]), {"node": "a1", "reparameterize": True}]},
        {"id": "gauss-gradient-critic", "nodes": [{"node": "a0", "reparameterize": True},
                                                   {"node": "a1", "reparameterize": True}],
         "injection": {"u": "th", "separator": ["a0", "a1"], "sets": [["s0", "a0"], ["s1", "a1"]]}},
        {"id": "gauss-debiased-exact", "nodes": [_q("a0", ["s0", "a0"], debias=True),
                                                  _q("a1", ["s1", "a1"], debias=True)]},
        {"id": "gauss-debiased-zero", "nodes": [
            {"node": "a0", "critic": {"type": "value", "set": ["s0", "a0"], "source": "zero"}, "debias": True},
            {"node": "a1", "critic": {"type": "value", "set": ["s1", "a1"], "source": "zero"}, "debias": True}]},
        {"id": "gauss-debiased-scaled", "nodes": [
            {"node": "a0", "critic": {"type": "value", "set": ["s0", "a0"], "source": {"kind": "exact", "scale": 1.5}},
             "debias": True},
            {"node": "a1", "critic": {"type": "value", "set": ["s1", "a1"], "source": {"kind": "exact", "scale": 1.5}},
             "debias": True}]},
    ],
    "FACTORED": [
        {"id": "factored-critic-noncongruent", "nodes": [_q("b1", ["s", "b1"], ["s", "b2"]),
                                                         _q("b2", ["s", "b2"], ["s", "b1"])]},
        {"id": "factored-critic-congruent", "nodes": [_q("b1", ["s", "b1"], ["s"]), _q("b2", ["s", "b2"], ["s"])]},
    ],
    "NOISE": [
        {"id": "noise-critic-zzp", "nodes": [_q("z", ["z", "zp"], [])]},
        {"id": "noise-critic-z", "nodes": [_q("z", ["z"], [])]},
        {"id": "noise-critic-zzp-base-zp", "nodes": [_q("z", ["z", "zp"], ["zp"])]},
        {"id": "noise-noncongruent", "nodes": [_q("z", ["z"], ["zp"])]},
    ],
    "NONCONG": [
        {"id": "noncong-empty", "nodes": [_q("z", ["z", "v1"], [])]},
        {"id": "noncong-v1p", "nodes": [_q("z", ["z", "v1"], ["v1p"])]},
    ],
    "TREE4": [
        {"id": "tree4-valid", "nodes": [_q("v1", ["v0", "v1"], ["v0"]), _q("v3", ["v1", "v3"], ["v1"])]},
    ],
}


def builtin_config(fixture: str, samples: int = 100_000, seed: int = 1) -> dict:
    if fixture not in MENUS:
        raise ConfigError(f"no built-in menu for {fixture!r}; menus: {', '.join(MENUS)}")
    return {"fixture": fixture, "estimators": MENUS[fixture], "samples": samples, "seed": seed}


def menu() -> list[tuple[str, dict]]:
    return [(name, doc) for name, docs in MENUS.items() for doc in docs]


# ---------------------------------------------------------------- running

@dataclass
class Row:
    id: str
    param: str
    mc_mean: float
    stderr: float
    exact_mean: float | None
    exact_var: float | None
    exact_gradient: float | None
    gate: bool | None

    def as_list(self) -> list:
        fmt = lambda x: "" if x is None else repr(float(x))
        gate = "" if self.gate is None else ("pass" if self.gate else "fail")
        return [self.id, self.param, fmt(self.mc_mean), fmt(self.stderr), fmt(self.exact_mean), fmt(self.exact_var),
                fmt(self.exact_gradient), gate]


HEADER = ["id", "param", "mc_mean", "stderr", "exact_mean", "exact_var", "exact_gradient", "gate"]


def load_setup(cfg: dict):
    if "fixture" in cfg:
        fx = get_fixture(cfg["fixture"])
        g, inputs, chain = fx.graph, dict(fx.inputs), fx.chain
    else:
        try:
            g, inputs, chain = graph_from_dict(cfg["graph"]), {}, ()
        except (GraphError, KeyError, TypeError) as exc:
            raise ConfigError(f"graph: {exc}") from None
    inputs.update(cfg.get("inputs", {}))
    if "chain" in cfg:
        chain = tuple(tuple(s) for s in cfg["chain"])
    return g, inputs, chain


def run_experiment(cfg: dict) -> tuple[list[Row], bool]:
    """Evaluate every estimator of ``cfg``; returns (rows sorted by id, all gates passed)."""
    validate_config(cfg)
    g, inputs, chain = load_setup(cfg)
    n = cfg.get("samples", 100_000)
    seed = cfg.get("seed", 0)
    order = cfg.get("order", 16)
    rows = []
    for doc in cfg["estimators"]:
        spec = parse_spec(doc, chain)
        est = CompiledEstimator(g, inputs, spec, order=order)
        mc = est.monte_carlo(n, seed)
        try:
            moments = est.exact_moments()
            exact = est.exact_gradient()
        except SupportTooLarge:
            moments, exact = {}, {}
        for p in sorted(mc.mean):
            em, ev = moments.get(p, (None, None))
            eg = exact.get(p)
            gate = None if eg is None else abs(mc.mean[p] - eg) <= GATE_SIGMAS * mc.stderr[p]
            rows.append(Row(spec.name, p, mc.mean[p], mc.stderr[p], em, ev, eg, gate))
    rows.sort(key=lambda r: (r.id, r.param))
    return rows, all(r.gate is not False for r in rows)


def rows_to_csv(rows: list[Row]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in rows:
        w.writerow(r.as_list())
    return buf.getvalue()


def load_config(path: str) -> dict:
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
