"""The acceptance suite: ten named criteria, each returning a pass/fail result.

Helpers are looked up through module attributes (``eo.exact_value`` and so
on) so that a test can tamper with one and watch the right criterion fail.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import estimators as est
from . import exact_oracle as eo
from . import experiment
from . import fixtures as fx
from . import graph_analysis as ga
from . import value_store as vs
from .graph_core import STOCHASTIC, forward_sample

EXACT_TOL = 1e-9


@dataclass
class Result:
    id: str
    title: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.id} {self.title}: {self.detail} ({self.seconds:.2f}s)"


def _menu_estimators():
    for name, doc in experiment.menu():
        f = fx.get_fixture(name)
        spec = experiment.parse_spec(doc, f.chain)
        yield doc["id"], est.CompiledEstimator(f.graph, f.inputs, spec)


def unbiased_exact() -> tuple[bool, str]:
    start = time.perf_counter()
    worst, count, bad = 0.0, 0, []
    for ident, e in _menu_estimators():
        moments = e.exact_moments()
        for p, (mean, _) in moments.items():
            exact = eo.exact_parameter_gradient(e.graph, e.inputs, p, table=e.oracle.table)
            err = abs(mean - exact)
            worst = max(worst, err)
            count += 1
            if err > EXACT_TOL:
                bad.append(ident)
    took = time.perf_counter() - start
    ok = not bad and count >= 12 and took <= 10.0
    return ok, f"{count} specs, max |E[est] - grad| = {worst:.2e}, {took:.1f}s" + (f", failing {bad}" if bad else "")


def unbiased_mc(n: int = 100_000, seed: int = 1) -> tuple[bool, str]:
    start = time.perf_counter()
    count, bad, worst = 0, [], 0.0
    for ident, e in _menu_estimators():
        mc = e.monte_carlo(n, seed)
        for p, mean in mc.mean.items():
            exact = eo.exact_parameter_gradient(e.graph, e.inputs, p, table=e.oracle.table)
            z = abs(mean - exact) / mc.stderr[p]
            worst = max(worst, z)
            count += 1
            if z > 4.0:
                bad.append(ident)
    took = time.perf_counter() - start
    ok = not bad and count >= 12 and took <= 60.0
    return ok, f"{count} specs at n={n}, max |z| = {worst:.2f}, {took:.1f}s" + (f", failing {bad}" if bad else "")


def horizon_double_counting() -> tuple[bool, str]:
    f = fx.fig11b()
    g = f.graph
    a = forward_sample(g, f.inputs, 0)
    t = ad.record(g, a)
    full = ad.backward(t, "l")["x"]
    # exact downstream derivatives of the loss at the separator members
    d_v3 = ad.backward_with_holds(t, "l", [])["v3"]
    d_v4 = ad.backward(t, "l")["v4"]
    horizon = ad.horizon_backprop(t, "x", ["v3", "v4"], [d_v3, d_v4])
    naive = ad.horizon_backprop(t, "x", ["v3", "v4"], [d_v3, d_v4], use_holds=False)
    # the path x -> v1 -> v3 -> v4 counted a second time by the naive sum
    doubled = d_v4 * 1.0 * 2.0 * 1.0
    ok = (abs(full - 32) <= 1e-12 and abs(horizon - 32) <= 1e-12 and abs(naive - 40) <= 1e-12
          and abs((naive - horizon) - doubled) <= 1e-12)
    return ok, f"full={full}, horizon={horizon}, naive={naive}, excess={naive - horizon} vs path term {doubled}"


def gradient_of_critic(rel: float = 1e-5, h: float = 1e-4) -> tuple[bool, str]:
    f = fx.chain2_gaussian()
    g = f.graph
    rep = est.reparameterize_all(g)
    table = eo.enumerate_support(rep, f.inputs)
    worst, checked = 0.0, 0
    for state, action, _ in f.chain:
        gc = eo.exact_gradient_critic(table, action, [state, action])
        for key, value in gc.value.table.items():
            s, x = (key[0], key[1]) if gc.value.members == (state, action) else (key[1], key[0])
            q = lambda y: eo.clamped_value(g, f.inputs, {action: y}, [state], action).table[(s,)]
            fd = (q(x + h) - q(x - h)) / (2 * h)
            err = abs(fd - value) / max(1.0, abs(value))
            worst = max(worst, err)
            checked += 1
    return worst <= rel, f"{checked} keys, max relative gap {worst:.2e}"


def _moment2(table, x) -> float:
    return float(np.sum(table.prob * np.asarray(x) ** 2))


def _score_var(table, v, theta, q, b) -> float:
    s = eo.score(table, v, theta)
    return eo.estimator_moments(table, s * (np.asarray(q) - np.asarray(b)))[1]


NESTED = (
    ("CHAIN2", "a0", ("s0", "a0"), [(), ("s0",)]),
    ("CHAIN2", "a1", ("s1", "a1"), [(), ("s1",)]),
    ("CHAIN2", "a1", ("s0", "a0", "s1", "a1"), [(), ("s1",), ("s0", "a0", "s1")]),
    ("FACTORED", "b1", ("s", "b1"), [(), ("s",)]),
    ("TREE4", "v3", ("v1", "v3"), [(), ("v1",)]),
)


def variance_orderings() -> tuple[bool, str]:
    notes, ok = [], True
    for name, v, C, chain_sets in NESTED:
        f = fx.get_fixture(name)
        table = eo.enumerate_support(f.graph, f.inputs)
        q = eo.exact_value(table, C, v).lookup(table.atoms)
        adv2 = [_moment2(table, q - eo.exact_value(table, B, v).lookup(table.atoms)) for B in chain_sets]
        opt = [_score_var(table, v, f.param, q, est.optimal_baseline(table, v, C, B, f.param).lookup(table.atoms))
               for B in chain_sets]
        val = [_score_var(table, v, f.param, q, eo.exact_value(table, B, v).lookup(table.atoms)) for B in chain_sets]
        shrinking = all(b <= a + 1e-12 for a, b in zip(adv2, adv2[1:]))
        nested = all(b <= a + 1e-12 for a, b in zip(opt, opt[1:]))
        better = all(o <= w + 1e-12 for o, w in zip(opt, val))
        ok &= shrinking and nested and better
    notes.append(f"{len(NESTED)} nested chains")

    f = fx.noise()
    table = eo.enumerate_support(f.graph, f.inputs)

    def var_of(C, B):
        q = eo.exact_value(table, C, "z").lookup(table.atoms)
        b = eo.exact_value(table, B, "z").lookup(table.atoms)
        return _score_var(table, "z", "th", q, b)

    naive = var_of(("z", "zp"), ())
    low_a = var_of(("z",), ())
    low_b = var_of(("z", "zp"), ("zp",))
    noncong = var_of(("z",), ("zp",))
    margin = 10 * EXACT_TOL
    noise_ok = naive > low_a + margin and abs(low_a - low_b) <= 1e-12 and noncong > low_a + margin
    ok &= noise_ok
    notes.append(f"noise regimes: {naive:.3f} > {low_a:.3f} = {low_b:.3f} < {noncong:.3f}")

    f = fx.noncongruent()
    table = eo.enumerate_support(f.graph, f.inputs)
    q = eo.exact_value(table, ("z", "v1"), "z").lookup(table.atoms)
    empty = _moment2(table, q - eo.exact_value(table, (), "z").lookup(table.atoms))
    side = _moment2(table, q - eo.exact_value(table, ("v1p",), "z").lookup(table.atoms))
    side_ok = side + margin < empty
    ok &= side_ok
    notes.append(f"side information: {side:.3f} < {empty:.3f}")
    return ok, "; ".join(notes)


DSEP_MAX_NODES = 7


def dsep_soundness() -> tuple[bool, str]:
    start = time.perf_counter()
    triples, positives, false_true = 0, 0, []
    for f in fx.fixtures():
        g = f.graph
        if len(g) > DSEP_MAX_NODES:
            continue
        table = eo.enumerate_support(g, f.inputs)
        nodes = list(g.order)
        for a, b in itertools.permutations(nodes, 2):
            if g.position[a] > g.position[b]:
                continue
            rest = [n for n in nodes if n not in (a, b)]
            for r in range(len(rest) + 1):
                for Z in itertools.combinations(rest, r):
                    triples += 1
                    if ga.d_separated(g, {a}, {b}, Z):
                        positives += 1
                        if not eo.check_ci_numeric(table, [a], [b], Z):
                            false_true.append((f.name, a, b, Z))
    took = time.perf_counter() - start
    ok = not false_true and took <= 120.0
    return ok, f"{triples} triples, {positives} separated, {len(false_true)} unsound, {took:.1f}s"


def _random_subset(rng, nodes):
    return tuple(n for n in nodes if rng.random() < 0.5)


BOOTSTRAP_CONFIGS = (
    ("CHAIN2", "s0", ("s0",), ("r0",), [(("s1",), ("s1",))]),
    ("CHAIN2", "a0", ("s0", "a0"), ("r0",), [(("s1",), ("s1",))]),
    ("CHAIN2", "s0", ("s0",), ("r0",), [(("s1",), ("s0", "s1"))]),
    ("CHAIN2", "a0", ("s0", "a0"), ("r0",), [(("s1",), ("s1", "a1"))]),
    ("TREE4", "v1", ("v0", "v1"), (), [(("v2",), ("v0", "v1", "v2")), (("v3",), ("v1", "v3"))]),
    ("DECOMP", "vr", ("vr",), (), [(("v1", "v2"), ("vr", "v1", "v2"))]),
)


def bellman_bootstrap(pairs_per_fixture: int = 50) -> tuple[bool, str]:
    rng = np.random.default_rng(7)
    worst = 0.0
    tower = markov = boot = 0
    for f in fx.fixtures():
        g = f.graph
        if any(not isinstance(g.nodes[s].family, eo.Categorical) for s in g.stochastic):
            continue
        table = eo.enumerate_support(g, f.inputs)
        nodes = [n for n in g.order if g.kind(n) != "input"]
        targets = [n for n in g.stochastic if eo.cost_to_go_set(g, n)]
        if not targets:
            continue
        for _ in range(pairs_per_fixture):
            v = targets[rng.integers(len(targets))]
            X2 = _random_subset(rng, nodes)
            X1 = tuple(n for n in X2 if rng.random() < 0.5)
            inner = eo.exact_value(table, X2, v).lookup(table.atoms)
            lhs = eo.conditional_mean(table, X1, inner)
            rhs = eo.exact_value(table, X1, v).lookup(table.atoms)
            worst = max(worst, float(np.max(np.abs(lhs - rhs))))
            tower += 1
            # Markov sets: any X1 inside the ancestral closure of X2
            if ga.is_markov(g, X2, v):
                pool = sorted(ga.ancestors_closure(g, X2) - {n for n in g.inputs})
                X1 = tuple(n for n in pool if rng.random() < 0.5)
                lhs = eo.conditional_mean(table, X1, inner)
                rhs = eo.exact_value(table, X1, v).lookup(table.atoms)
                worst = max(worst, float(np.max(np.abs(lhs - rhs))))
                markov += 1
    for name, v, X_v, V0, parts in BOOTSTRAP_CONFIGS:
        f = fx.get_fixture(name)
        g = f.graph
        if not ga.validate_bootstrap(g, v, X_v, parts, V0):
            return False, f"bootstrap configuration {name}/{v}/{X_v} not certified"
        table = eo.enumerate_support(g, f.inputs)
        target = sum((table.column(c) for c in V0), np.zeros(len(table)))
        for V_i, X_i in parts:
            target = target + eo.exact_value(table, X_i, list(V_i)).lookup(table.atoms)
        lhs = eo.exact_value(table, X_v, v).lookup(table.atoms)
        rhs = eo.conditional_mean(table, X_v, target)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
        boot += 1
    f = fx.chain2_gaussian()
    rep = est.reparameterize_all(f.graph)
    table = eo.enumerate_support(rep, f.inputs)
    grad_boot = [
        est.gradient_critic_bootstrap_check(table, "mu0", ["a0"], ["s0"], [["s0", "a0"]]),
        est.gradient_critic_bootstrap_check(table, "mu1", ["a1"], ["s1"], [["s1", "a1"]]),
        est.gradient_critic_bootstrap_check(table, "th", ["mu0", "mu1"], [], [["s0", "mu0"], ["s1", "mu1"]]),
    ]
    ok = worst <= 1e-8 and all(grad_boot)
    return ok, (f"tower {tower} pairs, Markov {markov} pairs, bootstrap {boot} configs, max gap {worst:.1e}; "
                f"gradient-critic bootstrap {sum(grad_boot)}/{len(grad_boot)}")


def debiased_unbiased() -> tuple[bool, str]:
    f = fx.chain2_gaussian()
    exact = eo.exact_parameter_gradient(f.graph, f.inputs, "th")
    errs = {}
    for label, source in (("exact", "exact"), ("zero", "zero"), ("1.5x", est.Scaled("exact", 1.5))):
        spec = est.EstimatorSpec(label, {
            "a0": est.NodeChoice(est.ValueCritic(("s0", "a0"), source), debias=True),
            "a1": est.NodeChoice(est.ValueCritic(("s1", "a1"), source), debias=True),
        })
        mean, _ = est.compile_estimator(f.graph, f.inputs, spec).exact_moments()["th"]
        errs[label] = abs(mean - exact)
    ok = all(e <= EXACT_TOL for e in errs.values())
    return ok, ", ".join(f"{k}: {v:.1e}" for k, v in errs.items())


def invalid_set_rejection() -> tuple[bool, str]:
    f = fx.tree4()
    spec = est.EstimatorSpec("invalid", {"v1": est.NodeChoice(est.ValueCritic(("v1",)))})
    refused = False
    try:
        est.compile_estimator(f.graph, f.inputs, spec)
    except est.InvalidSpec:
        refused = True
    mean, _ = est.compile_estimator(f.graph, f.inputs, spec, check=False).exact_moments()["th"]
    exact = eo.exact_parameter_gradient(f.graph, f.inputs, "th")
    gap = abs(mean - exact)
    return refused and gap > 10 * EXACT_TOL, f"refused={refused}, unchecked bias {gap:.3e}"


def learned_values(n: int = 100_000, seed: int = 3) -> tuple[bool, str]:
    f = fx.chain2()
    g = f.graph
    table = eo.enumerate_support(g, f.inputs)
    a = forward_sample(g, f.inputs, seed, n=n)
    worst = 0.0
    Q = eo.exact_value(table, ["s0", "a0"], "a0")
    vf, rep = vs.fit_on_return(g, a, ["s0", "a0"], "a0")
    for key, q in Q.table.items():
        worst = max(worst, abs(vf.params[key] - q) / rep.stderr[key])
    V1 = eo.exact_value(table, ["s1"], "s1")
    V0 = eo.exact_value(table, ["s0"], "s0")
    vb, rb = vs.fit_bootstrap(g, a, ["s0"], "s0", [(["s1"], ["s1"], V1)], ["r0"])
    for key, val in V0.table.items():
        worst = max(worst, abs(vb.params[key] - val) / rb.stderr[key])
    ret = table.atoms.cost_to_go(g, "s0")
    boot = table.column("r0") + V1.lookup(table.atoms)
    var_ret = eo.conditional_mean(table, ["s0"], ret ** 2) - eo.conditional_mean(table, ["s0"], ret) ** 2
    var_boot = eo.conditional_mean(table, ["s0"], boot ** 2) - eo.conditional_mean(table, ["s0"], boot) ** 2
    lower = bool(np.all(var_boot <= var_ret + 1e-12))
    return worst <= 5.0 and lower, f"max |fit - exact| = {worst:.2f} stderr, bootstrap variance lower: {lower}"


CRITERIA: list[tuple[str, str, Callable]] = [
    ("C1", "unbiasedness (exact)", unbiased_exact),
    ("C2", "unbiasedness (Monte Carlo)", unbiased_mc),
    ("C3", "horizon double counting", horizon_double_counting),
    ("C4", "gradient of critic", gradient_of_critic),
    ("C5", "variance orderings", variance_orderings),
    ("C6", "d-separation soundness", dsep_soundness),
    ("C7", "Bellman and bootstrap identities", bellman_bootstrap),
    ("C8", "debiased estimator", debiased_unbiased),
    ("C9", "invalid-set rejection", invalid_set_rejection),
    ("C10", "learned-value convergence", learned_values),
]


def run_criterion(ident: str) -> Result:
    for cid, title, fn in CRITERIA:
        if cid == ident:
            start = time.perf_counter()
            try:
                ok, detail = fn()
            except Exception as exc:  # a crash is a failure of that criterion
                ok, detail = False, f"error: {exc!r}"
            return Result(cid, title, bool(ok), detail, time.perf_counter() - start)
    raise KeyError(ident)


def run_all(echo: Callable[[str], None] | None = None) -> list[Result]:
    out = []
    for cid, _, _ in CRITERIA:
        r = run_criterion(cid)
        if echo:
            echo(r.line())
        out.append(r)
    return out
