import json

import numpy as np
import pytest

from scg import estimators as est
from scg import exact_oracle as eo
from scg import fixtures as fx
from scg import value_store as vs
from scg.graph_core import Assignment, build_graph, cost, forward_sample, input_node, stochastic


@pytest.fixture(scope="module")
def chain2():
    f = fx.chain2()
    return f, eo.enumerate_support(f.graph, f.inputs), forward_sample(f.graph, f.inputs, 7, n=40_000)


@pytest.fixture(scope="module")
def chain2_rep():
    f = fx.chain2_gaussian()
    rep = est.reparameterize_all(f.graph)
    return f, rep, forward_sample(rep, f.inputs, 3, n=20_000)


# ---------------------------------------------------------------- tabular

def test_running_mean_update():
    vf = vs.TabularValueFn(["s"])
    for y in (1.0, 2.0, 6.0):
        vf.update((0.0,), y)
    assert vf.params[(0.0,)] == pytest.approx(3.0)
    vf.update((0.0,), 7.0, weight=3.0)
    assert vf.params[(0.0,)] == pytest.approx(5.0)


def test_unseen_keys_predict_default_and_count_misses():
    vf = vs.TabularValueFn(["s"])
    vf.update((1.0,), 2.0)
    a = Assignment({"s": np.array([0.0, 1.0, 0.0])}, {}, 3)
    np.testing.assert_array_equal(vf.predict(a), [0.0, 2.0, 0.0])
    assert vf.misses == 2


def test_fit_on_return_matches_exact_q(chain2):
    f, table, a = chain2
    Q = eo.exact_value(table, ["s0", "a0"], "a0")
    vf, rep = vs.fit_on_return(f.graph, a, ["s0", "a0"], "a0")
    assert set(vf.params) == set(Q.table)
    for key, q in Q.table.items():
        assert abs(vf.params[key] - q) <= 5 * rep.stderr[key]
    assert rep.residual_max <= 1e-9


def test_fit_on_return_with_enumeration_weights_is_exact(chain2):
    f, table, _ = chain2
    Q = eo.exact_value(table, ["s1", "a1"], "a1")
    vf, _ = vs.fit_on_return(f.graph, table.atoms, ["s1", "a1"], "a1", weights=table.prob)
    for key, q in Q.table.items():
        assert vf.params[key] == pytest.approx(q, abs=1e-8)


def test_fit_on_return_with_empty_set_is_the_mean(chain2):
    f, _, a = chain2
    vf, _ = vs.fit_on_return(f.graph, a, [], "s0")
    assert vf.params[()] == pytest.approx(float(np.mean(a.cost_to_go(f.graph, "s0"))))


def test_fit_on_a_constant_stream(chain2):
    f, _, _ = chain2
    row = forward_sample(f.graph, f.inputs, 1)
    vf, rep = vs.fit_on_return(f.graph, [row] * 50, ["s0"], "s0")
    assert vf.params[(row.values["s0"],)] == pytest.approx(row.cost_to_go(f.graph, "s0"))
    assert rep.loss == pytest.approx(0.0, abs=1e-20)


def test_fit_on_return_rejects_an_empty_stream(chain2):
    f, _, _ = chain2
    with pytest.raises(ValueError):
        vs.fit_on_return(f.graph, [], ["s0"], "s0")


def test_fit_bootstrap_matches_exact_value(chain2):
    f, table, a = chain2
    V1 = eo.exact_value(table, ["s1"], "s1")
    V0 = eo.exact_value(table, ["s0"], "s0")
    vb, rb = vs.fit_bootstrap(f.graph, a, ["s0"], "s0", [(["s1"], ["s1"], V1)], ["r0"])
    for key, v in V0.table.items():
        assert abs(vb.params[key] - v) <= 5 * rb.stderr[key]
    exact, _ = vs.fit_bootstrap(f.graph, table.atoms, ["s0"], "s0", [(["s1"], ["s1"], V1)], ["r0"], weights=table.prob)
    for key, v in V0.table.items():
        assert exact.params[key] == pytest.approx(v, abs=1e-8)


def test_bootstrap_target_has_lower_spread_than_return(chain2):
    f, table, a = chain2
    V1 = eo.exact_value(table, ["s1"], "s1")
    _, boot = vs.fit_bootstrap(f.graph, a, ["s0"], "s0", [(["s1"], ["s1"], V1)], ["r0"])
    _, ret = vs.fit_on_return(f.graph, a, ["s0"], "s0")
    assert all(boot.stderr[k] <= ret.stderr[k] for k in ret.stderr)


def test_bootstrap_with_learned_parts(chain2):
    f, table, a = chain2
    V1_fit, _ = vs.fit_on_return(f.graph, a, ["s1"], "s1")
    vb, rb = vs.fit_bootstrap(f.graph, a, ["s0"], "s0", [(["s1"], ["s1"], V1_fit)], ["r0"])
    V0 = eo.exact_value(table, ["s0"], "s0")
    for key, v in V0.table.items():
        assert abs(vb.params[key] - v) <= 5 * rb.stderr[key] + 0.02


def test_invalid_bootstrap_is_refused(chain2):
    f, table, a = chain2
    V1 = eo.exact_value(table, ["a1"], "s1")
    with pytest.raises(vs.BootstrapInvalid):
        vs.fit_bootstrap(f.graph, a, ["s0"], "s0", [(["s1"], ["a1"], V1)], ["r0"])


def test_zero_cost_graph_fits_zero():
    g = build_graph([input_node("th"), stochastic("z", ["th"], fx.cat(0, "th")), cost("l", ["z"], "(mul 0 z)")])
    a = forward_sample(g, {"th": 0.2}, 0, n=100)
    vf, _ = vs.fit_bootstrap(g, a, ["z"], "z", [], ["l"])
    assert all(p == 0.0 for p in vf.params.values())


# ---------------------------------------------------------------- gradient critics

def _dr1(a):
    return 2 * (0.2 + a.values["a1"] - 0.5 * a.values["s1"])


def _central(a, v):
    lo, hi = np.quantile(a.values[v], [0.05, 0.95])
    return (a.values[v] >= lo) & (a.values[v] <= hi)


@pytest.mark.parametrize("mode", vs.MODES)
def test_gradient_critic_recovers_the_derivative(chain2_rep, mode):
    f, rep, a = chain2_rep
    vf, report = vs.fit_gradient_critic(rep, a, "a1", ["s1", "a1"], mode=mode)
    mask = _central(a, "a1")
    gap = np.abs(vf.derivative(a) - _dr1(a))[mask]
    scale = np.abs(_dr1(a))[mask].max()
    assert gap.max() <= 0.05 * scale
    assert report.steps > 0


def test_gradient_critic_on_a_noisy_target(chain2_rep):
    f, rep, a = chain2_rep
    table = eo.enumerate_support(rep, f.inputs)
    gc = eo.exact_gradient_critic(table, "a0", ["s0", "a0"])
    vf, _ = vs.fit_gradient_critic(rep, a, "a0", ["s0", "a0"], mode="grad-only")
    mask = _central(a, "a0")
    # compare on the quadrature nodes that fall in the data range
    atoms = table.atoms
    keep = (atoms.values["a0"] >= a.values["a0"][mask].min()) & (atoms.values["a0"] <= a.values["a0"][mask].max())
    got = vf.derivative(atoms)[keep]
    want = gc.value.lookup(atoms)[keep]
    assert np.max(np.abs(got - want)) <= 0.1 * max(1.0, np.max(np.abs(want)))


def test_constant_loss_gives_a_zero_gradient_critic():
    from scg.graph_core import Gaussian
    from scg.expr import as_expr

    g = build_graph([input_node("th"), stochastic("z", ["th"], Gaussian(as_expr("th"), as_expr(0.0))),
                     cost("l", ["z"], "(add 4 (mul 0 z))")])
    rep = est.reparameterize_all(g)
    a = forward_sample(rep, {"th": 0.5}, 2, n=500)
    vf, _ = vs.fit_gradient_critic(rep, a, "z", ["z"], mode="grad-only")
    np.testing.assert_allclose(vf.derivative(a), 0.0, atol=1e-8)
    vf, _ = vs.fit_gradient_critic(rep, a, "z", ["z"], mode="value-only")
    np.testing.assert_allclose(vf.value(a), 4.0, atol=1e-6)


def test_value_signal_needs_a_markov_set(chain2_rep):
    f, rep, a = chain2_rep
    with pytest.raises(vs.NotMarkov):
        vs.fit_gradient_critic(rep, a, "a1", ["a1"], mode="sobolev")
    # grad-only does not regress values, so no Markov requirement
    vs.fit_gradient_critic(rep, a, "a1", ["a1"], mode="grad-only", max_steps=2000)


def test_value_signal_needs_noise(chain2_rep):
    f, rep, a = chain2_rep
    with pytest.raises(vs.InsufficientNoise):
        vs.fit_gradient_critic(rep, a, "a1", ["s1", "eps_a1", "mu1", "a1"], mode="value-only")


def test_gradient_critic_argument_errors(chain2_rep):
    f, rep, a = chain2_rep
    with pytest.raises(ValueError):
        vs.fit_gradient_critic(rep, a, "a1", ["s1"])
    with pytest.raises(ValueError):
        vs.fit_gradient_critic(rep, a, "a1", ["s1", "a1"], mode="newton")


# ---------------------------------------------------------------- persistence

def test_tabular_json_round_trip(chain2):
    f, _, a = chain2
    vf, _ = vs.fit_on_return(f.graph, a, ["s0", "a0"], "a0")
    back = vs.loads(vs.dumps(vf))
    assert isinstance(back, vs.TabularValueFn)
    np.testing.assert_array_equal(back.predict(a), vf.predict(a))
    assert json.loads(vs.dumps(vf))["set"] == ["s0", "a0"]


def test_poly_json_round_trip(chain2_rep):
    f, rep, a = chain2_rep
    vf, _ = vs.fit_gradient_critic(rep, a, "a1", ["s1", "a1"], mode="grad-only")
    back = vs.loads(vs.dumps(vf))
    assert isinstance(back, vs.PolyValueFn)
    np.testing.assert_allclose(back.derivative(a), vf.derivative(a), rtol=1e-15)
    np.testing.assert_allclose(vf.scaled(2.0).derivative(a), 2 * vf.derivative(a))
