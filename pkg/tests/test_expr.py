import math

import numpy as np
import pytest

from scg.expr import NumericalDomain, ParseError, as_expr, parse


@pytest.mark.parametrize("text, env, want", [
    ("(add x 1)", {"x": 2.0}, 3.0),
    ("(mul 2 x y)", {"x": 2.0, "y": 3.0}, 12.0),
    ("(affine -10 20 z)", {"z": 1.0}, 10.0),
    ("(select z 1 3)", {"z": 1.0}, 3.0),
    ("(pow (neg x) 3)", {"x": 2.0}, -8.0),
    ("(recip (exp 0))", {}, 1.0),
    ("(tanh 0)", {}, 0.0),
    ("(log x)", {"x": math.e}, 1.0),
    ("-1.5", {}, -1.5),
])
def test_evaluate(text, env, want):
    assert parse(text).evaluate(env) == pytest.approx(want)


def test_vectorized_select():
    got = parse("(select z x (neg x))").evaluate({"z": np.array([0.0, 1.0, 1.0]), "x": np.array([1.0, 2.0, 3.0])})
    np.testing.assert_array_equal(got, [1.0, -2.0, -3.0])


def test_refs_and_round_trip():
    e = parse("(add v1 (mul x x) -1)")
    assert e.refs() == {"v1", "x"}
    assert parse(str(e)) == e
    assert as_expr(e) is e and as_expr(2) == parse("2")


@pytest.mark.parametrize("text, fragment", [
    ("", "empty"),
    ("(add x", "missing"),
    ("(frob x)", "unknown operator"),
    ("(neg x y)", "number of arguments"),
    ("(pow x 1.5)", "integer"),
    ("(affine b 1 x)", "numeric"),
    ("x y", "trailing"),
    (")", "unexpected"),
    ("()", "operator"),
])
def test_parse_errors(text, fragment):
    with pytest.raises(ParseError) as info:
        parse(text, node="n")
    assert fragment in str(info.value)
    assert info.value.node == "n"


def test_domain_errors():
    with pytest.raises(NumericalDomain):
        parse("(log x)").evaluate({"x": -1.0})
    with pytest.raises(NumericalDomain):
        parse("(recip x)").evaluate({"x": 0.0})


def test_uninterpretable_value():
    with pytest.raises(ParseError):
        as_expr([1, 2])
