import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clfcbf.polyalg import (
    ParseError,
    PolyEvaluator,
    Polynomial,
    UnboundVariableError,
    UnknownVariableError,
    VariableSet,
    binomial_count,
    mono_key,
    monomial_basis,
    parse_polynomial,
)

XS = VariableSet(["x1", "x2", "x3", "x4"])
X1, X2, X3, X4 = XS.polys()


def P(text, xs=XS):
    return parse_polynomial(text, xs)


# ------------------------------------------------------------------ parser


def test_parse_unsafe_polynomial():
    p = P("x1 + x2 + x3 + 2")
    assert len(p.terms) == 4
    assert p.degree() == 1


def test_parse_zero_is_empty():
    p = P("0")
    assert p.is_zero()
    assert dict(p.terms) == {}


def test_parse_square_expands():
    assert P("(x1 - 1)^2") == X1 * X1 - 2 * X1 + 1


def test_parse_precedence_and_unary():
    assert P("-x1^2*3 + -(x2)") == X1 * X1 * -3 - X2
    assert P("2*x1^0") == Polynomial(2.0)


@pytest.mark.parametrize("text,offset", [("x1 +", 4), ("x1 $ 2", 3), ("(x1", 3), ("x1^x2", 3), ("x1^1.5", 3)])
def test_parse_errors_carry_offset(text, offset):
    with pytest.raises(ParseError) as info:
        P(text)
    assert info.value.offset == offset


def test_unknown_variable_names_it():
    with pytest.raises(UnknownVariableError) as info:
        P("x1 + z")
    assert info.value.name == "z"
    assert info.value.offset == 5


def test_print_format():
    assert (X1 * X2 * 3 - X1 ** 2 + 0.5).to_string() == "0.5 - x1^2 + 3.0*x1*x2"


# -------------------------------------------------------------- arithmetic


def test_cancellation():
    assert (X1 + -X1).is_zero()


def test_difference_of_squares():
    assert (X1 + 1) * (X1 - 1) == X1 * X1 - 1


def test_scale():
    assert (X1 * X1).scale(10) == P("10*x1^2")


def test_prune_tolerance():
    assert (X1 * 1e-13).is_zero()
    assert not (X1 * 1e-11).is_zero()


def test_product_degree():
    a, b = P("x1^2 + x2"), P("x3^3 - 1")
    assert (a * b).degree() == 5


# ---------------------------------------------------------- differentiation


def test_power_rule():
    assert P("x1^2*x2").differentiate(XS[0]) == P("2*x1*x2")


def test_independent_variable():
    assert X1.differentiate(XS[1]).is_zero()


def test_derivative_of_initial_clf():
    V = P("10*(x1^2 + x2^2 + x3^2)")
    assert V.differentiate(XS[2]) == P("20*x3")


# --------------------------------------------------------------- evaluation


def test_evaluate_initial_clf():
    V = P("10*(x1^2 + x2^2 + x3^2)")
    assert V.evaluate({XS[0]: 0.1, XS[1]: 0.0, XS[2]: 0.0}) == pytest.approx(0.1, abs=1e-15)


def test_evaluate_at_zero_is_constant():
    p = P("3.5 + x1*x2 - x3^4")
    assert p.evaluate({v: 0.0 for v in XS}) == 3.5


def test_evaluate_unsafe_point():
    p = P("x1 + x2 + x3 + 2")
    assert p.evaluate({"x1": -1, "x2": -1, "x3": -1}) == -1


def test_unbound_variable():
    with pytest.raises(UnboundVariableError):
        P("x1 + x2").evaluate({XS[0]: 1.0})


# ----------------------------------------------------------- monomial basis


def test_basis_degree_one():
    basis = monomial_basis(XS[:2], 1)
    assert [Polynomial.monomial(m) for m in basis] == [Polynomial(1.0), X1, X2]


def test_basis_degree_zero():
    assert monomial_basis(XS, 0) == [()]


def test_basis_count_three_vars():
    assert len(monomial_basis(XS[:3], 2)) == 10


@pytest.mark.parametrize("n,d", [(1, 5), (2, 3), (3, 4), (4, 2)])
def test_basis_counts_and_order(n, d):
    basis = monomial_basis(XS[:n], d)
    assert len(basis) == binomial_count(n, d) == math.comb(n + d, d)
    assert basis == sorted(basis, key=mono_key)


# --------------------------------------------------------------- properties

coef = st.floats(-10, 10, allow_nan=False).filter(lambda c: abs(c) > 1e-12)


@st.composite
def exps(draw, max_degree=6):
    budget, out = max_degree, []
    for _ in range(4):
        k = draw(st.integers(0, budget))
        out.append(k)
        budget -= k
    return tuple(draw(st.permutations(out)))



@st.composite
def polys(draw, max_terms=8):
    p = Polynomial()
    for e, c in draw(st.lists(st.tuples(exps(), coef), max_size=max_terms)):
        term = Polynomial(c)
        for v, k in zip(XS.polys(), e):
            term = term * v ** k
        p = p + term
    return p


@settings(max_examples=1000)
@given(polys())
def test_print_parse_round_trip(p):
    q = P(p.to_string())
    assert dict(q.terms) == dict(p.terms)


@settings(max_examples=1000)
@given(polys(4), polys(4), polys(4))
def test_ring_axioms(a, b, c):
    assert ((a + b) + c).allclose(a + (b + c), 1e-9)
    assert (a * (b + c)).allclose(a * b + a * c, 1e-9 * (1 + (a * (b + c)).max_abs_coefficient()))
    assert (a * b).allclose(b * a, 1e-9 * (1 + (a * b).max_abs_coefficient()))


@settings(max_examples=300)
@given(polys(4), polys(4), st.sampled_from(list(XS)))
def test_product_rule(a, b, v):
    lhs = (a * b).differentiate(v)
    rhs = a * b.differentiate(v) + b * a.differentiate(v)
    assert lhs.allclose(rhs, 1e-9 * (1 + lhs.max_abs_coefficient()))
    assert (a + b).differentiate(v).allclose(a.differentiate(v) + b.differentiate(v), 1e-9)


@settings(max_examples=300)
@given(polys(4), polys(4), st.tuples(*[st.floats(-1.5, 1.5)] * 4))
def test_evaluation_homomorphism(a, b, x):
    pt = dict(zip(XS, x))
    lhs = (a * b).evaluate(pt)
    rhs = a.evaluate(pt) * b.evaluate(pt)
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9 * (1 + abs(rhs)))


@settings(max_examples=100)
@given(st.lists(polys(6), min_size=1, max_size=3), st.integers(0, 2**31 - 1))
def test_batch_evaluation_is_pointwise_exact(ps, seed):
    X = np.random.default_rng(seed).uniform(-1.5, 1.5, (17, 4))
    ev = PolyEvaluator(ps, XS)
    batch = ev(X)
    for i, x in enumerate(X):
        assert np.array_equal(ev(x), batch[i])
        ref = [p.evaluate(dict(zip(XS, x))) for p in ps]
        np.testing.assert_allclose(batch[i], ref, rtol=1e-12, atol=1e-12)
