import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clfcbf.conic import Status
from clfcbf.polyalg import Polynomial, VariableSet, monomial_basis
from clfcbf.sosprog import (
    BasisMismatch,
    BilinearExpressionError,
    GramCertificate,
    SosProgram,
    StatusNotFeasible,
    check_sos_certificate,
    parity_blocks,
    prune_basis,
)

XS = VariableSet(["x1", "x2"])
X1, X2 = XS.polys()
V1, V2 = XS[0], XS[1]


def solve_ok(prog):
    _, sol = prog.solve()
    assert sol.status is Status.OPTIMAL, sol.reason
    return prog.recover(sol)


# --------------------------------------------------------- decision objects


def test_free_polynomial_slot_counts():
    prog = SosProgram()
    assert len(prog.new_free_polynomial([V1], 1).basis) == 2
    assert len(prog.new_free_polynomial([V1, V2], 2).basis) == 6
    p0 = prog.new_free_polynomial([V1, V2], 0)
    assert p0.basis == [()]
    assert prog.num_slots == 9


def test_free_polynomial_even_and_min_degree():
    prog = SosProgram()
    p = prog.new_free_polynomial([V1, V2], 2, even_in=[V2], min_degree=1)
    assert sorted(p.basis) == sorted([((V1, 1),), ((V1, 2),), ((V2, 2),)])


def test_bilinear_products_rejected():
    prog = SosProgram()
    a = prog.new_free_polynomial([V1], 1)
    b = prog.new_free_polynomial([V1], 1)
    with pytest.raises(BilinearExpressionError):
        a * b


# -------------------------------------------------------------- constraints


def test_perfect_square_is_sos():
    prog = SosProgram()
    g = prog.add_sos_constraint((X1 - 1) ** 2)
    rec = solve_ok(prog)
    assert rec.check(g).passed
    hand = GramCertificate(monomial_basis([V1], 1), np.array([[1.0, -1.0], [-1.0, 1.0]]))
    np.testing.assert_allclose(np.linalg.eigvalsh(hand.matrix), [0.0, 2.0], atol=1e-12)
    assert check_sos_certificate((X1 - 1) ** 2, hand).passed


def test_negative_square_is_infeasible():
    prog = SosProgram()
    prog.add_sos_constraint(-(X1 * X1))
    _, sol = prog.solve()
    assert sol.status is Status.PRIMAL_INFEASIBLE


def test_single_term_gram():
    prog = SosProgram()
    g = prog.add_sos_constraint(X1 * X1 * 2)
    rec = solve_ok(prog)
    assert g.basis == [((V1, 1),)]
    np.testing.assert_allclose(rec.grams[g.index].matrix, [[2.0]], atol=1e-7)


def test_sdsos_examples():
    prog = SosProgram()
    prog.add_sdsos_constraint(X1 * X1 + X2 * X2)
    solve_ok(prog)

    prog = SosProgram()
    prog.add_sdsos_constraint(X1 * X1 + X1 * X2 * 4 + X2 * X2)
    _, sol = prog.solve()
    assert sol.status is Status.PRIMAL_INFEASIBLE

    prog = SosProgram()
    g = prog.add_sdsos_constraint((X1 + X2) ** 2)
    rec = solve_ok(prog)
    G = rec.grams[g.index].matrix
    np.testing.assert_allclose(G, [[1.0, 1.0], [1.0, 1.0]], atol=1e-6)


def test_odd_degree_is_padded():
    prog = SosProgram()
    g = prog.add_sos_constraint(X1 ** 3 + 1)
    assert g.padded


def test_linear_eq_pins_constant_slot():
    prog = SosProgram()
    V = prog.new_free_polynomial([V1], 2)
    prog.add_linear_eq(V.evaluate({V1: 0.0}))
    slope = V.differentiate(V1).evaluate({V1: 0.0})
    prog.add_scalar_bounds(slope, 1.0, 2.0)
    rec = solve_ok(prog)
    assert rec.value(V).constant() == pytest.approx(0.0, abs=1e-9)
    assert 1.0 - 1e-7 <= rec.scalar(slope) <= 2.0 + 1e-7


def test_scalar_bounds_interval():
    prog = SosProgram()
    h = prog.new_free_polynomial([V1], 1)
    h0 = h.evaluate({V1: 0.0})
    prog.add_scalar_bounds(h0, 0.5, 2.0)
    prog.set_objective(h0)
    rec = solve_ok(prog)
    assert rec.scalar(h0) == pytest.approx(0.5, abs=1e-7)
    prog.set_objective(-1.0 * h0)
    rec = solve_ok(prog)
    assert rec.scalar(h0) == pytest.approx(2.0, abs=1e-7)


def test_zero_expression_constraint_accepted():
    prog = SosProgram()
    prog.add_linear_eq(Polynomial())
    assert prog.compile().b.shape == (0,)


def test_min_t_at_least_one():
    prog = SosProgram()
    (t,) = prog.new_scalars(1)
    prog.add_scalar_bounds(t, lo=1.0)
    prog.set_objective(t)
    rec = solve_ok(prog)
    assert rec.scalar(t) == pytest.approx(1.0, abs=1e-7)


def test_psd_2x2_program():
    prog = SosProgram()
    p, g = prog.new_sos_polynomial([V1], 2)  # X00 + 2 X10 x1 + X11 x1^2
    x10 = 0.5 * p.differentiate(V1).evaluate({V1: 0.0})
    prog.add_linear_eq(p.evaluate({V1: 0.0}) - 1.0)           # X00 = 1
    prog.add_linear_eq(0.5 * p.differentiate(V1).differentiate(V1) - 1.0)  # X11 = 1
    prog.set_objective(-1.0 * x10)
    problem, sol = prog.solve()
    assert sol.status is Status.OPTIMAL
    assert sol.objective == pytest.approx(-1.0, abs=1e-6)


def test_toy_program_has_one_block_per_multiplier(toy, toy_init):
    from clfcbf.certify import build_compatibility_program

    bp = build_compatibility_program(toy[0], toy_init, use_symmetry=False)
    psd = [c for c in bp.prog.compile().cones if c.kind == "psd"]
    # s2, s3 and the master each contribute one PSD block without symmetry
    assert len(psd) == 3
    assert [c.order for c in psd][:2] == [len(bp.g2.basis), len(bp.g3.basis)]


def test_recover_pinned_slot():
    prog = SosProgram()
    (a,) = prog.new_scalars(1)
    prog.add_linear_eq(a - 3.25)
    rec = solve_ok(prog)
    assert rec.scalar(a) == pytest.approx(3.25, abs=1e-9)


def test_recover_infeasible_raises():
    prog = SosProgram()
    prog.add_sos_constraint(-(X1 * X1) - 1)
    _, sol = prog.solve()
    with pytest.raises(StatusNotFeasible):
        prog.recover(sol)


def test_compile_is_deterministic():
    def build():
        prog = SosProgram()
        q = prog.new_free_polynomial([V1, V2], 2)
        prog.add_sos_constraint(X1 ** 4 + X2 ** 4 + 1 - q)
        prog.add_sdsos_constraint(q + X1 * X1 + X2 * X2)
        prog.set_objective(q.evaluate({V1: 0.0, V2: 0.0}))
        return prog.compile().to_text()

    assert build() == build()


# ------------------------------------------------------------ certificate check


def test_check_wrong_sign():
    rep = check_sos_certificate(X1 * X1, GramCertificate([((V1, 1),)], [[-1.0]]))
    assert not rep.passed
    assert rep.residual == pytest.approx(2.0)
    assert rep.min_eig == pytest.approx(-1.0)


def test_check_empty():
    assert check_sos_certificate(Polynomial(), GramCertificate([], np.zeros((0, 0)))).passed


def test_check_basis_mismatch():
    with pytest.raises(BasisMismatch):
        GramCertificate([((V1, 1),)], np.eye(2))


# ------------------------------------------------------------ basis reduction


def test_parity_blocks_split_by_sign_class():
    basis = monomial_basis([V1, V2], 1)  # 1, x1, x2
    assert parity_blocks(basis, [V2]) == [[0, 1], [2]]


def test_prune_drops_forced_zero_rows():
    # x1^4 + 1: the x1 row can only pair with x1^2*1 which is fine, nothing
    # pruned; x1^2 + 1 over [1, x1, x2] loses x2.
    basis = monomial_basis([V1, V2], 1)
    kept = prune_basis(basis, (X1 * X1 + 1).terms.keys())
    assert ((V2, 1),) not in kept and () in kept


def test_symmetry_requires_even_expression():
    prog = SosProgram()
    with pytest.raises(ValueError):
        prog.add_sos_constraint(X1 * X2 + X2 * X2 + X1 * X1, symmetry=[V2])


# --------------------------------------------------------------- properties


def _random_sos(rng, nvars=2, half=2, nsq=3):
    xs = XS.polys()[:nvars]
    basis = monomial_basis(list(XS)[:nvars], half)
    p = Polynomial()
    for _ in range(nsq):
        q = Polynomial()
        for m in basis:
            q = q + Polynomial.monomial(m, float(rng.uniform(-1, 1)))
        p = p + q * q
    return p


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_compile_recover_round_trip(seed):
    rng = np.random.default_rng(seed)
    p = _random_sos(rng)
    prog = SosProgram()
    r = prog.new_free_polynomial([V1, V2], 2)
    target = Polynomial.monomial(((V1, 1),), float(rng.uniform(-0.1, 0.1)))
    prog.add_linear_eq(r - target)
    g = prog.add_sos_constraint(p - r + 0.2)
    rec = solve_ok(prog)
    assert (rec.value(r) - target).max_abs_coefficient() <= 1e-6
    assert rec.check(g, 1e-6).passed


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_constructed_sos_is_feasible(seed):
    rng = np.random.default_rng(seed)
    prog = SosProgram()
    g = prog.add_sos_constraint(_random_sos(rng, half=int(rng.integers(1, 3)), nsq=int(rng.integers(1, 4))))
    rec = solve_ok(prog)
    assert rec.check(g, 1e-6).passed


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_sdsos_feasible_implies_sos_feasible(seed):
    rng = np.random.default_rng(seed)
    basis = monomial_basis([V1, V2], 1)
    M = rng.uniform(-1, 1, (3, 3))
    G = M + M.T + np.diag(rng.uniform(0, 3, 3))
    p = GramCertificate(basis, G).polynomial()
    prog = SosProgram()
    prog.add_sdsos_constraint(p)
    _, sd = prog.solve()
    prog = SosProgram()
    prog.add_sos_constraint(p)
    _, so = prog.solve()
    if sd.status is Status.OPTIMAL:
        assert so.status is Status.OPTIMAL
    if so.status is Status.PRIMAL_INFEASIBLE:
        assert sd.status is Status.PRIMAL_INFEASIBLE
