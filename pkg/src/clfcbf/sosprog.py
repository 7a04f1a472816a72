"""SOS program builder, lowering to conic form, and certificate recovery."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .conic import (
    SQRT2,
    Cone,
    ConicProblem,
    ConicSolution,
    SolverSettings,
    Status,
    solve,
    svec_index,
)
from .polyalg import (
    ONE,
    PRUNE_TOL,
    Monomial,
    Polynomial,
    Variable,
    mono_degree,
    mono_key,
    mono_mul,
    monomial_basis,
)

CONST = -1  # key of the constant part inside a linear form
Number = Union[int, float]
LinForm = Dict[int, float]


class BilinearExpressionError(TypeError):
    pass


class StatusNotFeasible(RuntimeError):
    def __init__(self, solution: ConicSolution):
        super().__init__(f"solver status {solution.status.value} ({solution.reason})")
        self.solution = solution


class BasisMismatch(ValueError):
    pass


def _lin_add(dst: LinForm, src: LinForm, k: float = 1.0) -> None:
    for s, v in src.items():
        dst[s] = dst.get(s, 0.0) + k * v


def _lin_clean(lin: LinForm) -> LinForm:
    return {s: v for s, v in lin.items() if abs(v) > PRUNE_TOL}


class PolyExpr:
    """Polynomial whose coefficients are affine in decision scalars.

    ``terms`` maps each monomial to a linear form ``{slot: coef}``; the key
    ``CONST`` (-1) holds the constant part.
    """

    __slots__ = ("terms",)

    def __init__(self, terms: Optional[Mapping[Monomial, LinForm]] = None):
        self.terms: Dict[Monomial, LinForm] = {}
        if terms:
            for m, lin in terms.items():
                lin = _lin_clean(lin)
                if lin:
                    self.terms[m] = lin

    @classmethod
    def lift(cls, p) -> "PolyExpr":
        if isinstance(p, PolyExpr):
            return p
        if isinstance(p, (int, float, np.floating, np.integer)):
            p = Polynomial(float(p))
        if not isinstance(p, Polynomial):
            raise TypeError(f"cannot lift {type(p).__name__} to PolyExpr")
        return cls({m: {CONST: c} for m, c in p.terms.items()})

    @classmethod
    def slot(cls, index: int, coef: float = 1.0, monomial: Monomial = ONE) -> "PolyExpr":
        return cls({monomial: {index: coef}})

    # structure ------------------------------------------------------------
    def degree(self) -> int:
        return max((mono_degree(m) for m in self.terms), default=-1)

    def variables(self) -> List[Variable]:
        return sorted({v for m in self.terms for v, _ in m})

    def slots(self) -> List[int]:
        return sorted({s for lin in self.terms.values() for s in lin if s != CONST})

    def is_constant(self) -> bool:
        """True when no decision scalar appears."""
        return all(set(lin) <= {CONST} for lin in self.terms.values())

    def is_zero(self) -> bool:
        return not self.terms

    def to_polynomial(self) -> Polynomial:
        if not self.is_constant():
            raise BilinearExpressionError("expression depends on decision scalars")
        return Polynomial({m: lin.get(CONST, 0.0) for m, lin in self.terms.items()})

    def scalar(self) -> LinForm:
        """The linear form of a degree-0 expression."""
        if any(m != ONE for m in self.terms):
            raise ValueError("expression is not a scalar")
        return dict(self.terms.get(ONE, {}))

    # arithmetic -------------------------------------------------------------
    def _combine(self, other, k: float) -> "PolyExpr":
        other = PolyExpr.lift(other)
        out = {m: dict(lin) for m, lin in self.terms.items()}
        for m, lin in other.terms.items():
            _lin_add(out.setdefault(m, {}), lin, k)
        return PolyExpr(out)

    def __add__(self, other):
        return self._combine(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def __rsub__(self, other):
        return PolyExpr.lift(other)._combine(self, -1.0)

    def __neg__(self):
        return self * -1.0

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            k = float(other)
            return PolyExpr({m: {s: v * k for s, v in lin.items()} for m, lin in self.terms.items()})
        if isinstance(other, PolyExpr):
            if other.is_constant():
                other = other.to_polynomial()
            elif self.is_constant():
                return other * self.to_polynomial()
            else:
                raise BilinearExpressionError("product of two decision-dependent expressions")
        if not isinstance(other, Polynomial):
            return NotImplemented
        out: Dict[Monomial, LinForm] = {}
        for m2, c in other.terms.items():
            for m1, lin in self.terms.items():
                dst = out.setdefault(mono_mul(m1, m2), {})
                for s, v in lin.items():
                    dst[s] = dst.get(s, 0.0) + v * c
        return PolyExpr(out)

    __rmul__ = __mul__

    def differentiate(self, v: Variable) -> "PolyExpr":
        out: Dict[Monomial, LinForm] = {}
        for m, lin in self.terms.items():
            for k, (w, e) in enumerate(m):
                if w == v:
                    dm = m[:k] + m[k + 1:] if e == 1 else m[:k] + ((w, e - 1),) + m[k + 1:]
                    _lin_add(out.setdefault(dm, {}), lin, float(e))
                    break
        return PolyExpr(out)

    def evaluate(self, point: Mapping) -> "PolyExpr":
        """Substitute numeric values for variables; result is a scalar expression."""
        lin: LinForm = {}
        for m, coefs in self.terms.items():
            val = 1.0
            for v, e in m:
                x = point[v] if v in point else point[v.name]
                val *= float(x) ** e
            _lin_add(lin, coefs, val)
        return PolyExpr({ONE: lin})

    def value(self, x: np.ndarray) -> Polynomial:
        """Polynomial obtained by fixing decision scalars to ``x``."""
        out = {}
        for m, lin in self.terms.items():
            out[m] = sum(v * (1.0 if s == CONST else x[s]) for s, v in lin.items())
        return Polynomial(out)

    def __repr__(self):
        return f"PolyExpr(<{len(self.terms)} terms, {len(self.slots())} slots>)"


Expr = Union[PolyExpr, Polynomial, float, int]


class DecisionPolynomial(PolyExpr):
    """Free polynomial with one decision scalar per basis monomial."""

    __slots__ = ("basis", "slot_ids")

    def __init__(self, basis: Sequence[Monomial], slot_ids: Sequence[int]):
        super().__init__({m: {int(s): 1.0} for m, s in zip(basis, slot_ids)})
        self.basis = list(basis)
        self.slot_ids = np.asarray(slot_ids, dtype=int)


@dataclass
class GramCertificate:
    basis: List[Monomial]
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float).reshape(len(self.basis), -1) if self.basis else np.zeros((0, 0))
        if self.matrix.shape != (len(self.basis), len(self.basis)):
            raise BasisMismatch("Gram dimension differs from basis size")
        self.matrix = 0.5 * (self.matrix + self.matrix.T)

    def polynomial(self) -> Polynomial:
        out: Dict[Monomial, float] = {}
        n = len(self.basis)
        for i in range(n):
            for j in range(n):
                m = mono_mul(self.basis[i], self.basis[j])
                out[m] = out.get(m, 0.0) + self.matrix[i, j]
        return Polynomial(out)

    def min_eigenvalue(self) -> float:
        if not self.basis:
            return 0.0
        return float(np.linalg.eigvalsh(self.matrix).min())


@dataclass
class CheckReport:
    passed: bool
    min_eig: float
    residual: float
    gram_norm: float
    poly_norm: float
    tol: float

    def __str__(self):
        verdict = "pass" if self.passed else "FAIL"
        return f"{verdict} min_eig={self.min_eig:.3e} residual={self.residual:.3e}"


def check_sos_certificate(p: Polynomial, gram: GramCertificate, tol: float = 1e-6) -> CheckReport:
    """Independent check that ``p == m' G m`` with ``G`` PSD, to relative ``tol``."""
    if gram.matrix.shape != (len(gram.basis), len(gram.basis)):
        raise BasisMismatch("Gram dimension differs from basis size")
    min_eig = gram.min_eigenvalue()
    gnorm = float(np.abs(np.linalg.eigvalsh(gram.matrix)).max()) if gram.basis else 0.0
    residual = (p - gram.polynomial()).max_abs_coefficient()
    pnorm = p.max_abs_coefficient()
    passed = min_eig >= -tol * (1.0 + gnorm) and residual <= tol * (1.0 + pnorm)
    return CheckReport(passed, min_eig, residual, gnorm, pnorm, tol)


@dataclass
class GramHandle:
    """A Gram block introduced by an SOS/SDSOS constraint or polynomial."""

    index: int
    kind: str  # sos | sdsos
    basis: List[Monomial]
    entries: List[List[LinForm]]  # lower triangle linear forms, entries[i][j], j <= i
    expr: Optional[PolyExpr] = None  # the constrained expression, if any
    name: str = ""
    padded: bool = False

    def matrix(self, x: np.ndarray) -> np.ndarray:
        n = len(self.basis)
        G = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1):
                val = sum(v * x[s] for s, v in self.entries[i][j].items())
                G[i, j] = G[j, i] = val
        return G

    def quadratic_form(self) -> PolyExpr:
        out: Dict[Monomial, LinForm] = {}
        for i, mi in enumerate(self.basis):
            for j in range(i + 1):
                k = 1.0 if i == j else 2.0
                _lin_add(out.setdefault(mono_mul(mi, self.basis[j]), {}), self.entries[i][j], k)
        return PolyExpr(out)


@dataclass
class Recovery:
    x: np.ndarray
    solution: ConicSolution
    grams: Dict[int, GramCertificate]
    handles: List[GramHandle]

    def value(self, expr: Expr):
        p = PolyExpr.lift(expr).value(self.x)
        return p

    def scalar(self, expr: Expr) -> float:
        return self.value(expr).constant()

    def check(self, handle: GramHandle, tol: float = 1e-6) -> CheckReport:
        p = self.value(handle.expr) if handle.expr is not None else self.grams[handle.index].polynomial()
        return check_sos_certificate(p, self.grams[handle.index], tol)


def parity_signature(m: Monomial, variables: Sequence[Variable]) -> Tuple[int, ...]:
    exps = dict(m)
    return tuple(exps.get(v, 0) % 2 for v in variables)


def parity_blocks(basis: Sequence[Monomial], variables: Sequence[Variable]) -> List[List[int]]:
    """Basis indices grouped by exponent parity in ``variables`` (first-seen order)."""
    if not basis:
        return []
    groups: Dict[Tuple[int, ...], List[int]] = {}
    for i, m in enumerate(basis):
        groups.setdefault(parity_signature(m, variables), []).append(i)
    return list(groups.values())


def prune_basis(basis: Sequence[Monomial], support, symmetry: Sequence[Variable] = ()) -> List[Monomial]:
    """Drop monomials that cannot carry a nonzero Gram row.

    If ``m^2`` is absent from ``support`` and no other pair of kept monomials
    in ``m``'s parity block multiplies to ``m^2``, then ``G[m, m] = 0`` in any
    PSD Gram matrix, hence the whole row vanishes.  Repeats until stable.
    Without this the feasible set sits on a face of the cone and interior
    point methods lose accuracy.
    """
    support = set(support)
    keep = list(basis)
    while True:
        blocks: Dict[Tuple[int, ...], set] = {}
        for m in keep:
            blocks.setdefault(parity_signature(m, symmetry), set()).add(m)
        drop = set()
        for m in keep:
            sq = mono_mul(m, m)
            if sq in support:
                continue
            peers = blocks[parity_signature(m, symmetry)]
            if any(a != m and _mono_div(sq, a) in peers and _mono_div(sq, a) != a for a in peers):
                continue
            drop.add(m)
        if not drop:
            return keep
        keep = [m for m in keep if m not in drop]


def _mono_div(num: Monomial, den: Monomial) -> Optional[Monomial]:
    exps = dict(num)
    for v, e in den:
        if exps.get(v, 0) < e:
            return None
        exps[v] -= e
    return tuple(sorted(((v, e) for v, e in exps.items() if e), key=lambda t: t[0].index))


class SosProgram:
    """Builder for SOS programs.

    Decision scalars are integer slots.  Each slot is ``free`` or ``nonneg``
    or belongs to a cone block (a PSD Gram block or an SOC triple used by
    SDSOS constraints).
    """

    def __init__(self):
        self._n = 0
        self._scalar_kind: Dict[int, str] = {}
        self._blocks: List[Tuple[str, List[int], int]] = []  # (kind, slots, order)
        self._eqs: List[Tuple[PolyExpr, str]] = []
        self._objective: PolyExpr = PolyExpr()
        self.grams: List[GramHandle] = []

    @property
    def num_slots(self) -> int:
        return self._n

    def _alloc(self, count: int) -> List[int]:
        ids = list(range(self._n, self._n + count))
        self._n += count
        return ids

    # decision objects --------------------------------------------------
    def new_scalars(self, count: int, nonneg: bool = False) -> List[PolyExpr]:
        ids = self._alloc(count)
        for s in ids:
            self._scalar_kind[s] = "nonneg" if nonneg else "free"
        return [PolyExpr.slot(s) for s in ids]

    def new_free_polynomial(self, variables: Sequence[Variable], degree: int,
                            even_in: Sequence[Variable] = (), min_degree: int = 0) -> DecisionPolynomial:
        """Free polynomial with monomials of degree ``min_degree..degree``.

        ``even_in`` restricts the basis to monomials with even exponents in
        those variables.
        """
        if degree < 0:
            raise ValueError("degree must be nonnegative")
        basis = [m for m in monomial_basis(variables, degree) if mono_degree(m) >= min_degree]
        if even_in:
            basis = [m for m in basis if not any(parity_signature(m, even_in))]
        ids = self._alloc(len(basis))
        for s in ids:
            self._scalar_kind[s] = "free"
        return DecisionPolynomial(basis, ids)

    def _new_gram(self, basis: List[Monomial], kind: str, name: str,
                  symmetry: Sequence[Variable] = ()) -> GramHandle:
        n = len(basis)
        entries: List[List[LinForm]] = [[{} for _ in range(i + 1)] for i in range(n)]
        if kind not in ("sos", "sdsos"):
            raise ValueError(f"unknown Gram kind {kind!r}")
        for group in parity_blocks(basis, symmetry):
            k = len(group)
            if kind == "sos":
                ids = self._alloc(k * (k + 1) // 2)
                self._blocks.append(("psd", ids, k))
                for a in range(k):
                    for b in range(a + 1):
                        s = ids[svec_index(a, b)]
                        entries[group[a]][group[b]] = {s: 1.0 if a == b else 1.0 / SQRT2}
                continue
            if k == 1:
                (s,) = self._alloc(1)
                self._scalar_kind[s] = "nonneg"
                entries[group[0]][group[0]] = {s: 1.0}
            for a in range(k):
                for b in range(a):
                    i, j = group[a], group[b]
                    # (t, u, v) in SOC  <=>  [[(t+u)/2, v/2], [v/2, (t-u)/2]] PSD
                    t, u, v = self._alloc(3)
                    self._blocks.append(("soc", [t, u, v], 3))
                    _lin_add(entries[i][i], {t: 0.5, u: 0.5})
                    _lin_add(entries[j][j], {t: 0.5, u: -0.5})
                    entries[i][j] = {v: 0.5}
        handle = GramHandle(len(self.grams), kind, list(basis), entries, name=name)
        self.grams.append(handle)
        return handle

    def new_sos_polynomial(
        self, variables: Sequence[Variable], degree: int, kind: str = "sos", name: str = "",
        even_in: Sequence[Variable] = (),
    ) -> Tuple[PolyExpr, GramHandle]:
        """SOS polynomial ``m' G m`` with ``m`` the monomials up to ``degree // 2``.

        With ``even_in`` the Gram matrix is block diagonal over exponent
        parity classes, which makes the polynomial even in those variables.
        """
        basis = monomial_basis(variables, max(degree, 0) // 2)
        handle = self._new_gram(basis, kind, name, even_in)
        poly = handle.quadratic_form()
        handle.expr = poly
        return poly, handle

    # constraints ---------------------------------------------------------
    def add_sos_constraint(self, expr: Expr, kind: str = "sos", name: str = "",
                           symmetry: Sequence[Variable] = (), prune: bool = True) -> GramHandle:
        """Constrain ``expr`` to be SOS (or SDSOS with ``kind="sdsos"``).

        ``symmetry`` names variables in which ``expr`` is even; the Gram
        matrix is then block diagonal by exponent parity in them.  For a
        sign-invariant ``expr`` this loses no generality.  ``prune`` removes
        basis monomials whose Gram rows are forced to zero (see
        ``prune_basis``).
        """
        expr = PolyExpr.lift(expr)
        if symmetry and any(any(parity_signature(m, symmetry)) for m in expr.terms):
            raise ValueError("expression is not even in the declared symmetry variables")
        deg = max(expr.degree(), 0)
        basis = monomial_basis(expr.variables(), math.ceil(deg / 2))
        if prune:
            basis = prune_basis(basis, expr.terms.keys(), symmetry)
        handle = self._new_gram(basis, kind, name, symmetry)
        handle.expr = expr
        handle.padded = deg % 2 == 1
        self._eqs.append((expr - handle.quadratic_form(), name or f"gram{handle.index}"))
        return handle

    def add_sdsos_constraint(self, expr: Expr, name: str = "") -> GramHandle:
        return self.add_sos_constraint(expr, kind="sdsos", name=name)

    def add_linear_eq(self, expr: Expr, name: str = "") -> None:
        """Every coefficient of ``expr`` equals zero."""
        self._eqs.append((PolyExpr.lift(expr), name or "eq"))

    def add_scalar_bounds(self, expr: Expr, lo: Optional[float] = None, hi: Optional[float] = None) -> None:
        """``lo <= expr <= hi`` for a degree-0 expression."""
        expr = PolyExpr.lift(expr)
        expr.scalar()
        if lo is not None and hi is not None and lo == hi:
            self.add_linear_eq(expr - lo, "bound")
            return
        if lo is not None:
            (s,) = self.new_scalars(1, nonneg=True)
            self.add_linear_eq(expr - s - lo, "lower")
        if hi is not None:
            (s,) = self.new_scalars(1, nonneg=True)
            self.add_linear_eq(expr + s - hi, "upper")

    def set_objective(self, expr: Expr) -> None:
        """Minimise a degree-0 expression."""
        expr = PolyExpr.lift(expr)
        expr.scalar()
        self._objective = expr

    # lowering ------------------------------------------------------------
    def _column_map(self) -> Tuple[np.ndarray, List[Cone]]:
        col = np.full(self._n, -1, dtype=int)
        cones: List[Cone] = []
        pos = 0
        for kind in ("free", "nonneg"):
            start = pos
            for s in range(self._n):
                if self._scalar_kind.get(s) == kind:
                    col[s] = pos
                    pos += 1
            if pos > start:
                cones.append(Cone(kind, start, pos - start))
        for kind, ids, order in self._blocks:
            start = pos
            for s in ids:
                col[s] = pos
                pos += 1
            cones.append(Cone(kind, start, len(ids), order if kind == "psd" else 0))
        assert pos == self._n and np.all(col >= 0)
        return col, cones

    def compile(self) -> ConicProblem:
        col, cones = self._column_map()
        rows, cols, vals, rhs = [], [], [], []
        r = 0
        for expr, _ in self._eqs:
            for m in sorted(expr.terms, key=mono_key):
                lin = expr.terms[m]
                entries = sorted((col[s], v) for s, v in lin.items() if s != CONST)
                const = lin.get(CONST, 0.0)
                if not entries and abs(const) <= PRUNE_TOL:
                    continue
                for cidx, v in entries:
                    rows.append(r)
                    cols.append(cidx)
                    vals.append(v)
                rhs.append(-const)
                r += 1
        A = sp.csr_matrix((vals, (rows, cols)), shape=(r, self._n))
        A.sum_duplicates()
        c = np.zeros(self._n)
        obj = self._objective.scalar() if self._objective.terms else {}
        for s, v in obj.items():
            if s != CONST:
                c[col[s]] += v
        self._col = col
        return ConicProblem(self._n, A, np.array(rhs, dtype=float), c, tuple(cones), obj.get(CONST, 0.0))

    def solve(self, settings: Optional[SolverSettings] = None) -> Tuple[ConicProblem, ConicSolution]:
        problem = self.compile()
        return problem, solve(problem, settings)

    def recover(self, solution: ConicSolution, strict: bool = True) -> Recovery:
        """Decision values by slot.  ``strict=False`` also accepts the last
        iterate of an unfinished solve; callers must validate what they use."""
        if solution.x is None or (strict and solution.status is not Status.OPTIMAL):
            raise StatusNotFeasible(solution)
        col, _ = self._column_map()
        x = solution.x[col]
        grams = {h.index: GramCertificate(h.basis, h.matrix(x)) for h in self.grams}
        return Recovery(x=x, solution=solution, grams=grams, handles=list(self.grams))
