"""Sparse multivariate polynomials with float coefficients.

A monomial is a tuple of ``(Variable, exponent)`` pairs sorted by variable
index, with no zero exponents.  A :class:`Polynomial` maps monomials to
coefficients; coefficients with magnitude at most :data:`PRUNE_TOL` are
dropped on construction, so the zero polynomial has no terms.

Text grammar accepted by :func:`parse_polynomial`::

    expr   := term { ("+" | "-") term }
    term   := unary { "*" unary }
    unary  := ("+" | "-") unary | power
    power  := atom [ "^" INTEGER ]
    atom   := NUMBER | IDENTIFIER | "(" expr ")"
"""

from __future__ import annotations

import itertools
import math
import re
from typing import Dict, Iterable, Iterator, List, Mapping, NamedTuple, Sequence, Tuple, Union

import numpy as np

PRUNE_TOL = 1e-12


class Variable(NamedTuple):
    """An indeterminate.  Ordering and identity follow ``index`` first."""

    index: int
    name: str

    def __str__(self) -> str:
        return self.name

    def __repr__(self) -> str:
        return f"Variable({self.index}, {self.name!r})"


Monomial = Tuple[Tuple[Variable, int], ...]
ONE: Monomial = ()


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownVariableError(ParseError):
    def __init__(self, name: str, offset: int):
        super().__init__(f"unknown variable {name!r}", offset)
        self.name = name


class UnboundVariableError(KeyError):
    pass


class VariableSet(Sequence[Variable]):
    """Ordered, name-unique collection of variables.

    Indices are assigned in declaration order starting at ``start``.
    """

    def __init__(self, names: Iterable[str], start: int = 0):
        self._vars = tuple(Variable(start + i, n) for i, n in enumerate(names))
        self._by_name = {v.name: v for v in self._vars}
        if len(self._by_name) != len(self._vars):
            raise ValueError("duplicate variable names")
        for v in self._vars:
            if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", v.name):
                raise ValueError(f"invalid variable name {v.name!r}")

    @classmethod
    def from_variables(cls, variables: Iterable[Variable]) -> "VariableSet":
        out = cls.__new__(cls)
        out._vars = tuple(sorted(set(variables)))
        out._by_name = {v.name: v for v in out._vars}
        if len(out._by_name) != len(out._vars):
            raise ValueError("duplicate variable names")
        return out

    def fresh(self, prefix: str, count: int) -> "VariableSet":
        """Variables disjoint from this set, indexed after its last member."""
        start = (max(v.index for v in self._vars) + 1) if self._vars else 0
        taken = set(self._by_name)
        names = []
        for i in range(count):
            name = f"{prefix}{i + 1}"
            while name in taken:
                name = "_" + name
            names.append(name)
        return VariableSet(names, start=start)

    def __add__(self, other: "VariableSet") -> "VariableSet":
        return VariableSet.from_variables(list(self._vars) + list(other._vars))

    def __getitem__(self, i):
        return self._vars[i]

    def __len__(self) -> int:
        return len(self._vars)

    def __iter__(self) -> Iterator[Variable]:
        return iter(self._vars)

    def __contains__(self, v) -> bool:
        if isinstance(v, str):
            return v in self._by_name
        return v in self._by_name.values()

    def __eq__(self, other) -> bool:
        return isinstance(other, VariableSet) and self._vars == other._vars

    def __hash__(self) -> int:
        return hash(self._vars)

    def __repr__(self) -> str:
        return f"VariableSet({[v.name for v in self._vars]})"

    def by_name(self, name: str) -> Variable:
        return self._by_name[name]

    @property
    def names(self) -> List[str]:
        return [v.name for v in self._vars]

    def polys(self) -> List["Polynomial"]:
        return [Polynomial.from_variable(v) for v in self._vars]


# ---------------------------------------------------------------- monomials


def mono_mul(a: Monomial, b: Monomial) -> Monomial:
    if not a:
        return b
    if not b:
        return a
    out = []
    i = j = 0
    na, nb = len(a), len(b)
    while i < na and j < nb:
        va, ea = a[i]
        vb, eb = b[j]
        if va.index == vb.index:
            out.append((va, ea + eb))
            i += 1
            j += 1
        elif va.index < vb.index:
            out.append(a[i])
            i += 1
        else:
            out.append(b[j])
            j += 1
    out.extend(a[i:])
    out.extend(b[j:])
    return tuple(out)


def mono_degree(m: Monomial) -> int:
    return sum(e for _, e in m)


def mono_key(m: Monomial):
    """Sort key realising graded-lex order (lower variable index dominates)."""
    return (mono_degree(m), tuple((v.index, -e) for v, e in m))


def mono_from_exponents(variables: Sequence[Variable], exps: Sequence[int]) -> Monomial:
    return tuple((v, int(e)) for v, e in sorted(zip(variables, exps)) if e)


def mono_str(m: Monomial) -> str:
    return "*".join(v.name if e == 1 else f"{v.name}^{e}" for v, e in m)


def monomial_basis(variables: Sequence[Variable], max_degree: int) -> List[Monomial]:
    """All monomials in ``variables`` of total degree <= ``max_degree``, graded-lex."""
    if max_degree < 0:
        raise ValueError("max_degree must be nonnegative")
    variables = sorted(set(variables))
    basis: List[Monomial] = []
    for d in range(max_degree + 1):
        # combinations_with_replacement yields graded-lex order within degree d
        for combo in itertools.combinations_with_replacement(range(len(variables)), d):
            counts: Dict[int, int] = {}
            for k in combo:
                counts[k] = counts.get(k, 0) + 1
            basis.append(tuple((variables[k], counts[k]) for k in sorted(counts)))
    return basis


# -------------------------------------------------------------- polynomials

Number = Union[int, float]


class Polynomial:
    """Immutable sparse polynomial."""

    __slots__ = ("_terms",)

    def __init__(self, terms: Union[Mapping[Monomial, float], Number, None] = None):
        if terms is None:
            self._terms: Dict[Monomial, float] = {}
        elif isinstance(terms, (int, float, np.floating, np.integer)):
            c = float(terms)
            self._terms = {ONE: c} if abs(c) > PRUNE_TOL else {}
        else:
            self._terms = {m: float(c) for m, c in terms.items() if abs(c) > PRUNE_TOL}

    @classmethod
    def _raw(cls, terms: Dict[Monomial, float]) -> "Polynomial":
        p = cls.__new__(cls)
        p._terms = {m: c for m, c in terms.items() if abs(c) > PRUNE_TOL}
        return p

    @classmethod
    def from_variable(cls, v: Variable) -> "Polynomial":
        return cls._raw({((v, 1),): 1.0})

    @classmethod
    def monomial(cls, m: Monomial, coef: float = 1.0) -> "Polynomial":
        return cls._raw({m: coef})

    # structure -----------------------------------------------------------
    @property
    def terms(self) -> Mapping[Monomial, float]:
        return self._terms

    def sorted_terms(self) -> List[Tuple[Monomial, float]]:
        return sorted(self._terms.items(), key=lambda t: mono_key(t[0]))

    def degree(self) -> int:
        """Total degree; the zero polynomial has degree -1."""
        return max((mono_degree(m) for m in self._terms), default=-1)

    def variables(self) -> List[Variable]:
        return sorted({v for m in self._terms for v, _ in m})

    def is_zero(self) -> bool:
        return not self._terms

    def constant(self) -> float:
        return self._terms.get(ONE, 0.0)

    def coefficient(self, m: Monomial) -> float:
        return self._terms.get(m, 0.0)

    def max_abs_coefficient(self) -> float:
        return max((abs(c) for c in self._terms.values()), default=0.0)

    # arithmetic ----------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial(other)
        if not isinstance(other, Polynomial):
            return NotImplemented
        out = dict(self._terms)
        for m, c in other._terms.items():
            out[m] = out.get(m, 0.0) + c
        return Polynomial._raw(out)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial._raw({m: -c for m, c in self._terms.items()})

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial(other)
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            k = float(other)
            return Polynomial._raw({m: c * k for m, c in self._terms.items()})
        if not isinstance(other, Polynomial):
            return NotImplemented
        out: Dict[Monomial, float] = {}
        for m1, c1 in self._terms.items():
            for m2, c2 in other._terms.items():
                m = mono_mul(m1, m2)
                out[m] = out.get(m, 0.0) + c1 * c2
        return Polynomial._raw(out)

    __rmul__ = __mul__

    def __truediv__(self, k):
        return self * (1.0 / float(k))

    def __pow__(self, n: int):
        if not isinstance(n, int) or n < 0:
            raise ValueError("exponent must be a nonnegative integer")
        result = Polynomial(1.0)
        base = self
        while n:
            if n & 1:
                result = result * base
            base = base * base
            n >>= 1
        return result

    def scale(self, k: float) -> "Polynomial":
        return self * k

    def differentiate(self, v: Variable) -> "Polynomial":
        out: Dict[Monomial, float] = {}
        for m, c in self._terms.items():
            for k, (w, e) in enumerate(m):
                if w == v:
                    if e == 1:
                        dm = m[:k] + m[k + 1:]
                    else:
                        dm = m[:k] + ((w, e - 1),) + m[k + 1:]
                    out[dm] = out.get(dm, 0.0) + c * e
                    break
        return Polynomial._raw(out)

    def substitute(self, mapping: Mapping[Variable, "Polynomial"]) -> "Polynomial":
        """Replace variables by polynomials."""
        result = Polynomial()
        for m, c in self._terms.items():
            term = Polynomial(c)
            for v, e in m:
                factor = mapping.get(v)
                term = term * (factor ** e if factor is not None else Polynomial.monomial(((v, e),)))
            result = result + term
        return result

    # evaluation ----------------------------------------------------------
    def evaluate(self, point: Mapping) -> float:
        """Evaluate at ``point``, a mapping from Variable (or name) to float."""
        total = 0.0
        for m, c in self.sorted_terms():
            val = c
            for v, e in m:
                if v in point:
                    x = point[v]
                elif v.name in point:
                    x = point[v.name]
                else:
                    raise UnboundVariableError(v.name)
                val *= float(x) ** e
            total += val
        return total

    def __call__(self, point: Mapping) -> float:
        return self.evaluate(point)

    # comparison & printing ------------------------------------------------
    def __eq__(self, other) -> bool:
        if isinstance(other, (int, float)):
            other = Polynomial(other)
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self._terms == other._terms

    def __hash__(self):
        return hash(frozenset(self._terms.items()))

    def allclose(self, other: "Polynomial", tol: float = 1e-9) -> bool:
        return (self - other).max_abs_coefficient() <= tol

    def to_string(self) -> str:
        if not self._terms:
            return "0"
        parts = []
        for k, (m, c) in enumerate(self.sorted_terms()):
            sign = "-" if c < 0 else "+"
            mag = repr(abs(c))
            body = mag if not m else (mono_str(m) if abs(c) == 1.0 else f"{mag}*{mono_str(m)}")
            if k == 0:
                parts.append(("-" if c < 0 else "") + body)
            else:
                parts.append(f" {sign} {body}")
        return "".join(parts)

    def __str__(self) -> str:
        return self.to_string()

    def __repr__(self) -> str:
        return f"Polynomial({self.to_string()!r})"


def variables_of(polys: Iterable) -> List[Variable]:
    return sorted({v for p in polys for v in p.variables()})


# ------------------------------------------------------------------ parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<id>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*^()]))"
)


def _tokenize(text: str):
    pos = 0
    tokens = []
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text):
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ParseError(f"unexpected character {text[pos]!r}", len(text[:pos].encode()))
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), len(text[:start].encode())))
        pos = m.end()
    tokens.append(("end", "", len(text.encode())))
    return tokens


class _Parser:
    def __init__(self, text: str, variables: VariableSet):
        self.tokens = _tokenize(text)
        self.k = 0
        self.variables = variables

    def peek(self):
        return self.tokens[self.k]

    def take(self):
        tok = self.tokens[self.k]
        self.k += 1
        return tok

    def expect_op(self, op):
        kind, val, off = self.take()
        if kind != "op" or val != op:
            raise ParseError(f"expected {op!r}", off)

    def expr(self) -> Polynomial:
        result = self.term()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.take()
                rhs = self.term()
                result = result + rhs if val == "+" else result - rhs
            else:
                return result

    def term(self) -> Polynomial:
        result = self.unary()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val == "*":
                self.take()
                result = result * self.unary()
            else:
                return result

    def unary(self) -> Polynomial:
        kind, val, _ = self.peek()
        if kind == "op" and val in "+-":
            self.take()
            inner = self.unary()
            return -inner if val == "-" else inner
        return self.power()

    def power(self) -> Polynomial:
        base = self.atom()
        kind, val, _ = self.peek()
        if kind == "op" and val == "^":
            self.take()
            kind, val, off = self.take()
            if kind != "num" or not val.isdigit():
                raise ParseError("exponent must be a nonnegative integer literal", off)
            return base ** int(val)
        return base

    def atom(self) -> Polynomial:
        kind, val, off = self.take()
        if kind == "num":
            return Polynomial(float(val))
        if kind == "id":
            if val not in self.variables:
                raise UnknownVariableError(val, off)
            return Polynomial.from_variable(self.variables.by_name(val))
        if kind == "op" and val == "(":
            inner = self.expr()
            self.expect_op(")")
            return inner
        raise ParseError("unexpected end of input" if kind == "end" else f"unexpected token {val!r}", off)


def parse_polynomial(text: str, variables: VariableSet) -> Polynomial:
    parser = _Parser(text, variables)
    result = parser.expr()
    kind, val, off = parser.peek()
    if kind != "end":
        raise ParseError(f"unexpected token {val!r}", off)
    return result


# ------------------------------------------------------------ fast numerics


class PolyEvaluator:
    """Vectorised evaluation of a list of polynomials over fixed variables.

    ``__call__`` accepts a single point of shape ``(n,)`` or a batch of shape
    ``(N, n)`` and returns values of shape ``(k,)`` or ``(N, k)``.
    """

    def __init__(self, polys: Sequence[Polynomial], variables: Sequence[Variable]):
        self.variables = list(variables)
        col = {v: i for i, v in enumerate(self.variables)}
        monos: Dict[Monomial, int] = {}
        rows, cols, vals = [], [], []
        for k, p in enumerate(polys):
            for m, c in p.sorted_terms():
                for v, _ in m:
                    if v not in col:
                        raise UnboundVariableError(v.name)
                j = monos.setdefault(m, len(monos))
                rows.append(j)
                cols.append(k)
                vals.append(c)
        self.n_out = len(polys)
        self.exponents = np.zeros((len(monos), len(self.variables)), dtype=np.int64)
        for m, j in monos.items():
            for v, e in m:
                self.exponents[j, col[v]] = e
        self.coef = np.zeros((len(monos), self.n_out))
        np.add.at(self.coef, (np.array(rows, dtype=int), np.array(cols, dtype=int)), vals)
        self.max_exp = int(self.exponents.max()) if self.exponents.size else 0

    def _monomials(self, X: np.ndarray) -> np.ndarray:
        # powers table: (N, n, max_exp+1)
        N, n = X.shape
        pw = np.ones((N, n, self.max_exp + 1))
        for e in range(1, self.max_exp + 1):
            pw[:, :, e] = pw[:, :, e - 1] * X
        out = np.ones((N, self.exponents.shape[0]))
        for i in range(n):
            out *= pw[:, i, self.exponents[:, i]]
        return out

    def __call__(self, x) -> np.ndarray:
        X = np.asarray(x, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if self.exponents.shape[0] == 0:
            res = np.zeros((X.shape[0], self.n_out))
        else:
            # fixed-order accumulation: a point's value does not depend on the
            # batch it is evaluated in (a BLAS matmul gives no such guarantee)
            M = self._monomials(X)
            res = np.zeros((X.shape[0], self.n_out))
            for j in range(M.shape[1]):
                res += M[:, j, None] * self.coef[j]
        return res[0] if single else res


def binomial_count(n: int, d: int) -> int:
    return math.comb(n + d, d)
