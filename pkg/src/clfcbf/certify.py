"""SOS certificates for CLF/CBF compatibility and CBF safety.

Compatibility of ``(V, h)`` is established by emptiness of

    {(x, y) : h(x) >= 0, V(x) <= 1, (y^2)' Lambda(x) = 0, xi(x)' y^2 = -1, e(x) = 0}

via the S-procedure identity

    -1 - s0' ((y^2)' Lambda) - s1 (xi' y^2 + 1) - s2 (1 - V) - s3 h - s4' e  is SOS

with ``s2, s3`` SOS and ``s0, s1, s4`` free.  A failed search proves nothing
(the relaxation is only sufficient), so the outcome is ``unknown``, never
``incompatible``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .conic import SolverSettings, Status, solve
from .polyalg import Polynomial, Variable, VariableSet, variables_of
from .sosprog import (
    CheckReport,
    GramCertificate,
    GramHandle,
    PolyExpr,
    SosProgram,
    check_sos_certificate,
)
from .system import CertificatePair, ControlAffineSystem, Kappa, UnsafeRegion, lie_derivatives

CHECK_TOL = 1e-6


class DegreeParityError(ValueError):
    pass


@dataclass
class MultiplierDegrees:
    """Multiplier degrees; ``None`` for ``s4`` picks the largest useful degree."""

    s0: int = 2
    s1: int = 2
    s2: int = 4
    s3: int = 4
    s4: Optional[int] = None
    p: int = 0
    q: int = 0
    s2_kind: str = "sos"  # or "sdsos"
    s3_kind: str = "sos"

    def __post_init__(self):
        for name in ("s0", "s1", "s2", "s3", "p", "q"):
            if getattr(self, name) < 0:
                raise ValueError(f"degree {name} must be nonnegative")
        if self.s4 is not None and self.s4 < 0:
            raise ValueError("degree s4 must be nonnegative")


def lambda_xi(sys: ControlAffineSystem, V, h, kappa_V: Kappa, kappa_h: Kappa):
    """Lambda rows and xi entries for polynomial or decision ``V``/``h``.

    ``h=None`` drops the barrier row (CLF under input limits only).
    """
    LfV, LgV = lie_derivatives(sys, V)
    Lam = [list(LgV)]
    xi = [kappa_V(V) * -1.0 - LfV]
    if h is not None:
        Lfh, Lgh = lie_derivatives(sys, h)
        Lam.append([q * -1.0 for q in Lgh])
        xi.append(kappa_h(h) + Lfh)
    for i in range(sys.p):
        Lam.append([Polynomial(float(a)) for a in sys.A[i]])
        xi.append(Polynomial(float(sys.c[i])))
    return Lam, xi


def weighted_rows(Lam, xi, y: VariableSet):
    """``[(y^2)' Lambda_i]_i`` and ``xi' y^2 + 1``."""
    y2 = [yp * yp for yp in y.polys()]
    nu = len(Lam[0])
    cols = [sum((Lam[j][i] * y2[j] for j in range(len(y2))), PolyExpr()) for i in range(nu)]
    xi_y = sum((xi[j] * y2[j] for j in range(len(y2))), PolyExpr()) + 1.0
    return cols, xi_y


def _simplify(e):
    return e.to_polynomial() if isinstance(e, PolyExpr) and e.is_constant() else e


def compatibility_expression(sys, V, h, kappa_V, kappa_h, y, s0, s1, s2, s3, s4):
    """Left side of the compatibility SOS identity (polynomial or decision)."""
    Lam, xi = lambda_xi(sys, V, h, kappa_V, kappa_h)
    cols, xi_y = weighted_rows(Lam, xi, y)
    cols = [_simplify(c) for c in cols]
    xi_y = _simplify(xi_y)
    total = PolyExpr.lift(-1.0)
    for s0_i, col in zip(s0, cols):
        total = total - s0_i * col
    total = total - s1 * xi_y
    total = total - s2 * (1.0 - V)
    if h is not None:
        total = total - s3 * h
    for s4_k, e_k in zip(s4, sys.e):
        total = total - s4_k * e_k
    return _simplify(total)


def _deg(p) -> int:
    return max(p.degree(), 0)


def auto_s4_degrees(sys, V, h, y, degrees: MultiplierDegrees) -> List[int]:
    """Degree bound for each equality multiplier: master degree minus deg(e_k)."""
    if degrees.s4 is not None:
        return [degrees.s4] * len(sys.e)
    Lam, xi = lambda_xi(sys, V, h, Kappa(1.0), Kappa(1.0))
    cols, xi_y = weighted_rows(Lam, xi, y)
    master = max(
        [degrees.s0 + _deg(c) for c in cols]
        + [degrees.s1 + _deg(xi_y), degrees.s2 + _deg(1.0 - V)]
        + ([degrees.s3 + _deg(h)] if h is not None else [])
    )
    if master % 2:
        master += 1
    return [max(master - _deg(e), 0) for e in sys.e]


@dataclass
class CompatibilityCertificate:
    y: VariableSet
    s0: List[Polynomial]
    s1: Polynomial
    s2: Polynomial
    s3: Polynomial
    s4: List[Polynomial]
    grams: Dict[str, GramCertificate]
    checks: Dict[str, CheckReport] = field(default_factory=dict)
    clf_only: bool = False

    def master_polynomial(self, sys: ControlAffineSystem, cert: CertificatePair) -> Polynomial:
        """Recompute the identity's left side from the recovered multipliers."""
        return compatibility_expression(
            sys, cert.V, None if self.clf_only else cert.h, cert.kappa_V, cert.kappa_h, self.y,
            self.s0, self.s1, self.s2, self.s3, self.s4,
        )

    def identity_check(self, sys, cert, tol: float = CHECK_TOL) -> CheckReport:
        return check_sos_certificate(self.master_polynomial(sys, cert), self.grams["master"], tol)


@dataclass
class VerificationOutcome:
    status: str  # verified | unknown
    certificate: Optional[CompatibilityCertificate] = None
    reason: str = ""
    parity_padded: bool = False
    timings: Dict[str, float] = field(default_factory=dict)
    size: Dict[str, int] = field(default_factory=dict)

    @property
    def verified(self) -> bool:
        return self.status == "verified"


def aux_variables(sys: ControlAffineSystem, clf_only: bool = False) -> VariableSet:
    return sys.variables.fresh("y", sys.p + (1 if clf_only else 2))


def _problem_size(problem) -> Dict[str, int]:
    psd = [c.order for c in problem.cones if c.kind == "psd"]
    return {"variables": problem.n, "equalities": int(problem.b.shape[0]),
            "psd_blocks": len(psd), "largest_psd": max(psd, default=0)}


@dataclass
class CompatibilityProgram:
    prog: SosProgram
    y: VariableSet
    s0: List[PolyExpr]
    s1: PolyExpr
    s2: PolyExpr
    s3: Union[PolyExpr, Polynomial]
    s4: List[PolyExpr]
    g2: GramHandle
    g3: Optional[GramHandle]  # None without the barrier row
    gm: GramHandle


def build_compatibility_program(sys: ControlAffineSystem, cert: CertificatePair,
                                degrees: Optional[MultiplierDegrees] = None, use_symmetry: bool = True,
                                clf_only: bool = False) -> CompatibilityProgram:
    """The multiplier search as an unsolved SOS program."""
    degrees = degrees or MultiplierDegrees()
    y = aux_variables(sys, clf_only)
    h = None if clf_only else cert.h
    xy = list(sys.variables) + list(y)
    sym = list(y) if use_symmetry else []
    prog = SosProgram()
    s0 = [prog.new_free_polynomial(xy, degrees.s0, even_in=sym) for _ in range(sys.nu)]
    s1 = prog.new_free_polynomial(xy, degrees.s1, even_in=sym)
    s2, g2 = prog.new_sos_polynomial(xy, degrees.s2, kind=degrees.s2_kind, name="s2", even_in=sym)
    if h is not None:
        s3, g3 = prog.new_sos_polynomial(xy, degrees.s3, kind=degrees.s3_kind, name="s3", even_in=sym)
    else:
        s3, g3 = Polynomial(), None
    s4 = [prog.new_free_polynomial(xy, d, even_in=sym)
          for d in auto_s4_degrees(sys, cert.V, h, y, degrees)]
    master = compatibility_expression(
        sys, cert.V, h, cert.kappa_V, cert.kappa_h, y, s0, s1, s2, s3, s4
    )
    gm = prog.add_sos_constraint(master, name="master", symmetry=sym)
    return CompatibilityProgram(prog, y, s0, s1, s2, s3, s4, g2, g3, gm)


def verify_compatibility(
    sys: ControlAffineSystem,
    cert: CertificatePair,
    degrees: Optional[MultiplierDegrees] = None,
    settings: Optional[SolverSettings] = None,
    tol: float = CHECK_TOL,
    strict_parity: bool = False,
    use_symmetry: bool = True,
    clf_only: bool = False,
) -> VerificationOutcome:
    """Search for compatibility multipliers at fixed degrees.

    ``y`` enters only through ``y^2``, so the identity is invariant under
    flipping the sign of any ``y_j``.  With ``use_symmetry`` the multipliers
    are restricted to be even in ``y`` and the Gram matrices are split by
    ``y``-parity; averaging any certificate over the sign flips shows this
    restriction loses nothing.

    ``clf_only`` ignores ``cert.h`` and certifies ``V`` alone under the input
    limits (the barrier row and the ``s3`` term are dropped).
    """
    degrees = degrees or MultiplierDegrees()
    t0 = time.perf_counter()
    bp = build_compatibility_program(sys, cert, degrees, use_symmetry, clf_only)
    prog, gm, g3 = bp.prog, bp.gm, bp.g3
    padded = gm.padded
    if padded and strict_parity:
        raise DegreeParityError(f"compatibility identity has odd degree {gm.expr.degree()}")
    problem = prog.compile()
    t1 = time.perf_counter()
    sol = solve(problem, settings)
    t2 = time.perf_counter()
    timings = {"build_s": t1 - t0, "solve_s": t2 - t1}
    size = _problem_size(problem)
    if sol.status is not Status.OPTIMAL:
        return VerificationOutcome("unknown", reason=f"solver: {sol.status.value} {sol.reason}".strip(),
                                   parity_padded=padded, timings=timings, size=size)
    rec = prog.recover(sol)
    certificate = CompatibilityCertificate(
        y=bp.y,
        s0=[rec.value(s) for s in bp.s0],
        s1=rec.value(bp.s1),
        s2=rec.value(bp.s2),
        s3=rec.value(bp.s3),
        s4=[rec.value(s) for s in bp.s4],
        grams={"master": rec.grams[gm.index], "s2": rec.grams[bp.g2.index]},
        clf_only=clf_only,
    )
    certificate.checks = {
        "master": certificate.identity_check(sys, cert, tol),
        "s2": check_sos_certificate(certificate.s2, certificate.grams["s2"], tol),
    }
    if g3 is not None:
        certificate.grams["s3"] = rec.grams[g3.index]
        certificate.checks["s3"] = check_sos_certificate(certificate.s3, certificate.grams["s3"], tol)
    timings["check_s"] = time.perf_counter() - t2
    failed = [k for k, r in certificate.checks.items() if not r.passed]
    if failed:
        return VerificationOutcome("unknown", certificate, reason=f"certificate check failed: {failed}",
                                   parity_padded=padded, timings=timings, size=size)
    return VerificationOutcome("verified", certificate, parity_padded=padded, timings=timings, size=size)


# ------------------------------------------------------------------ safety


@dataclass
class SafetyCertificate:
    q: List[Polynomial]
    p: List[Polynomial]
    grams: Dict[str, GramCertificate]
    checks: Dict[str, CheckReport]


@dataclass
class SafetyOutcome:
    status: str  # verified | unknown
    parts: List[Tuple[str, Optional[SafetyCertificate], str]] = field(default_factory=list)

    @property
    def verified(self) -> bool:
        return self.status == "verified"

    @property
    def failed(self) -> List[int]:
        return [j for j, (st, _, _) in enumerate(self.parts) if st != "verified"]

    @property
    def q(self) -> List[Polynomial]:
        return [qq for _, c, _ in self.parts for qq in c.q]

    @property
    def p(self) -> List[Polynomial]:
        return [pp for _, c, _ in self.parts for pp in c.p]


def safety_expression(q, h, p: Sequence, ls: Sequence[Polynomial]):
    """``-1 - q h + sum_j p_j l_j``."""
    total = PolyExpr.lift(-1.0) - q * h
    for pj, lj in zip(p, ls):
        total = total + pj * lj
    return _simplify(total)


def build_safety_program(h, ls: Sequence[Polynomial], degrees: MultiplierDegrees,
                         variables: Optional[Sequence[Variable]] = None):
    """One S-procedure program with a single ``q`` and one ``p_j`` per ``l_j``."""
    variables = list(variables) if variables is not None else variables_of([h, *ls])
    prog = SosProgram()
    q, gq = prog.new_sos_polynomial(variables, degrees.q, name="q")
    ps = [prog.new_sos_polynomial(variables, degrees.p, name=f"p{j}") for j in range(len(ls))]
    expr = safety_expression(q, h, [pj for pj, _ in ps], ls)
    gm = prog.add_sos_constraint(expr, name="safety")
    return prog, q, gq, ps, gm


def _solve_safety(h, ls, degrees, settings, tol, variables) -> Tuple[str, Optional[SafetyCertificate], str]:
    prog, q, gq, ps, gm = build_safety_program(h, ls, degrees, variables)
    _, sol = prog.solve(settings)
    if sol.status is not Status.OPTIMAL:
        return "unknown", None, f"solver: {sol.status.value} {sol.reason}".strip()
    rec = prog.recover(sol)
    qv = rec.value(q)
    pv = [rec.value(pj) for pj, _ in ps]
    master = safety_expression(qv, h, pv, ls)
    grams = {"q": rec.grams[gq.index], "safety": rec.grams[gm.index]}
    checks = {"q": check_sos_certificate(qv, grams["q"], tol),
              "safety": check_sos_certificate(master, grams["safety"], tol)}
    for j, (pj, gj) in enumerate(ps):
        grams[f"p{j}"] = rec.grams[gj.index]
        checks[f"p{j}"] = check_sos_certificate(pv[j], grams[f"p{j}"], tol)
    cert = SafetyCertificate([qv], pv, grams, checks)
    failed = [k for k, r in checks.items() if not r.passed]
    if failed:
        return "unknown", cert, f"certificate check failed: {failed}"
    return "verified", cert, ""


def verify_safety_union(h: Polynomial, region: UnsafeRegion, degrees: Optional[MultiplierDegrees] = None,
                        settings: Optional[SolverSettings] = None, tol: float = CHECK_TOL,
                        variables: Optional[Sequence[Variable]] = None) -> SafetyOutcome:
    """``{h >= 0}`` avoids every ``{l_j <= 0}``; one program per ``j``."""
    if region.mode != "union":
        raise ValueError("verify_safety_union needs a union region")
    degrees = degrees or MultiplierDegrees()
    parts = [_solve_safety(h, [lj], degrees, settings, tol, variables) for lj in region.l]
    status = "verified" if all(st == "verified" for st, _, _ in parts) else "unknown"
    return SafetyOutcome(status, parts)


def verify_safety_intersection(h: Polynomial, region: UnsafeRegion, degrees: Optional[MultiplierDegrees] = None,
                               settings: Optional[SolverSettings] = None, tol: float = CHECK_TOL,
                               variables: Optional[Sequence[Variable]] = None) -> SafetyOutcome:
    """``{h >= 0}`` avoids ``{all l_j <= 0}``; a single program with shared ``q``."""
    if region.mode != "intersection":
        raise ValueError("verify_safety_intersection needs an intersection region")
    degrees = degrees or MultiplierDegrees()
    part = _solve_safety(h, list(region.l), degrees, settings, tol, variables)
    return SafetyOutcome(part[0], [part])


def verify_safety(h, region: UnsafeRegion, degrees=None, settings=None, tol=CHECK_TOL, variables=None):
    fn = verify_safety_union if region.mode == "union" else verify_safety_intersection
    return fn(h, region, degrees, settings, tol, variables)
