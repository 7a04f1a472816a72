"""Bilinear alternation for compatible CLF/CBF synthesis, plus LQR initialization.

Each iteration has two convex steps:

1. fix ``(V, h)`` and search for the compatibility multipliers ``s0..s4`` and
   the safety multipliers ``(p_j, q_j)``;
2. fix ``s0..s3`` and ``q_j`` and search for a new ``(V, h, p_j)`` that covers
   more candidate states, scored by the hinge cost
   ``sum_i c1 max(V(x_i) - 1, 0) + c2 max(-h(x_i), 0)``.

The pair from step 1 is feasible for the step-2 program built from its own
multipliers, so the cost never increases, and every accepted pair is
re-certified by the next step 1.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .certify import (
    CHECK_TOL,
    CompatibilityCertificate,
    MultiplierDegrees,
    SafetyOutcome,
    VerificationOutcome,
    aux_variables,
    compatibility_expression,
    safety_expression,
    verify_compatibility,
    verify_safety,
)
from .conic import SolverSettings, Status
from .polyalg import PolyEvaluator, Polynomial
from .sosprog import SosProgram, check_sos_certificate
from .system import (
    MANIFOLD_TOL,
    CertificatePair,
    ControlAffineSystem,
    UnsafeRegion,
)


MULTIPLIER_CLEAN_TOL = 1e-10
MONOTONE_SLACK = 1e-9


class NotStabilizable(ValueError):
    pass


class RiccatiNoConvergence(RuntimeError):
    pass


class InitNotVerified(RuntimeError):
    def __init__(self, reason: str):
        super().__init__(f"initial pair does not verify: {reason}")
        self.reason = reason


# ---------------------------------------------------------------- LQR init


def linearize(sys: ControlAffineSystem):
    """Jacobians of ``f + g u_eq`` and ``g`` at the origin, and of ``e``."""
    point = sys.point(np.zeros(sys.nx))
    fcl = [sys.f[i] + sum((sys.g[i][j] * float(sys.u_equilibrium[j]) for j in range(sys.nu)),
                          Polynomial()) for i in range(sys.nx)]
    A = np.array([[fi.differentiate(v).evaluate(point) for v in sys.variables] for fi in fcl])
    B = np.array([[gij.evaluate(point) for gij in row] for row in sys.g]).reshape(sys.nx, sys.nu)
    E = np.array([[ek.differentiate(v).evaluate(point) for v in sys.variables] for ek in sys.e])
    return A, B, E.reshape(len(sys.e), sys.nx)


def is_stabilizable(A: np.ndarray, B: np.ndarray, tol: float = 1e-9) -> bool:
    """PBH test on the eigenvalues with nonnegative real part."""
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if lam.real < -tol:
            continue
        M = np.hstack([A - lam * np.eye(n), B.astype(complex)])
        if np.linalg.matrix_rank(M, tol=1e-9 * max(1.0, np.abs(M).max())) < n:
            return False
    return True


def care_residual(A, B, Q, R, P) -> float:
    res = A.T @ P + P @ A - P @ B @ np.linalg.solve(R, B.T) @ P + Q
    return float(np.abs(res).max(initial=0.0))


@dataclass
class LQRResult:
    pair: CertificatePair
    P: np.ndarray  # on the tangent space of {e = 0}
    basis: np.ndarray  # columns span the tangent space
    residual: float


def lqr_initialize(
    sys: ControlAffineSystem,
    Q: Optional[np.ndarray] = None,
    R: Optional[np.ndarray] = None,
    scale: float = 1.0,
    normal_weight: float = 1.0,
    kappa_V=0.1,
    kappa_h=0.1,
    residual_tol: float = 1e-8,
) -> LQRResult:
    """Initial pair ``V = scale x' P x``, ``h = 1 - V`` from the projected LQR.

    The linearization is restricted to the null space ``N`` of ``de/dx(0)``;
    ``P = N P_t N' + normal_weight M M'`` where ``M`` spans the normal
    directions, so ``V`` stays positive definite off the manifold as well.
    ``Q`` and ``R`` act on the tangent coordinates and on the inputs.
    """
    A, B, E = linearize(sys)
    N = sla.null_space(E) if E.shape[0] else np.eye(sys.nx)
    M = sla.orth(E.T) if E.shape[0] else np.zeros((sys.nx, 0))
    At = N.T @ A @ N
    Bt = N.T @ B
    k = N.shape[1]
    Q = np.eye(k) if Q is None else np.asarray(Q, dtype=float)
    R = np.eye(sys.nu) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    if not is_stabilizable(At, Bt):
        raise NotStabilizable("linearization is not stabilizable on the constraint tangent space")
    try:
        Pt = sla.solve_continuous_are(At, Bt, Q, R)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise RiccatiNoConvergence(str(exc)) from exc
    Pt = 0.5 * (Pt + Pt.T)
    residual = care_residual(At, Bt, Q, R, Pt)
    if not np.isfinite(residual) or residual > residual_tol * max(1.0, np.abs(Pt).max()):
        raise RiccatiNoConvergence(f"CARE residual {residual:.3e}")
    P = N @ Pt @ N.T + normal_weight * (M @ M.T)
    X = sys.variables.polys()
    V = Polynomial()
    for i in range(sys.nx):
        for j in range(sys.nx):
            if P[i, j] != 0.0:
                V = V + X[i] * X[j] * float(scale * P[i, j])
    pair = CertificatePair(V, 1.0 - V, kappa_V, kappa_h)
    return LQRResult(pair, Pt, N, residual)


# ------------------------------------------------------------ configuration


@dataclass
class SynthesisConfig:
    candidate_states: np.ndarray
    kappa_V: float = 0.1
    kappa_h: float = 0.1
    c1: float = 1.0
    c2: float = 1.0
    h_lower: float = 0.5
    h_upper: float = 2.0
    max_iter: int = 20
    degrees: MultiplierDegrees = field(default_factory=MultiplierDegrees)
    V_degree: int = 2
    h_degree: int = 2
    pd_epsilon: float = 1e-4
    objective_improvement_tol: float = 1e-4
    # After the optimal update, re-solve for a point whose cost is within
    # backoff_rel * J + backoff_abs of the optimum; it is kept only when its
    # cost does not exceed the previous iterate's.  Interior points keep the
    # next multiplier search well conditioned.  Zero disables it.
    backoff_rel: float = 0.02
    backoff_abs: float = 1e-4
    settings: Optional[SolverSettings] = None
    check_tol: float = CHECK_TOL

    def __post_init__(self):
        self.candidate_states = np.atleast_2d(np.asarray(self.candidate_states, dtype=float))
        if self.kappa_V <= 0 or self.kappa_h <= 0:
            raise ValueError("kappa_V and kappa_h must be positive")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("c1 and c2 must be positive")
        if not 0 < self.h_lower <= self.h_upper:
            raise ValueError("need 0 < h_lower <= h_upper")
        if self.max_iter < 0:
            raise ValueError("max_iter must be nonnegative")
        if self.backoff_rel < 0 or self.backoff_abs < 0:
            raise ValueError("backoff must be nonnegative")

    def validate_candidates(self, sys: ControlAffineSystem) -> None:
        if self.candidate_states.shape[1] != sys.nx:
            raise ValueError("candidate states have the wrong dimension")
        if sys.e:
            drift = np.abs(sys.e_values(self.candidate_states)).max()
            if drift > MANIFOLD_TOL:
                raise ValueError(f"candidate states leave the constraint manifold (|e| = {drift:.2e})")


def _vh_values(sys, V, h, states) -> np.ndarray:
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if not states.size:
        return np.zeros((0, 2))
    return np.atleast_2d(PolyEvaluator([V, h], sys.variables)(states))


def coverage_cost(sys: ControlAffineSystem, V: Polynomial, h: Polynomial, states,
                  c1: float = 1.0, c2: float = 1.0) -> float:
    """Hinge cost of candidate states outside ``{V <= 1} & {h >= 0}``."""
    vals = _vh_values(sys, V, h, states)
    return float(np.sum(c1 * np.maximum(vals[:, 0] - 1.0, 0.0) + c2 * np.maximum(-vals[:, 1], 0.0)))


def covered_count(sys: ControlAffineSystem, V: Polynomial, h: Polynomial, states) -> int:
    vals = _vh_values(sys, V, h, states)
    return int(np.sum((vals[:, 0] <= 1.0) & (vals[:, 1] >= 0.0)))


def _cost(sys, V, h, cfg: SynthesisConfig) -> float:
    return coverage_cost(sys, V, h, cfg.candidate_states, cfg.c1, cfg.c2)


def check_positive_definite(sys: ControlAffineSystem, V: Polynomial, pd_epsilon: float = 1e-4,
                            settings: Optional[SolverSettings] = None, tol: float = CHECK_TOL):
    """SOS certificate for ``V - pd_epsilon |x|^2``; returns a CheckReport or None."""
    sq = sum((v * v for v in sys.variables.polys()), Polynomial())
    target = V - sq * pd_epsilon
    prog = SosProgram()
    g = prog.add_sos_constraint(target, name="V pd")
    _, sol = prog.solve(settings)
    if sol.status is not Status.OPTIMAL:
        return None
    return check_sos_certificate(target, prog.recover(sol).grams[g.index], tol)


# ----------------------------------------------------------------- steps


@dataclass
class LagrangianBundle:
    status: str  # verified | unknown
    compatibility: VerificationOutcome
    safety: Optional[SafetyOutcome]
    reason: str = ""

    @property
    def verified(self) -> bool:
        return self.status == "verified"


def lagrangian_step(sys: ControlAffineSystem, cert: CertificatePair, region: Optional[UnsafeRegion],
                    degrees: Optional[MultiplierDegrees] = None,
                    settings: Optional[SolverSettings] = None,
                    tol: float = CHECK_TOL, clf_only: bool = False) -> LagrangianBundle:
    """Compatibility and safety multipliers for a fixed pair."""
    degrees = degrees or MultiplierDegrees()
    comp = verify_compatibility(sys, cert, degrees, settings, tol, clf_only=clf_only)
    if not comp.verified:
        return LagrangianBundle("unknown", comp, None, f"compatibility: {comp.reason}")
    if region is None or clf_only:
        return LagrangianBundle("verified", comp, None)
    safe = verify_safety(cert.h, region, degrees, settings, tol, list(sys.variables))
    if not safe.verified:
        return LagrangianBundle("unknown", comp, safe, f"safety failed for l_{safe.failed}")
    return LagrangianBundle("verified", comp, safe)


@dataclass
class UpdateResult:
    status: str  # optimal | inexact | failed
    V: Optional[Polynomial] = None
    h: Optional[Polynomial] = None
    p: List[Polynomial] = field(default_factory=list)
    objective: float = math.nan  # hinge cost evaluated on the returned pair
    optimum: float = math.nan  # optimal value of the update program
    reason: str = ""


def _build_update(sys, cert: CertificatePair, mult: CompatibilityCertificate,
                  safety: Optional[SafetyOutcome], region: Optional[UnsafeRegion],
                  cfg: SynthesisConfig, clf_only: bool):
    xs = list(sys.variables)
    y = mult.y
    s0 = [_clean(q) for q in mult.s0]
    s1, s2, s3 = _clean(mult.s1), _clean(mult.s2), _clean(mult.s3)
    prog = SosProgram()
    # V(0) = 0 together with V >= 0 forces a zero gradient at the origin, so
    # constant and linear monomials are left out rather than pinned to zero
    V = prog.new_free_polynomial(xs, cfg.V_degree, min_degree=2)
    sq = sum((v * v for v in sys.variables.polys()), Polynomial())
    prog.add_sos_constraint(V - sq * cfg.pd_epsilon, name="V pd")
    if not clf_only:
        h = prog.new_free_polynomial(xs, cfg.h_degree)
        prog.add_scalar_bounds(h.evaluate({v: 0.0 for v in xs}), cfg.h_lower, cfg.h_upper)
    else:
        h = None
    s4 = [prog.new_free_polynomial(list(xs) + list(y), _deg(m), even_in=list(y)) for m in mult.s4]
    master = compatibility_expression(sys, V, h, cert.kappa_V, cert.kappa_h, y,
                                      s0, s1, s2, s3, s4)
    prog.add_sos_constraint(master, name="master", symmetry=list(y))
    ps = []
    if not clf_only and region is not None:
        for (_, sc, _), group in zip(safety.parts, _groups(region)):
            pj = [prog.new_sos_polynomial(xs, cfg.degrees.p, name="p")[0] for _ in group]
            prog.add_sos_constraint(safety_expression(_clean(sc.q[0]), h, pj, group), name="safety")
            ps.extend(pj)
    slacks = []
    for x in cfg.candidate_states:
        pt = dict(zip(sys.variables, x))
        a, b = prog.new_scalars(2, nonneg=True)
        prog.add_scalar_bounds(a - V.evaluate(pt), lo=-1.0)
        if not clf_only:
            prog.add_scalar_bounds(b + h.evaluate(pt), lo=0.0)
        else:
            prog.add_linear_eq(b, "no h slack")
        slacks.append((a, b))
    cost = sum((a * cfg.c1 + b * cfg.c2 for a, b in slacks), Polynomial()) if slacks else Polynomial()
    return prog, V, h, ps, cost


def _clean(p: Polynomial, rel: float = MULTIPLIER_CLEAN_TOL) -> Polynomial:
    """Zero out solver noise in a fixed multiplier.

    Coefficients the identity forces to vanish come back as +-1e-10 noise;
    left in place they make the update program slightly infeasible.  The
    update's output is re-verified from scratch, so this cannot admit an
    uncertified pair.
    """
    cut = rel * max(p.max_abs_coefficient(), 1.0)
    return Polynomial({m: c for m, c in p.terms.items() if abs(c) > cut})


def _deg(p: Polynomial) -> int:
    return max(p.degree(), 0)


def _groups(region: UnsafeRegion):
    return [[lj] for lj in region.l] if region.mode == "union" else [list(region.l)]


def certificate_step(sys: ControlAffineSystem, cert: CertificatePair, bundle: LagrangianBundle,
                     region: Optional[UnsafeRegion], cfg: SynthesisConfig,
                     previous_cost: Optional[float] = None,
                     clf_only: bool = False) -> UpdateResult:
    """Update ``(V, h, p)`` with ``s0..s3`` and ``q`` fixed.

    With ``clf_only`` only ``V`` moves; ``h`` stays the constant 1 and no
    barrier or safety constraint is imposed.
    """
    mult = bundle.compatibility.certificate

    def attempt(bound: Optional[float]):
        prog, V, h, ps, cost = _build_update(sys, cert, mult, bundle.safety, region, cfg, clf_only)
        if bound is None:
            prog.set_objective(cost)
        else:
            prog.add_scalar_bounds(cost, hi=bound)
        _, sol = prog.solve(cfg.settings)
        if sol.x is None or not np.all(np.isfinite(sol.x)):
            return sol, None
        rec = prog.recover(sol, strict=False)
        Vp = rec.value(V)
        hp = rec.value(h) if not clf_only else Polynomial(1.0)
        return sol, UpdateResult("optimal" if sol.status is Status.OPTIMAL else "inexact", Vp, hp,
                                 [rec.value(pj) for pj in ps], _cost(sys, Vp, hp, cfg),
                                 float(sol.objective), sol.reason)

    def admissible(res: Optional[UpdateResult]) -> bool:
        return res is not None and (previous_cost is None or res.objective <= previous_cost + MONOTONE_SLACK)

    sol, best = attempt(None)
    if sol.status is Status.OPTIMAL and (cfg.backoff_rel > 0 or cfg.backoff_abs > 0):
        bound = sol.objective + cfg.backoff_rel * abs(sol.objective) + cfg.backoff_abs
        _, backed = attempt(bound)
        # keep the interior point only if it is a clean solve that does not undo progress
        if backed is not None and backed.status == "optimal" and admissible(backed):
            backed.optimum = best.optimum
            return backed
    if admissible(best):
        # an inexact iterate is only a candidate; the caller re-verifies it
        return best
    return UpdateResult("failed", reason=f"update solver: {sol.status.value} {sol.reason}".strip())


# ------------------------------------------------------------------ loop


@dataclass
class TraceEntry:
    iteration: int
    pair: CertificatePair
    objective: float
    covered: int
    multipliers: LagrangianBundle
    t_lagrangian_s: float
    t_update_s: float
    status: str = "verified"


@dataclass
class SynthesisTrace:
    entries: List[TraceEntry] = field(default_factory=list)
    reason: str = ""  # why the loop stopped

    @property
    def final(self) -> TraceEntry:
        return self.entries[-1]

    @property
    def objectives(self) -> List[float]:
        return [e.objective for e in self.entries]

    @property
    def covered(self) -> List[int]:
        return [e.covered for e in self.entries]

    def to_csv(self) -> str:
        lines = ["iter,objective,covered,t_lagrangian_s,t_update_s"]
        for e in self.entries:
            lines.append(f"{e.iteration},{e.objective!r},{e.covered},"
                         f"{e.t_lagrangian_s:.6f},{e.t_update_s:.6f}")
        return "\n".join(lines) + "\n"


def synthesize(sys: ControlAffineSystem, region: Optional[UnsafeRegion], init: CertificatePair,
               config: SynthesisConfig, clf_only: bool = False,
               log=None) -> SynthesisTrace:
    """Alternate multiplier search and certificate update.

    ``clf_only`` synthesizes a CLF under the input limits alone; the trace
    pairs then carry ``h = 1`` (every state is safe).
    """
    config.validate_candidates(sys)
    cfg = config
    cert = CertificatePair(init.V, Polynomial(1.0) if clf_only else init.h, init.kappa_V, init.kappa_h)
    active_region = None if clf_only else region
    t0 = time.perf_counter()
    bundle = lagrangian_step(sys, cert, active_region, cfg.degrees, cfg.settings, cfg.check_tol, clf_only)
    t_lag = time.perf_counter() - t0
    if not bundle.verified:
        raise InitNotVerified(bundle.reason)
    trace = SynthesisTrace()
    cost = _cost(sys, cert.V, cert.h, cfg)
    trace.entries.append(TraceEntry(0, cert, cost, covered_count(sys, cert.V, cert.h, cfg.candidate_states),
                                    bundle, t_lag, 0.0))
    trace.reason = "max_iter reached"
    for it in range(1, cfg.max_iter + 1):
        t0 = time.perf_counter()
        upd = certificate_step(sys, cert, bundle, active_region, cfg, previous_cost=cost, clf_only=clf_only)
        t_upd = time.perf_counter() - t0
        if upd.status == "failed":
            trace.reason = f"iteration {it}: {upd.reason}"
            break
        new = CertificatePair(upd.V, upd.h, cert.kappa_V, cert.kappa_h)
        t0 = time.perf_counter()
        new_bundle = lagrangian_step(sys, new, active_region, cfg.degrees, cfg.settings, cfg.check_tol, clf_only)
        t_lag = time.perf_counter() - t0
        if not new_bundle.verified:
            trace.reason = f"iteration {it}: updated pair did not re-verify ({new_bundle.reason})"
            break
        improvement = cost - upd.objective
        cert, bundle, cost = new, new_bundle, upd.objective
        trace.entries.append(TraceEntry(it, cert, cost, covered_count(sys, cert.V, cert.h, cfg.candidate_states),
                                        bundle, t_lag, t_upd))
        if log is not None:
            log(f"iter {it}: objective {cost:.6g} covered {trace.entries[-1].covered}")
        if improvement < cfg.objective_improvement_tol:
            trace.reason = f"objective improvement {improvement:.3g} below tolerance"
            break
    return trace
