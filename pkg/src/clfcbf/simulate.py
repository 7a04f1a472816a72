"""CLF-CBF-QP controller and fixed-step closed-loop simulation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.sparse as sp

from .conic import Cone, ConicProblem, SolverSettings, Status, check_witness, solve, solve_lp
from .system import REGION_TOL, CertificatePair, ControlAffineSystem, PointwiseChecker

QP_TOL = 1e-8


class PreconditionError(ValueError):
    pass


@dataclass
class QPResult:
    status: str  # feasible | infeasible | unknown
    u: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None  # Farkas vector when infeasible
    reason: str = ""

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"


def min_norm_problem(Lam: np.ndarray, xi: np.ndarray) -> ConicProblem:
    """``min t  s.t.  Lam u + s = xi, s >= 0, |u| <= t`` in the conic layout
    ``[s (nonneg), t, u (soc)]``."""
    m, nu = Lam.shape
    A = sp.hstack([sp.identity(m, format="csr"), sp.csr_matrix((m, 1)), sp.csr_matrix(Lam)]).tocsr()
    c = np.zeros(m + 1 + nu)
    c[m] = 1.0
    cones = []
    if m:
        cones.append(Cone("nonneg", 0, m))
    cones.append(Cone("soc", m, 1 + nu))
    return ConicProblem(m + 1 + nu, A, np.asarray(xi, dtype=float), c, tuple(cones))


def _polish(Lam: np.ndarray, xi: np.ndarray, u: np.ndarray, tol: float) -> Optional[np.ndarray]:
    """Least-norm point on the nearly active rows, if it satisfies every row."""
    slack = xi - Lam @ u
    active = slack <= 1e-6 * (1.0 + np.abs(xi))
    if not active.any():
        return None
    La, xa = Lam[active], xi[active]
    v = La.T @ np.linalg.lstsq(La @ La.T, xa, rcond=None)[0]
    return v if check_witness(Lam, xi, v, tol) else None


def solve_clf_cbf_qp(Lam: np.ndarray, xi: np.ndarray, settings: Optional[SolverSettings] = None,
                     tol: float = QP_TOL) -> QPResult:
    """Minimum-norm ``u`` with ``Lam u <= xi``; Farkas vector if none exists."""
    Lam = np.atleast_2d(np.asarray(Lam, dtype=float))
    xi = np.asarray(xi, dtype=float).ravel()
    m, nu = Lam.shape
    sol = solve(min_norm_problem(Lam, xi), settings)
    if sol.status is Status.OPTIMAL:
        u = sol.x[m + 1:]
        if check_witness(Lam, xi, u, tol):
            return QPResult("feasible", u=u)
        u = _polish(Lam, xi, u, tol)
        if u is not None:
            return QPResult("feasible", u=u)
        # interior-point accuracy is relative; shrink the rows and retry
        margin = 10 * tol * (1.0 + np.abs(xi))
        tight = solve(min_norm_problem(Lam, xi - margin), settings)
        if tight.status is Status.OPTIMAL and check_witness(Lam, xi, tight.x[m + 1:], tol):
            return QPResult("feasible", u=tight.x[m + 1:])
    # classify through the LP oracle, which returns a verified certificate
    lp = solve_lp(Lam, xi, settings)
    if lp.infeasible:
        return QPResult("infeasible", z=lp.z)
    if sol.status is Status.OPTIMAL:
        return QPResult("unknown", u=sol.x[m + 1:], reason="QP solution violates the rows")
    return QPResult("unknown", reason=lp.reason or sol.reason)


def clf_cbf_qp(sys: ControlAffineSystem, cert: CertificatePair, x,
               settings: Optional[SolverSettings] = None,
               checker: Optional[PointwiseChecker] = None) -> QPResult:
    """CLF-CBF-QP at ``x``: minimise ``|u|`` over the CLF, CBF and input rows."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("state must be finite")
    checker = checker or PointwiseChecker(sys, cert, settings)
    Lam, xi = checker.lambda_xi(x)
    return solve_clf_cbf_qp(Lam, xi, settings)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray  # one row shorter than states
    V_values: np.ndarray
    h_values: np.ndarray
    events: List[dict] = field(default_factory=list)

    @property
    def qp_infeasible(self) -> bool:
        return any("qp_infeasible_at" in e for e in self.events)

    def to_csv(self, state_names, input_count: int) -> str:
        cols = ["t"] + list(state_names) + [f"u{j + 1}" for j in range(input_count)] + ["V", "h"]
        lines = [",".join(cols)]
        for k, t in enumerate(self.times):
            u = self.inputs[k] if k < len(self.inputs) else np.full(input_count, np.nan)
            vals = [t, *self.states[k], *u, self.V_values[k], self.h_values[k]]
            lines.append(",".join(repr(float(v)) for v in vals))
        return "\n".join(lines) + "\n"


def simulate(sys: ControlAffineSystem, cert: CertificatePair, x0, t_final: float, dt: float = 1e-3,
             settings: Optional[SolverSettings] = None, manifold_tol: float = 1e-9) -> Trajectory:
    """RK4 rollout with the QP input held constant over each step."""
    if dt <= 0 or t_final < 0:
        raise ValueError("need dt > 0 and t_final >= 0")
    checker = PointwiseChecker(sys, cert, settings)
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (sys.nx,):
        raise PreconditionError(f"x0 must have {sys.nx} entries")
    if sys.e and np.abs(sys.e_values(x)).max() > manifold_tol:
        raise PreconditionError("x0 is off the constraint manifold")
    V0, h0 = checker.V_h(x)
    if V0 > 1 + REGION_TOL or h0 < -REGION_TOL:
        raise PreconditionError("x0 lies outside the compatible region {h >= 0, V <= 1}")
    steps = int(round(t_final / dt))
    states = [x.copy()]
    inputs = []
    vh = [(V0, h0)]
    events: List[dict] = []
    for k in range(steps):
        res = clf_cbf_qp(sys, cert, x, settings, checker)
        if not res.feasible:
            ev = {"qp_infeasible_at": k * dt} if res.status == "infeasible" else {"qp_unknown_at": k * dt}
            ev["reason"] = res.reason
            events.append(ev)
            break
        u = res.u

        def rhs(z):
            return sys.dynamics(z, u)

        k1 = rhs(x)
        k2 = rhs(x + 0.5 * dt * k1)
        k3 = rhs(x + 0.5 * dt * k2)
        k4 = rhs(x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        inputs.append(u)
        states.append(x.copy())
        vh.append(tuple(checker.V_h(x)))
    n = len(states)
    vh = np.array(vh, dtype=float).reshape(n, 2)
    return Trajectory(
        times=np.arange(n) * dt,
        states=np.array(states),
        inputs=np.array(inputs).reshape(len(inputs), sys.nu),
        V_values=vh[:, 0],
        h_values=vh[:, 1],
        events=events,
    )
