"""Standard-form conic problems and solver backends.

Problem form::

    minimize    c' x + c0
    subject to  A x = b
                x[span_k] in K_k   for every cone span k

Cone kinds are ``free``, ``nonneg``, ``soc`` (``x0 >= ||x[1:]||``) and
``psd``.  A PSD block of order ``n`` occupies ``n(n+1)/2`` entries storing the
lower triangle row by row, ``X00, X10, X11, X20, X21, X22, ...``, with
off-diagonal entries multiplied by sqrt(2).

Dual conventions (shared by every backend):

* ``Optimal``: ``dual`` is ``y`` with ``c - A' y`` in the dual cone and dual
  objective ``b' y + c0``.
* ``PrimalInfeasible``: ``farkas`` is ``y`` with ``A' y`` in the dual cone
  (zero on free spans) and ``b' y = -1``.
"""

from __future__ import annotations

import enum
import io
import math
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

SQRT2 = math.sqrt(2.0)


class DimensionMismatch(ValueError):
    pass


class SolverUnknownError(RuntimeError):
    """A solve ended without a certified answer."""


@dataclass(frozen=True)
class Cone:
    kind: str  # free | nonneg | soc | psd
    start: int
    size: int
    order: int = 0  # matrix order for psd blocks

    def __post_init__(self):
        if self.kind not in ("free", "nonneg", "soc", "psd"):
            raise ValueError(f"unknown cone kind {self.kind!r}")
        if self.kind == "psd" and self.size != self.order * (self.order + 1) // 2:
            raise DimensionMismatch("psd span size does not match its order")


@dataclass
class ConicProblem:
    n: int
    A: sp.csr_matrix
    b: np.ndarray
    c: np.ndarray
    cones: Tuple[Cone, ...]
    c0: float = 0.0

    def validate(self) -> None:
        m = self.b.shape[0]
        if self.A.shape != (m, self.n) or self.c.shape != (self.n,):
            raise DimensionMismatch(f"A {self.A.shape}, b {self.b.shape}, c {self.c.shape}, n {self.n}")
        pos = 0
        for cone in self.cones:
            if cone.start != pos:
                raise DimensionMismatch("cone spans must partition the variable vector in order")
            pos += cone.size
        if pos != self.n:
            raise DimensionMismatch("cone spans do not cover the variable vector")

    def to_text(self) -> str:
        """Deterministic text dump: header, cones, sparse triplets, b, c."""
        A = self.A.tocoo()
        order = np.lexsort((A.col, A.row))
        out = io.StringIO()
        out.write(f"conic 1\nvars {self.n}\nrows {self.b.shape[0]}\nc0 {self.c0!r}\n")
        out.write(f"cones {len(self.cones)}\n")
        for cone in self.cones:
            out.write(f"{cone.kind} {cone.start} {cone.size} {cone.order}\n")
        out.write(f"A {A.nnz}\n")
        for k in order:
            out.write(f"{A.row[k]} {A.col[k]} {float(A.data[k])!r}\n")
        out.write("b\n")
        out.write("".join(f"{float(v)!r}\n" for v in self.b))
        out.write("c\n")
        out.write("".join(f"{float(v)!r}\n" for v in self.c))
        return out.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "ConicProblem":
        lines = iter(text.splitlines())

        def field_(name):
            key, val = next(lines).split(" ", 1)
            if key != name:
                raise ValueError(f"expected {name}, found {key}")
            return val

        field_("conic")
        n = int(field_("vars"))
        m = int(field_("rows"))
        c0 = float(field_("c0"))
        cones = []
        for _ in range(int(field_("cones"))):
            kind, start, size, order = next(lines).split()
            cones.append(Cone(kind, int(start), int(size), int(order)))
        nnz = int(field_("A"))
        rows, cols, vals = [], [], []
        for _ in range(nnz):
            r, cc, v = next(lines).split()
            rows.append(int(r))
            cols.append(int(cc))
            vals.append(float(v))
        assert next(lines) == "b"
        b = np.array([float(next(lines)) for _ in range(m)])
        assert next(lines) == "c"
        c = np.array([float(next(lines)) for _ in range(n)])
        A = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
        return cls(n=n, A=A, b=b, c=c, cones=tuple(cones), c0=c0)


class Status(enum.Enum):
    OPTIMAL = "Optimal"
    PRIMAL_INFEASIBLE = "PrimalInfeasible"
    DUAL_INFEASIBLE = "DualInfeasible"
    UNKNOWN = "Unknown"


@dataclass
class SolverSettings:
    max_iters: int = 200
    abs_tol: float = 1e-8
    rel_tol: float = 1e-8
    time_limit: float = math.inf
    backend: Optional[str] = None


@dataclass
class ConicSolution:
    status: Status
    x: Optional[np.ndarray] = None
    dual: Optional[np.ndarray] = None
    farkas: Optional[np.ndarray] = None
    objective: float = math.nan
    reason: str = ""
    stats: Dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL


# ----------------------------------------------------------------- helpers


def svec_index(i: int, j: int) -> int:
    """Position of entry (i, j), i >= j, in the lower-triangular row-wise svec."""
    if i < j:
        i, j = j, i
    return i * (i + 1) // 2 + j


def svec_to_mat(v: np.ndarray, order: int) -> np.ndarray:
    M = np.zeros((order, order))
    k = 0
    for i in range(order):
        for j in range(i + 1):
            val = v[k] if i == j else v[k] / SQRT2
            M[i, j] = M[j, i] = val
            k += 1
    return M


def cone_violation(x: np.ndarray, cones: Sequence[Cone]) -> float:
    worst = 0.0
    for cone in cones:
        seg = x[cone.start:cone.start + cone.size]
        if cone.kind == "nonneg" and seg.size:
            worst = max(worst, float(-seg.min()))
        elif cone.kind == "soc":
            worst = max(worst, float(np.linalg.norm(seg[1:]) - seg[0]))
        elif cone.kind == "psd" and cone.order:
            worst = max(worst, float(-np.linalg.eigvalsh(svec_to_mat(seg, cone.order)).min()))
    return worst


def _residual_stats(problem: ConicProblem, x: np.ndarray) -> Dict[str, float]:
    r = problem.A @ x - problem.b
    return {
        "primal_residual": float(np.abs(r).max()) if r.size else 0.0,
        "cone_violation": cone_violation(x, problem.cones),
    }


ALMOST_TOL = 1e-6


def _acceptable(problem: ConicProblem, x: np.ndarray) -> bool:
    st = _residual_stats(problem, x)
    scale = 1.0 + (float(np.abs(problem.b).max()) if problem.b.size else 0.0)
    return st["primal_residual"] <= ALMOST_TOL * scale and st["cone_violation"] <= ALMOST_TOL * scale


# ---------------------------------------------------------------- backends


def _solve_clarabel(problem: ConicProblem, settings: SolverSettings) -> ConicSolution:
    import clarabel

    n, m = problem.n, problem.b.shape[0]
    blocks = [problem.A.tocsc()]
    rhs = [problem.b]
    cones = []
    if m:
        cones.append(clarabel.ZeroConeT(m))
    for cone in problem.cones:
        if cone.kind == "free" or cone.size == 0:
            continue
        sel = sp.csc_matrix(
            (-np.ones(cone.size), (np.arange(cone.size), np.arange(cone.start, cone.start + cone.size))),
            shape=(cone.size, n),
        )
        blocks.append(sel)
        rhs.append(np.zeros(cone.size))
        if cone.kind == "nonneg":
            cones.append(clarabel.NonnegativeConeT(cone.size))
        elif cone.kind == "soc":
            cones.append(clarabel.SecondOrderConeT(cone.size))
        else:
            cones.append(clarabel.PSDTriangleConeT(cone.order))
    A = sp.vstack(blocks).tocsc()
    b = np.concatenate(rhs)
    P = sp.csc_matrix((n, n))
    cs = clarabel.DefaultSettings()
    cs.verbose = False
    cs.max_iter = int(settings.max_iters)
    cs.tol_gap_abs = settings.abs_tol
    cs.tol_gap_rel = settings.rel_tol
    cs.tol_feas = settings.abs_tol
    # SOS programs here often have no strictly feasible point (forced zero
    # Gram rows); extra refinement keeps the KKT solves accurate near the face
    cs.iterative_refinement_max_iter = 50
    cs.iterative_refinement_reltol = 1e-14
    cs.iterative_refinement_abstol = 1e-14
    if math.isfinite(settings.time_limit):
        cs.time_limit = float(settings.time_limit)
    solver = clarabel.DefaultSolver(P, problem.c.astype(float), A, b, cones, cs)
    sol = solver.solve()
    status = str(sol.status)
    x = np.array(sol.x)
    z = np.array(sol.z)
    stats = {"iterations": float(sol.iterations), "solve_time": float(sol.solve_time)}
    if status == "Solved":
        out = ConicSolution(Status.OPTIMAL, x=x, dual=-z[:m], objective=float(problem.c @ x) + problem.c0)
    elif status == "PrimalInfeasible":
        y = z[:m]
        scale = -float(problem.b @ y)
        out = ConicSolution(Status.PRIMAL_INFEASIBLE, farkas=y / scale if scale > 0 else y, reason=status)
    elif status == "DualInfeasible":
        out = ConicSolution(Status.DUAL_INFEASIBLE, x=x, reason=status)
    elif status == "AlmostSolved" and _acceptable(problem, x):
        # reduced-accuracy optimum whose primal point is still feasible to
        # ALMOST_TOL; every caller re-checks what it extracts from x
        out = ConicSolution(Status.OPTIMAL, x=x, dual=-z[:m], objective=float(problem.c @ x) + problem.c0,
                            reason="almost_solved")
    elif status == "MaxTime":
        out = ConicSolution(Status.UNKNOWN, x=x, reason="time_limit")
    elif status == "MaxIterations":
        out = ConicSolution(Status.UNKNOWN, x=x, reason="max_iters")
    else:
        out = ConicSolution(Status.UNKNOWN, x=x, reason=status)
    if out.x is not None:
        stats.update(_residual_stats(problem, out.x))
    out.stats = stats
    return out


def _solve_cvxopt(problem: ConicProblem, settings: SolverSettings) -> ConicSolution:
    import cvxopt
    from cvxopt import solvers

    n, m = problem.n, problem.b.shape[0]
    grows: List[int] = []
    gcols: List[int] = []
    gvals: List[float] = []
    dims = {"l": 0, "q": [], "s": []}
    row = 0
    ordered = (
        [c for c in problem.cones if c.kind == "nonneg"]
        + [c for c in problem.cones if c.kind == "soc"]
        + [c for c in problem.cones if c.kind == "psd"]
    )
    for cone in ordered:
        if cone.kind in ("nonneg", "soc"):
            for k in range(cone.size):
                grows.append(row + k)
                gcols.append(cone.start + k)
                gvals.append(-1.0)
            row += cone.size
            if cone.kind == "nonneg":
                dims["l"] += cone.size
            else:
                dims["q"].append(cone.size)
        else:
            order = cone.order
            for i in range(order):
                for j in range(i + 1):
                    k = cone.start + svec_index(i, j)
                    if i == j:
                        grows.append(row + i + j * order)
                        gcols.append(k)
                        gvals.append(-1.0)
                    else:
                        for r, cc in ((i, j), (j, i)):
                            grows.append(row + r + cc * order)
                            gcols.append(k)
                            gvals.append(-1.0 / SQRT2)
            row += order * order
            dims["s"].append(order)
    G = cvxopt.spmatrix(gvals, grows, gcols, (row, n))
    h = cvxopt.matrix(np.zeros(row))
    A = problem.A.tocoo()
    Acv = cvxopt.spmatrix(A.data.astype(float).tolist(), A.row.tolist(), A.col.tolist(), (m, n))
    bcv = cvxopt.matrix(problem.b.astype(float))
    opts = {
        "show_progress": False,
        "maxiters": int(settings.max_iters),
        "abstol": settings.abs_tol,
        "reltol": settings.rel_tol,
        "feastol": settings.abs_tol,
    }
    t0 = time.perf_counter()
    try:
        res = solvers.conelp(cvxopt.matrix(problem.c.astype(float)), G, h, dims, Acv, bcv, options=opts)
    except (ValueError, ArithmeticError) as exc:
        return ConicSolution(Status.UNKNOWN, reason=f"cvxopt: {exc}")
    stats = {"iterations": float(res.get("iterations", 0)), "solve_time": time.perf_counter() - t0}
    status = res["status"]
    if status == "optimal":
        x = np.array(res["x"]).ravel()
        out = ConicSolution(Status.OPTIMAL, x=x, dual=-np.array(res["y"]).ravel(),
                            objective=float(problem.c @ x) + problem.c0)
        stats.update(_residual_stats(problem, x))
    elif status == "primal infeasible":
        out = ConicSolution(Status.PRIMAL_INFEASIBLE, farkas=np.array(res["y"]).ravel(), reason=status)
    elif status == "dual infeasible":
        out = ConicSolution(Status.DUAL_INFEASIBLE, reason=status)
    else:
        x = None if res["x"] is None else np.array(res["x"]).ravel()
        out = ConicSolution(Status.UNKNOWN, x=x, reason=status)
    out.stats = stats
    return out


BACKENDS = {"clarabel": _solve_clarabel, "cvxopt": _solve_cvxopt}


def default_backend() -> str:
    return os.environ.get("CLFCBF_SOLVER", "clarabel").lower()


def solve(problem: ConicProblem, settings: Optional[SolverSettings] = None) -> ConicSolution:
    settings = settings or SolverSettings()
    problem.validate()
    name = (settings.backend or default_backend()).lower()
    if name not in BACKENDS:
        raise ValueError(f"unknown solver backend {name!r}; choose from {sorted(BACKENDS)}")
    return BACKENDS[name](problem, settings)


# -------------------------------------------------------------- LP oracle

LP_TOL = 1e-8


@dataclass
class LPResult:
    """Outcome of ``rows @ u <= rhs``: a witness ``u`` or a Farkas vector ``z``."""

    status: str  # feasible | infeasible | unknown
    u: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None
    reason: str = ""

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"

    @property
    def infeasible(self) -> bool:
        return self.status == "infeasible"


def check_farkas(rows: np.ndarray, rhs: np.ndarray, z: np.ndarray, tol: float = LP_TOL) -> bool:
    return bool(
        np.all(z >= -tol)
        and (rows.shape[1] == 0 or np.abs(z @ rows).max() <= tol)
        and abs(float(rhs @ z) + 1.0) <= tol
    )


def check_witness(rows: np.ndarray, rhs: np.ndarray, u: np.ndarray, tol: float = LP_TOL) -> bool:
    return bool(np.all(rows @ u <= rhs + tol))


def _polish_farkas(rows: np.ndarray, rhs: np.ndarray, z: np.ndarray) -> np.ndarray:
    z = np.maximum(z, 0.0)
    support = z > 1e-9 * max(z.max(), 1e-300)
    Rs = rows[support]
    zs = z[support]
    if Rs.size:
        # least-norm correction onto z' rows = 0 over the support
        delta = -Rs @ np.linalg.lstsq(Rs.T @ Rs, Rs.T @ zs, rcond=None)[0]
        if np.all(zs + delta >= 0):
            zs = zs + delta
    out = np.zeros_like(z)
    out[support] = zs
    denom = -float(rhs @ out)
    return out / denom if denom > 0 else out


def lp_problem(rows: np.ndarray, rhs: np.ndarray) -> ConicProblem:
    m, n = rows.shape
    A = sp.hstack([sp.csr_matrix(rows), sp.identity(m, format="csr")]).tocsr()
    cones = []
    if n:
        cones.append(Cone("free", 0, n))
    if m:
        cones.append(Cone("nonneg", n, m))
    return ConicProblem(n=n + m, A=A, b=np.asarray(rhs, float), c=np.zeros(n + m), cones=tuple(cones))


def solve_lp(rows, rhs, settings: Optional[SolverSettings] = None) -> LPResult:
    """Decide feasibility of ``rows @ u <= rhs`` through the conic backend."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    rhs = np.asarray(rhs, dtype=float).ravel()
    if rows.shape[0] != rhs.shape[0]:
        raise DimensionMismatch("rows and rhs disagree in length")
    if not (np.all(np.isfinite(rows)) and np.all(np.isfinite(rhs))):
        raise ValueError("LP data must be finite")
    n = rows.shape[1]
    sol = solve(lp_problem(rows, rhs), settings)
    if sol.status is Status.OPTIMAL:
        u = sol.x[:n]
        if check_witness(rows, rhs, u):
            return LPResult("feasible", u=u)
        return LPResult("unknown", u=u, reason="witness failed verification")
    if sol.status is Status.PRIMAL_INFEASIBLE:
        z = sol.farkas
        if not check_farkas(rows, rhs, z):
            z = _polish_farkas(rows, rhs, z)
        if check_farkas(rows, rhs, z):
            return LPResult("infeasible", z=z)
        return LPResult("unknown", z=z, reason="Farkas vector failed verification")
    return LPResult("unknown", reason=sol.reason or sol.status.value)
