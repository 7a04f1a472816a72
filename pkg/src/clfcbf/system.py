"""Control-affine polynomial systems and the pointwise compatibility test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .conic import LPResult, SolverSettings, solve_lp
from .polyalg import PolyEvaluator, Polynomial, VariableSet
from .sosprog import PolyExpr

REGION_TOL = 1e-9
MANIFOLD_TOL = 1e-6


class OffManifoldError(ValueError):
    pass


class Kappa:
    """Extended class-kappa polynomial ``k1 s + k2 s^2 + ...`` (no constant term)."""

    def __init__(self, coeffs: Union[float, Sequence[float]]):
        if isinstance(coeffs, (int, float)):
            coeffs = [float(coeffs)]
        self.coeffs = tuple(float(k) for k in coeffs)
        if not self.coeffs or self.coeffs[0] <= 0:
            raise ValueError("kappa needs a positive linear coefficient")

    @property
    def is_linear(self) -> bool:
        return all(k == 0 for k in self.coeffs[1:])

    @property
    def linear(self) -> float:
        return self.coeffs[0]

    def __call__(self, s):
        if isinstance(s, PolyExpr):
            if not self.is_linear:
                raise ValueError("only linear kappa can be applied to a decision polynomial")
            return s * self.coeffs[0]
        if isinstance(s, Polynomial):
            out = Polynomial()
            power = Polynomial(1.0)
            for k in self.coeffs:
                power = power * s
                out = out + power * k
            return out
        return sum(k * s ** (i + 1) for i, k in enumerate(self.coeffs))

    def __eq__(self, other):
        return isinstance(other, Kappa) and self.coeffs == other.coeffs

    def __repr__(self):
        return f"Kappa({list(self.coeffs)})"


@dataclass
class ControlAffineSystem:
    """``xdot = f(x) + g(x) u`` with ``A u <= c`` and ``e(x) = 0``."""

    variables: VariableSet
    f: Tuple[Polynomial, ...]
    g: Tuple[Tuple[Polynomial, ...], ...]
    A: np.ndarray
    c: np.ndarray
    e: Tuple[Polynomial, ...] = ()
    u_equilibrium: Optional[np.ndarray] = None
    name: str = "system"

    def __post_init__(self):
        self.f = tuple(self.f)
        self.g = tuple(tuple(row) for row in self.g)
        self.e = tuple(self.e)
        nx = len(self.variables)
        if len(self.f) != nx or len(self.g) != nx:
            raise ValueError("f and g must have one entry per state")
        nu = len(self.g[0]) if self.g else 0
        if any(len(row) != nu for row in self.g):
            raise ValueError("g rows have inconsistent lengths")
        self.A = np.asarray(self.A, dtype=float).reshape(-1, nu)
        self.c = np.asarray(self.c, dtype=float).ravel()
        if self.A.shape[0] != self.c.shape[0]:
            raise ValueError("A and c disagree in row count")
        self.u_equilibrium = (np.zeros(nu) if self.u_equilibrium is None
                              else np.asarray(self.u_equilibrium, dtype=float))
        zero = np.zeros(nx)
        xdot0 = self.dynamics(zero, self.u_equilibrium)
        if np.abs(xdot0).max(initial=0.0) > 1e-9:
            raise ValueError("the origin is not an equilibrium under u_equilibrium")
        if self.e and np.abs(self.e_values(zero)).max() > 1e-9:
            raise ValueError("algebraic constraints must vanish at the origin")
        if self.A.shape[0] and np.any(self.A @ self.u_equilibrium > self.c + 1e-9):
            raise ValueError("equilibrium input violates the input limits")

    @property
    def nx(self) -> int:
        return len(self.variables)

    @property
    def nu(self) -> int:
        return len(self.g[0]) if self.g else 0

    @property
    def p(self) -> int:
        return self.A.shape[0]

    def _evaluators(self):
        cache = self.__dict__.get("_eval_cache")
        if cache is None:
            flat_g = [gij for row in self.g for gij in row]
            cache = (
                PolyEvaluator(self.f, self.variables),
                PolyEvaluator(flat_g, self.variables),
                PolyEvaluator(self.e, self.variables) if self.e else None,
            )
            self.__dict__["_eval_cache"] = cache
        return cache

    def dynamics(self, x, u) -> np.ndarray:
        fe, ge, _ = self._evaluators()
        x = np.asarray(x, dtype=float)
        return fe(x) + ge(x).reshape(self.nx, self.nu) @ np.asarray(u, dtype=float)

    def e_values(self, x) -> np.ndarray:
        ee = self._evaluators()[2]
        if ee is None:
            return np.zeros(0)
        return ee(np.asarray(x, dtype=float))

    def point(self, x) -> dict:
        return dict(zip(self.variables, np.asarray(x, dtype=float)))


@dataclass
class CertificatePair:
    V: Polynomial
    h: Polynomial
    kappa_V: Kappa = field(default_factory=lambda: Kappa(0.1))
    kappa_h: Kappa = field(default_factory=lambda: Kappa(0.1))

    def __post_init__(self):
        if not isinstance(self.kappa_V, Kappa):
            self.kappa_V = Kappa(self.kappa_V)
        if not isinstance(self.kappa_h, Kappa):
            self.kappa_h = Kappa(self.kappa_h)
        if abs(self.V.constant()) > 1e-9:
            raise ValueError("V(0) must be 0")


@dataclass
class UnsafeRegion:
    """Union (``any l_j <= 0``) or intersection (``all l_j <= 0``)."""

    l: Tuple[Polynomial, ...]
    mode: str = "union"

    def __post_init__(self):
        self.l = tuple(self.l)
        self.mode = self.mode.lower()
        if self.mode not in ("union", "intersection"):
            raise ValueError("mode must be 'union' or 'intersection'")
        if not self.l:
            raise ValueError("an unsafe region needs at least one polynomial")

    def contains(self, values: np.ndarray) -> np.ndarray:
        """Membership from an array of ``l_j`` values, shape ``(..., K)``."""
        inside = np.asarray(values) <= 0
        return inside.any(axis=-1) if self.mode == "union" else inside.all(axis=-1)


def lie_derivatives(sys: ControlAffineSystem, phi):
    """``(L_f phi, [L_g phi]_i)`` for a Polynomial or decision expression."""
    grads = [phi.differentiate(v) for v in sys.variables]
    zero = PolyExpr() if isinstance(phi, PolyExpr) else Polynomial()
    Lf = sum((grads[i] * sys.f[i] for i in range(sys.nx)), zero)
    Lg = [sum((grads[i] * sys.g[i][j] for i in range(sys.nx)), zero) for j in range(sys.nu)]
    return Lf, Lg


def assemble_lambda_xi(sys: ControlAffineSystem, cert: CertificatePair):
    """Rows ``[L_g V; -L_g h; A]`` and ``[-kV(V) - L_f V; kh(h) + L_f h; c]``."""
    LfV, LgV = lie_derivatives(sys, cert.V)
    Lfh, Lgh = lie_derivatives(sys, cert.h)
    Lam = [list(LgV), [-q for q in Lgh]]
    xi = [-cert.kappa_V(cert.V) - LfV, cert.kappa_h(cert.h) + Lfh]
    for i in range(sys.p):
        Lam.append([Polynomial(float(a)) for a in sys.A[i]])
        xi.append(Polynomial(float(sys.c[i])))
    return Lam, xi


@dataclass
class PointwiseResult:
    status: str  # compatible | incompatible | not_in_region | unknown
    u: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None
    Lam: Optional[np.ndarray] = None
    xi: Optional[np.ndarray] = None
    reason: str = ""


class PointwiseChecker:
    """Compiled Lambda/xi/V/h evaluators for repeated pointwise tests."""

    def __init__(self, sys: ControlAffineSystem, cert: CertificatePair,
                 settings: Optional[SolverSettings] = None):
        self.sys = sys
        self.cert = cert
        self.settings = settings
        Lam, xi = assemble_lambda_xi(sys, cert)
        self.rows = len(xi)
        self._lam = PolyEvaluator([q for row in Lam for q in row], sys.variables)
        self._xi = PolyEvaluator(xi, sys.variables)
        self._vh = PolyEvaluator([cert.V, cert.h], sys.variables)

    def V_h(self, X) -> np.ndarray:
        return self._vh(X)

    def lambda_xi(self, x) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        return self._lam(x).reshape(self.rows, self.sys.nu), self._xi(x)

    def in_region(self, x) -> bool:
        V, h = self._vh(np.asarray(x, dtype=float))
        return h >= -REGION_TOL and V <= 1 + REGION_TOL

    def lp(self, x) -> LPResult:
        Lam, xi = self.lambda_xi(x)
        return solve_lp(Lam, xi, self.settings)

    def check(self, x, manifold_tol: Optional[float] = MANIFOLD_TOL) -> PointwiseResult:
        x = np.asarray(x, dtype=float)
        if manifold_tol is not None and self.sys.e:
            if np.abs(self.sys.e_values(x)).max() > manifold_tol:
                raise OffManifoldError(f"|e(x)| exceeds {manifold_tol}")
        if not self.in_region(x):
            return PointwiseResult("not_in_region")
        Lam, xi = self.lambda_xi(x)
        res = solve_lp(Lam, xi, self.settings)
        if res.feasible:
            return PointwiseResult("compatible", u=res.u, Lam=Lam, xi=xi)
        if res.infeasible:
            return PointwiseResult("incompatible", z=res.z, Lam=Lam, xi=xi)
        return PointwiseResult("unknown", Lam=Lam, xi=xi, reason=res.reason)


def pointwise_compatibility(sys, cert, x, manifold_tol: Optional[float] = MANIFOLD_TOL,
                            settings: Optional[SolverSettings] = None) -> PointwiseResult:
    return PointwiseChecker(sys, cert, settings).check(x, manifold_tol)


# --------------------------------------------------------------- builtins


def make_toy_system() -> Tuple[ControlAffineSystem, UnsafeRegion]:
    """Pendulum-like toy in coordinates ``x = (sin t, cos t - 1, gamma)``."""
    xs = VariableSet(["x1", "x2", "x3"])
    x1, x2, x3 = xs.polys()
    zero = Polynomial()
    sys = ControlAffineSystem(
        variables=xs,
        f=(zero, zero, -x1),
        g=((x2 + 1,), (-x1,), (Polynomial(-1.0),)),
        A=np.array([[1.0], [-1.0]]),
        c=np.array([1.0, 1.0]),
        e=(x1 * x1 + (x2 + 1) * (x2 + 1) - 1,),
        name="toy",
    )
    unsafe = UnsafeRegion((x1 + x2 + x3 + 2,), "union")
    return sys, unsafe


def toy_chart_to_state(theta, gamma) -> np.ndarray:
    """Map original coordinates ``(theta, gamma)`` into toy-system states."""
    theta = np.asarray(theta, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    return np.stack([np.sin(theta), np.cos(theta) - 1.0, gamma], axis=-1)


def make_double_integrator() -> ControlAffineSystem:
    xs = VariableSet(["x1", "x2"])
    x1, x2 = xs.polys()
    return ControlAffineSystem(
        variables=xs,
        f=(x2, Polynomial()),
        g=((Polynomial(),), (Polynomial(1.0),)),
        A=np.zeros((0, 1)),
        c=np.zeros(0),
        name="double_integrator",
    )


@dataclass
class QuadrotorParams:
    mass: float = 0.775
    arm_length: float = 0.15
    inertia: Tuple[float, float, float] = (0.0015, 0.0025, 0.0035)
    thrust_to_torque: float = 0.0245
    gravity: float = 9.81
    u_max: Optional[float] = None  # per rotor; default 3 * m * g / 4

    @property
    def hover_thrust(self) -> float:
        return self.mass * self.gravity / 4.0

    @property
    def rotor_limit(self) -> float:
        return self.u_max if self.u_max is not None else 3.0 * self.mass * self.gravity / 4.0


def make_quadrotor_system(params: Optional[QuadrotorParams] = None) -> ControlAffineSystem:
    """13-state quaternion quadrotor; rotor thrusts as inputs.

    State: ``(qw - 1, qx, qy, qz, position, velocity, body rates)``.  Rotors
    sit on the body +x, +y, -x, -y arms.
    """
    prm = params or QuadrotorParams()
    names = ["q0", "q1", "q2", "q3", "px", "py", "pz", "vx", "vy", "vz", "wx", "wy", "wz"]
    xs = VariableSet(names)
    X = xs.polys()
    qw, qx, qy, qz = X[0] + 1, X[1], X[2], X[3]
    v = X[7:10]
    wx, wy, wz = X[10:13]
    zero = Polynomial()
    J = np.array(prm.inertia, dtype=float)

    qdot = [
        (qx * wx + qy * wy + qz * wz) * -0.5,
        (qw * wx + qy * wz - qz * wy) * 0.5,
        (qw * wy + qz * wx - qx * wz) * 0.5,
        (qw * wz + qx * wy - qy * wx) * 0.5,
    ]
    # -J^{-1} (w x J w)
    wdot = [
        (wy * wz) * (-(J[2] - J[1]) / J[0]),
        (wz * wx) * (-(J[0] - J[2]) / J[1]),
        (wx * wy) * (-(J[1] - J[0]) / J[2]),
    ]
    f = qdot + list(v) + [zero, zero, Polynomial(-prm.gravity)] + wdot

    body_z = [
        (qx * qz + qw * qy) * 2.0,
        (qy * qz - qw * qx) * 2.0,
        1 - (qx * qx + qy * qy) * 2.0,
    ]
    L, kt = prm.arm_length, prm.thrust_to_torque
    torque = np.array([
        [0.0, L, 0.0, -L],
        [-L, 0.0, L, 0.0],
        [kt, -kt, kt, -kt],
    ])
    g: List[List[Polynomial]] = [[zero] * 4 for _ in range(13)]
    for axis in range(3):
        for i in range(4):
            g[7 + axis][i] = body_z[axis] * (1.0 / prm.mass)
            g[10 + axis][i] = Polynomial(torque[axis, i] / J[axis])
    e = (qw * qw + qx * qx + qy * qy + qz * qz - 1,)
    umax = prm.rotor_limit
    A = np.vstack([np.eye(4), -np.eye(4)])
    c = np.concatenate([np.full(4, umax), np.zeros(4)])
    return ControlAffineSystem(
        variables=xs, f=tuple(f), g=tuple(tuple(r) for r in g), A=A, c=c, e=e,
        u_equilibrium=np.full(4, prm.hover_thrust), name="quadrotor",
    )
