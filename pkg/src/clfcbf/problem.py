"""TOML problem files and certificate files.

A problem file has the tables ``[system]``, ``[unsafe]``, ``[certificates]``,
``[degrees]``, ``[synthesis]``, ``[solver]`` and ``[chart]``; only
``[system]`` is required.  Polynomials are strings in the grammar of
``polyalg.parse_polynomial``.  Unknown keys are errors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .certify import MultiplierDegrees
from .conic import SolverSettings
from .polyalg import ParseError, Polynomial, VariableSet, parse_polynomial
from .system import (
    CertificatePair,
    ControlAffineSystem,
    Kappa,
    QuadrotorParams,
    UnsafeRegion,
    make_double_integrator,
    make_quadrotor_system,
    make_toy_system,
    toy_chart_to_state,
)


class ProblemError(ValueError):
    """Malformed problem or certificate file; the message names the location."""


SECTIONS = {"system", "unsafe", "certificates", "degrees", "synthesis", "solver", "chart"}
SYSTEM_KEYS = {"builtin", "name", "variables", "f", "g", "A", "c", "e", "u_equilibrium", "params"}
QUAD_PARAM_KEYS = {"mass", "arm_length", "inertia", "thrust_to_torque", "gravity", "u_max"}
UNSAFE_KEYS = {"mode", "l"}
CERT_KEYS = {"V", "h", "kappa_V", "kappa_h"}
DEGREE_KEYS = {"s0", "s1", "s2", "s3", "s4", "p", "q", "s2_kind", "s3_kind"}
SYNTH_KEYS = {
    "init", "clf_only", "candidates", "candidate_ring", "kappa_V", "kappa_h", "c1", "c2",
    "h_lower", "h_upper", "max_iter", "V_degree", "h_degree", "pd_epsilon",
    "objective_improvement_tol", "backoff_rel", "backoff_abs", "lqr_scale", "lqr_normal_weight",
}
RING_KEYS = {"radius", "count", "center"}
SOLVER_KEYS = {"backend", "max_iters", "abs_tol", "rel_tol", "time_limit"}
CHART_KEYS = {"coordinates", "axes", "labels", "x_range", "y_range", "resolution", "slice"}

CHART_MAPS: Dict[str, Callable] = {"toy_theta_gamma": toy_chart_to_state}
BUILTINS = ("toy", "double_integrator", "quadrotor")


def _check_keys(table: Dict[str, Any], allowed: set, where: str) -> None:
    if not isinstance(table, dict):
        raise ProblemError(f"{where}: expected a table")
    extra = sorted(set(table) - allowed)
    if extra:
        raise ProblemError(f"{where}: unknown key {extra[0]!r}")


def _poly(text, variables: VariableSet, where: str) -> Polynomial:
    if isinstance(text, (int, float)):
        return Polynomial(float(text))
    if not isinstance(text, str):
        raise ProblemError(f"{where}: expected a polynomial string")
    try:
        return parse_polynomial(text, variables)
    except ParseError as exc:
        raise ProblemError(f"{where}: {exc}") from exc


def _kappa(value, where: str) -> Kappa:
    try:
        return Kappa(value if isinstance(value, (int, float)) else list(value))
    except (TypeError, ValueError) as exc:
        raise ProblemError(f"{where}: {exc}") from exc


@dataclass
class ChartSpec:
    coordinates: str = "state"  # "state" or a key of CHART_MAPS
    axes: Tuple[int, int] = (0, 1)
    labels: Tuple[str, str] = ("", "")
    x_range: Tuple[float, float] = (-1.0, 1.0)
    y_range: Tuple[float, float] = (-1.0, 1.0)
    resolution: Tuple[int, int] = (50, 50)
    slice: Optional[np.ndarray] = None

    def to_state(self, a: np.ndarray, b: np.ndarray, nx: int) -> np.ndarray:
        """States for display coordinates ``(a, b)`` (arrays of equal shape)."""
        if self.coordinates != "state":
            return CHART_MAPS[self.coordinates](a, b)
        base = np.zeros(nx) if self.slice is None else np.asarray(self.slice, dtype=float)
        X = np.broadcast_to(base, a.shape + (nx,)).copy()
        X[..., self.axes[0]] = a
        X[..., self.axes[1]] = b
        return X


@dataclass
class Problem:
    system: ControlAffineSystem
    unsafe: Optional[UnsafeRegion] = None
    certificates: Optional[CertificatePair] = None
    degrees: MultiplierDegrees = field(default_factory=MultiplierDegrees)
    synthesis: Dict[str, Any] = field(default_factory=dict)
    solver: SolverSettings = field(default_factory=SolverSettings)
    chart: ChartSpec = field(default_factory=ChartSpec)
    source: str = ""

    @property
    def variables(self) -> VariableSet:
        return self.system.variables

    def kappas(self) -> Tuple[Kappa, Kappa]:
        if self.certificates is not None:
            return self.certificates.kappa_V, self.certificates.kappa_h
        return Kappa(0.1), Kappa(0.1)

    def candidate_states(self) -> np.ndarray:
        syn = self.synthesis
        if "candidates" in syn:
            return np.atleast_2d(np.asarray(syn["candidates"], dtype=float))
        if "candidate_ring" in syn:
            ring = syn["candidate_ring"]
            r = ring.get("radius", 1.0)
            ra, rb = (r, r) if isinstance(r, (int, float)) else (float(r[0]), float(r[1]))
            n = int(ring.get("count", 12))
            ca, cb = ring.get("center", (0.0, 0.0))
            phi = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
            return self.chart.to_state(ca + ra * np.cos(phi), cb + rb * np.sin(phi), self.system.nx)
        return np.zeros((0, self.system.nx))


def _build_system(tab: Dict[str, Any]) -> Tuple[ControlAffineSystem, Optional[UnsafeRegion]]:
    _check_keys(tab, SYSTEM_KEYS, "[system]")
    builtin = tab.get("builtin")
    if builtin is not None:
        extra = sorted(set(tab) - {"builtin", "params"})
        if extra:
            raise ProblemError(f"[system]: key {extra[0]!r} cannot be combined with builtin")
        if builtin not in BUILTINS:
            raise ProblemError(f"[system].builtin: unknown system {builtin!r} (choose from {', '.join(BUILTINS)})")
        if builtin == "toy":
            return make_toy_system()
        if builtin == "double_integrator":
            return make_double_integrator(), None
        params = tab.get("params", {})
        _check_keys(params, QUAD_PARAM_KEYS, "[system.params]")
        if "inertia" in params:
            params = dict(params, inertia=tuple(params["inertia"]))
        return make_quadrotor_system(QuadrotorParams(**params)), None
    for key in ("variables", "f", "g"):
        if key not in tab:
            raise ProblemError(f"[system]: missing key {key!r}")
    names = tab["variables"]
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise ProblemError("[system].variables: expected a list of names")
    try:
        xs = VariableSet(names)
    except ValueError as exc:
        raise ProblemError(f"[system].variables: {exc}") from exc
    f = [_poly(t, xs, f"[system].f[{i}]") for i, t in enumerate(tab["f"])]
    g = [[_poly(t, xs, f"[system].g[{i}][{j}]") for j, t in enumerate(row)] for i, row in enumerate(tab["g"])]
    nu = len(g[0]) if g else 0
    A = np.asarray(tab.get("A", np.zeros((0, nu))), dtype=float).reshape(-1, nu)
    c = np.asarray(tab.get("c", []), dtype=float)
    e = [_poly(t, xs, f"[system].e[{i}]") for i, t in enumerate(tab.get("e", []))]
    try:
        sys = ControlAffineSystem(xs, tuple(f), tuple(tuple(r) for r in g), A, c, tuple(e),
                                  tab.get("u_equilibrium"), tab.get("name", "system"))
    except ValueError as exc:
        raise ProblemError(f"[system]: {exc}") from exc
    return sys, None


def load_problem_data(data: Dict[str, Any], source: str = "") -> Problem:
    _check_keys(data, SECTIONS, "problem file")
    if "system" not in data:
        raise ProblemError("problem file: missing [system] table")
    sys, builtin_unsafe = _build_system(data["system"])
    xs = sys.variables
    unsafe = builtin_unsafe
    if "unsafe" in data:
        tab = data["unsafe"]
        _check_keys(tab, UNSAFE_KEYS, "[unsafe]")
        ls = [_poly(t, xs, f"[unsafe].l[{i}]") for i, t in enumerate(tab.get("l", []))]
        try:
            unsafe = UnsafeRegion(tuple(ls), tab.get("mode", "union"))
        except ValueError as exc:
            raise ProblemError(f"[unsafe]: {exc}") from exc
    cert = None
    if "certificates" in data:
        cert = certificates_from_table(data["certificates"], xs, "[certificates]")
    degrees = MultiplierDegrees()
    if "degrees" in data:
        degrees = degrees_from_table(data["degrees"], "[degrees]")
    synthesis = dict(data.get("synthesis", {}))
    _check_keys(synthesis, SYNTH_KEYS, "[synthesis]")
    if "candidate_ring" in synthesis:
        _check_keys(synthesis["candidate_ring"], RING_KEYS, "[synthesis].candidate_ring")
    if synthesis.get("init", "certificates") not in ("certificates", "lqr"):
        raise ProblemError("[synthesis].init: expected 'certificates' or 'lqr'")
    solver = SolverSettings()
    if "solver" in data:
        solver = solver_from_table(data["solver"])
    chart = ChartSpec()
    if "chart" in data:
        chart = chart_from_table(data["chart"], sys.nx)
    return Problem(sys, unsafe, cert, degrees, synthesis, solver, chart, source)


def certificates_from_table(tab: Dict[str, Any], xs: VariableSet, where: str) -> CertificatePair:
    _check_keys(tab, CERT_KEYS, where)
    for key in ("V", "h"):
        if key not in tab:
            raise ProblemError(f"{where}: missing key {key!r}")
    V = _poly(tab["V"], xs, f"{where}.V")
    h = _poly(tab["h"], xs, f"{where}.h")
    kV = _kappa(tab.get("kappa_V", 0.1), f"{where}.kappa_V")
    kh = _kappa(tab.get("kappa_h", 0.1), f"{where}.kappa_h")
    try:
        return CertificatePair(V, h, kV, kh)
    except ValueError as exc:
        raise ProblemError(f"{where}: {exc}") from exc


def degrees_from_table(tab: Dict[str, Any], where: str) -> MultiplierDegrees:
    _check_keys(tab, DEGREE_KEYS, where)
    try:
        return MultiplierDegrees(**tab)
    except (TypeError, ValueError) as exc:
        raise ProblemError(f"{where}: {exc}") from exc


def solver_from_table(tab: Dict[str, Any]) -> SolverSettings:
    _check_keys(tab, SOLVER_KEYS, "[solver]")
    try:
        return SolverSettings(**tab)
    except TypeError as exc:
        raise ProblemError(f"[solver]: {exc}") from exc


def chart_from_table(tab: Dict[str, Any], nx: int) -> ChartSpec:
    _check_keys(tab, CHART_KEYS, "[chart]")
    coords = tab.get("coordinates", "state")
    if coords != "state" and coords not in CHART_MAPS:
        raise ProblemError(f"[chart].coordinates: unknown map {coords!r}")
    spec = ChartSpec(coordinates=coords)
    if "axes" in tab:
        axes = tuple(int(a) for a in tab["axes"])
        if len(axes) != 2 or not all(0 <= a < nx for a in axes) or axes[0] == axes[1]:
            raise ProblemError("[chart].axes: expected two distinct state indices")
        spec.axes = axes
    for key in ("labels", "x_range", "y_range"):
        if key in tab:
            if len(tab[key]) != 2:
                raise ProblemError(f"[chart].{key}: expected two entries")
            setattr(spec, key, tuple(tab[key]))
    if "resolution" in tab:
        res = tuple(int(r) for r in tab["resolution"])
        if len(res) != 2 or min(res) < 0:
            raise ProblemError("[chart].resolution: expected two nonnegative integers")
        spec.resolution = res
    if "slice" in tab:
        sl = np.asarray(tab["slice"], dtype=float)
        if sl.shape != (nx,):
            raise ProblemError(f"[chart].slice: expected {nx} values")
        spec.slice = sl
    if not any(spec.labels):
        spec.labels = ("theta", "gamma") if coords == "toy_theta_gamma" else (
            f"x{spec.axes[0] + 1}", f"x{spec.axes[1] + 1}")
    return spec


def _read_toml(path) -> Dict[str, Any]:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise FileNotFoundError(f"{path}: {exc.strerror or exc}") from exc
    try:
        return tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ProblemError(f"{path}: {exc}") from exc


def load_problem(path) -> Problem:
    return load_problem_data(_read_toml(path), str(path))


def load_degrees(path) -> MultiplierDegrees:
    data = _read_toml(path)
    _check_keys(data, {"degrees"}, str(path))
    return degrees_from_table(data.get("degrees", {}), f"{path} [degrees]")


# ------------------------------------------------------- certificate files


def _toml_value(v) -> str:
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{ " + ", ".join(f"{k} = {_toml_value(x)}" for k, x in v.items()) + " }"
    raise TypeError(f"cannot encode {type(v).__name__}")


def dumps_tables(tables: Dict[str, Dict[str, Any]], header: str = "") -> str:
    """Minimal TOML writer for flat tables of scalars, strings and lists."""
    lines = [f"# {line}" for line in header.splitlines()] if header else []
    for name, tab in tables.items():
        if lines:
            lines.append("")
        lines.append(f"[{name}]")
        for k, v in tab.items():
            if v is None:
                continue
            lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


def certificate_tables(cert: CertificatePair, metadata: Optional[Dict[str, Any]] = None):
    tables = {
        "certificates": {
            "V": cert.V.to_string(),
            "h": cert.h.to_string(),
            "kappa_V": list(cert.kappa_V.coeffs),
            "kappa_h": list(cert.kappa_h.coeffs),
        }
    }
    if metadata:
        tables["metadata"] = metadata
    return tables


def save_certificates(path, cert: CertificatePair, metadata: Optional[Dict[str, Any]] = None) -> None:
    Path(path).write_text(dumps_tables(certificate_tables(cert, metadata), "CLF/CBF certificate pair"))


def load_certificates(path, variables: VariableSet) -> CertificatePair:
    data = _read_toml(path)
    _check_keys(data, {"certificates", "metadata"}, str(path))
    if "certificates" not in data:
        raise ProblemError(f"{path}: missing [certificates] table")
    return certificates_from_table(data["certificates"], variables, f"{path} [certificates]")
