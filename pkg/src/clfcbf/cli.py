"""Command-line front end.

Exit codes: 0 verified or success, 2 unknown (no certificate found), 3 an
incompatibility witness was found, 1 usage, input or precondition errors.
"""

from __future__ import annotations

import argparse
import sys as _sys
import time
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .certify import MultiplierDegrees, VerificationOutcome, verify_compatibility, verify_safety
from .conic import SolverSettings
from .plotting import plot_region, render_svg
from .polyalg import ParseError
from .problem import Problem, ProblemError, load_certificates, load_degrees, load_problem, save_certificates
from .simulate import PreconditionError, simulate
from .synthesize import (
    InitNotVerified,
    NotStabilizable,
    RiccatiNoConvergence,
    SynthesisConfig,
    lqr_initialize,
    synthesize,
)
from .system import CertificatePair

EXIT_OK, EXIT_ERROR, EXIT_UNKNOWN, EXIT_WITNESS = 0, 1, 2, 3

GRAMMAR = """\
Polynomial strings:
    expr   = term , { ( "+" | "-" ) , term } ;
    term   = unary , { "*" , unary } ;
    unary  = ( "+" | "-" ) , unary | power ;
    power  = atom , [ "^" , INTEGER ] ;
    atom   = NUMBER | IDENTIFIER | "(" , expr , ")" ;
IDENTIFIER must be a declared state variable; INTEGER is a nonnegative literal.
Problem files are TOML with tables [system], [unsafe], [certificates],
[degrees], [synthesis], [solver] and [chart]; see README.md."""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--solver-tol", type=float, help="absolute and relative solver tolerance")
    p.add_argument("--solver-max-iters", type=int, help="solver iteration limit")
    p.add_argument("--solver-time-limit", type=float, help="solver wall-clock limit in seconds")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clfcbf", description="Compatible CLF/CBF verification and synthesis by SOS programming.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    v = sub.add_parser("verify", help="search for a compatibility certificate")
    v.add_argument("problem")
    v.add_argument("--cert", help="certificate file overriding [certificates]")
    v.add_argument("--degrees-file", help="TOML file with a [degrees] table")
    v.add_argument("--report", help="write the text report here")
    v.add_argument("--clf-only", action="store_true", help="certify V alone under the input limits")
    _solver_flags(v)

    s = sub.add_parser("verify-safety", help="check that {h >= 0} avoids the unsafe set")
    s.add_argument("problem")
    s.add_argument("--cert", help="certificate file overriding [certificates]")
    s.add_argument("--degrees-file")
    s.add_argument("--report")
    _solver_flags(s)

    y = sub.add_parser("synthesize", help="alternate multiplier search and certificate update")
    y.add_argument("problem")
    y.add_argument("--out", required=True, help="certificate file to write")
    y.add_argument("--max-iter", type=int)
    y.add_argument("--trace", help="trace CSV to write")
    y.add_argument("--degrees-file")
    _solver_flags(y)

    m = sub.add_parser("simulate", help="closed-loop rollout under the CLF-CBF-QP")
    m.add_argument("problem")
    m.add_argument("--cert", help="certificate file (defaults to [certificates])")
    m.add_argument("--x0", required=True, help='initial state "v1,...,vn"')
    m.add_argument("--tf", type=float, default=10.0)
    m.add_argument("--dt", type=float, default=1e-3)
    m.add_argument("--out", required=True, help="trajectory CSV to write")
    _solver_flags(m)

    r = sub.add_parser("plot-region", help="label a 2-D chart and write CSV and SVG")
    r.add_argument("problem")
    r.add_argument("--cert", help="certificate file overriding [certificates]")
    r.add_argument("--out", required=True, help="chart CSV to write")
    r.add_argument("--svg", help="SVG path (default: next to the CSV)")
    r.add_argument("--resolution", help='grid size "NA,NB" overriding [chart]')
    _solver_flags(r)
    return parser


# ---------------------------------------------------------------- helpers


def _settings(problem: Problem, args) -> SolverSettings:
    s = problem.solver
    if args.solver_tol is not None:
        s = replace(s, abs_tol=args.solver_tol, rel_tol=args.solver_tol)
    if args.solver_max_iters is not None:
        s = replace(s, max_iters=args.solver_max_iters)
    if args.solver_time_limit is not None:
        s = replace(s, time_limit=args.solver_time_limit)
    return s


def _degrees(problem: Problem, args) -> MultiplierDegrees:
    path = getattr(args, "degrees_file", None)
    return load_degrees(path) if path else problem.degrees


def _pair(problem: Problem, args) -> CertificatePair:
    path = getattr(args, "cert", None)
    if path:
        return load_certificates(path, problem.variables)
    if problem.certificates is None:
        raise UsageError("no certificates: add a [certificates] table or pass --cert")
    return problem.certificates


def _emit(text: str, path: Optional[str], out) -> None:
    print(text, end="", file=out)
    if path:
        Path(path).write_text(text)


def verification_report(outcome: VerificationOutcome, source: str) -> str:
    lines = [f"problem: {source}", f"status: {outcome.status}"]
    if outcome.reason:
        lines.append(f"reason: {outcome.reason}")
    lines.append(f"parity_padded: {str(outcome.parity_padded).lower()}")
    for k, v in outcome.size.items():
        lines.append(f"size.{k}: {v}")
    if outcome.certificate is not None:
        lines.append("checks:")
        lines.append("  multiplier,passed,min_eig,residual")
        for name, rep in outcome.certificate.checks.items():
            lines.append(f"  {name},{str(rep.passed).lower()},{rep.min_eig!r},{rep.residual!r}")
    for k, v in outcome.timings.items():
        lines.append(f"time.{k}: {v:.4f}")
    if outcome.status != "verified":
        lines.append("note: unknown means no certificate at these degrees; it is not a proof of "
                     "incompatibility (run plot-region to search for a pointwise witness)")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- commands


def cmd_verify(args, out) -> int:
    problem = load_problem(args.problem)
    pair = _pair(problem, args)
    outcome = verify_compatibility(problem.system, pair, _degrees(problem, args), _settings(problem, args),
                                   clf_only=args.clf_only)
    _emit(verification_report(outcome, args.problem), args.report, out)
    return EXIT_OK if outcome.verified else EXIT_UNKNOWN


def cmd_verify_safety(args, out) -> int:
    problem = load_problem(args.problem)
    if problem.unsafe is None:
        raise UsageError("verify-safety needs an [unsafe] table")
    pair = _pair(problem, args)
    t0 = time.perf_counter()
    res = verify_safety(pair.h, problem.unsafe, _degrees(problem, args), _settings(problem, args),
                        variables=problem.variables)
    lines = [f"problem: {args.problem}", f"status: {res.status}", f"mode: {problem.unsafe.mode}"]
    lines.append("parts:")
    lines.append("  part,status,multiplier,passed,min_eig,residual")
    for j, (st, cert, _) in enumerate(res.parts):
        if cert is None:
            lines.append(f"  {j},{st},,,,")
            continue
        for name, rep in cert.checks.items():
            lines.append(f"  {j},{st},{name},{str(rep.passed).lower()},{rep.min_eig!r},{rep.residual!r}")
    for j, (_, _, reason) in enumerate(res.parts):
        if reason:
            lines.append(f"part {j} reason: {reason}")
    lines.append(f"time.total_s: {time.perf_counter() - t0:.4f}")
    _emit("\n".join(lines) + "\n", args.report, out)
    return EXIT_OK if res.verified else EXIT_UNKNOWN


def synthesis_config(problem: Problem, args) -> SynthesisConfig:
    syn = problem.synthesis
    fields = {k: syn[k] for k in ("kappa_V", "kappa_h", "c1", "c2", "h_lower", "h_upper", "max_iter",
                                  "V_degree", "h_degree", "pd_epsilon", "objective_improvement_tol",
                                  "backoff_rel", "backoff_abs") if k in syn}
    if args.max_iter is not None:
        fields["max_iter"] = args.max_iter
    if problem.certificates is not None:
        fields.setdefault("kappa_V", problem.certificates.kappa_V.linear)
        fields.setdefault("kappa_h", problem.certificates.kappa_h.linear)
    states = problem.candidate_states()
    if states.shape[0] == 0:
        raise UsageError("synthesize needs [synthesis].candidates or candidate_ring")
    try:
        return SynthesisConfig(states, degrees=_degrees(problem, args), settings=_settings(problem, args),
                               **fields)
    except (TypeError, ValueError) as exc:
        raise ProblemError(f"[synthesis]: {exc}") from exc


def cmd_synthesize(args, out) -> int:
    problem = load_problem(args.problem)
    cfg = synthesis_config(problem, args)
    syn = problem.synthesis
    if syn.get("init", "certificates") == "lqr":
        init = lqr_initialize(problem.system, scale=float(syn.get("lqr_scale", 1.0)),
                              normal_weight=float(syn.get("lqr_normal_weight", 1.0)),
                              kappa_V=cfg.kappa_V, kappa_h=cfg.kappa_h).pair
    else:
        if problem.certificates is None:
            raise UsageError("init = 'certificates' needs a [certificates] table")
        init = problem.certificates
    clf_only = bool(syn.get("clf_only", False))
    try:
        trace = synthesize(problem.system, problem.unsafe, init, cfg, clf_only=clf_only,
                           log=lambda msg: print(msg, file=out))
    except InitNotVerified as exc:
        print(f"initial pair not verified: {exc.reason}", file=out)
        return EXIT_UNKNOWN
    final = trace.final
    meta = {
        "iterations": final.iteration,
        "objective": float(final.objective),
        "covered": final.covered,
        "candidates": int(cfg.candidate_states.shape[0]),
        "clf_only": clf_only,
        "stop_reason": trace.reason,
        "degrees": {k: v for k, v in vars(cfg.degrees).items() if v is not None},
    }
    save_certificates(args.out, final.pair, meta)
    if args.trace:
        Path(args.trace).write_text(trace.to_csv())
    print(f"stopped: {trace.reason}", file=out)
    print(f"final: iteration {final.iteration} objective {final.objective!r} covered "
          f"{final.covered}/{cfg.candidate_states.shape[0]}", file=out)
    return EXIT_OK


def _parse_vector(text: str, n: int, flag: str) -> np.ndarray:
    try:
        vals = [float(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError as exc:
        raise UsageError(f"{flag}: {exc}") from exc
    if len(vals) != n:
        raise UsageError(f"{flag}: expected {n} comma-separated values, got {len(vals)}")
    return np.array(vals)


def cmd_simulate(args, out) -> int:
    problem = load_problem(args.problem)
    pair = _pair(problem, args)
    x0 = _parse_vector(args.x0, problem.system.nx, "--x0")
    traj = simulate(problem.system, pair, x0, args.tf, args.dt, _settings(problem, args))
    Path(args.out).write_text(traj.to_csv(problem.variables.names, problem.system.nu))
    print(f"steps: {len(traj.inputs)}", file=out)
    for ev in traj.events:
        print("event: " + ", ".join(f"{k}={v}" for k, v in ev.items()), file=out)
    if traj.qp_infeasible:
        return EXIT_WITNESS
    return EXIT_UNKNOWN if traj.events else EXIT_OK


def cmd_plot_region(args, out) -> int:
    problem = load_problem(args.problem)
    pair = _pair(problem, args)
    spec = problem.chart
    if args.resolution:
        res = _parse_vector(args.resolution, 2, "--resolution")
        if np.any(res < 0) or np.any(res != np.round(res)):
            raise UsageError("--resolution: expected two nonnegative integers")
        spec = replace(spec, resolution=(int(res[0]), int(res[1])))
    chart = plot_region(problem.system, pair, problem.unsafe, spec, _settings(problem, args))
    Path(args.out).write_text(chart.to_csv(problem.variables.names))
    svg = args.svg or str(Path(args.out).with_suffix(".svg"))
    render_svg(chart, svg)
    counts = {lab: chart.count(lab) for lab in
              ("unsafe", "incompatible-point", "compatible-region-member", "outside", "off-manifold")}
    print("cells: " + ", ".join(f"{k}={v}" for k, v in counts.items()), file=out)
    print(f"lp_infeasible: {int(np.count_nonzero(chart.lp_status == 'infeasible'))}", file=out)
    if counts["incompatible-point"]:
        i, j = chart.incompatible_cells()[0]
        x = ",".join(repr(float(v)) for v in chart.states[i, j])
        print(f"witness: state ({x}) has h >= 0, V <= 1 and an infeasible pointwise LP", file=out)
        return EXIT_WITNESS
    return EXIT_OK


COMMANDS = {
    "verify": cmd_verify,
    "verify-safety": cmd_verify_safety,
    "synthesize": cmd_synthesize,
    "simulate": cmd_simulate,
    "plot-region": cmd_plot_region,
}


def run(argv: Optional[List[str]] = None, out=None, err=None) -> int:
    out = out or _sys.stdout
    err = err or _sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("clfcbf: a subcommand is required")
        return COMMANDS[args.command](args, out)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(str(exc), file=err)
        print(parser.format_usage().rstrip(), file=err)
        print(GRAMMAR, file=err)
        return EXIT_ERROR
    except (ProblemError, ParseError) as exc:
        print(f"error: {exc}", file=err)
        print(GRAMMAR, file=err)
        return EXIT_ERROR
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=err)
        return EXIT_ERROR
    except (PreconditionError, NotStabilizable, RiccatiNoConvergence, ValueError) as exc:
        print(f"error: {exc}", file=err)
        return EXIT_ERROR


def main() -> None:
    _sys.exit(run())


if __name__ == "__main__":
    main()
