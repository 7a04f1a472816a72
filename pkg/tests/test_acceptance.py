"""Acceptance gate: one PASS/FAIL line per criterion.

The lines are printed outside pytest's capture, so they appear in a plain
``pytest -v`` run as well as with ``-s``.
"""

import math
import os
import subprocess
import sys as _sys
import time
from pathlib import Path

import numpy as np
import pytest

from clfcbf.certify import verify_compatibility, verify_safety_union
from clfcbf.conic import check_farkas
from clfcbf.plotting import plot_region
from clfcbf.problem import load_problem
from clfcbf.simulate import simulate
from clfcbf.synthesize import SynthesisConfig, check_positive_definite, lagrangian_step, synthesize
from clfcbf.system import PointwiseChecker, QuadrotorParams, make_quadrotor_system, toy_chart_to_state

from conftest import ring_states

ROOT = Path(__file__).resolve().parents[1]


class Gate:
    """Context manager that prints the criterion line on exit, pass or fail."""

    def __init__(self, capsys, number, title):
        self.capsys, self.number, self.title = capsys, number, title
        self.ok, self.detail = False, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        passed = self.ok and exc_type is None
        detail = self.detail
        if exc_type is not None:
            detail = f"{detail} ({exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''})"
        with self.capsys.disabled():
            print(f"\nACCEPTANCE {self.number} [{'PASS' if passed else 'FAIL'}] {self.title}: {detail}")
        return False


@pytest.fixture(scope="module")
def toy_problem(problems_dir):
    return load_problem(problems_dir / "toy.toml")


@pytest.fixture(scope="module")
def synthesis_run(toy_problem):
    p = toy_problem
    cfg = SynthesisConfig(p.candidate_states(), max_iter=10, objective_improvement_tol=-math.inf,
                          degrees=p.degrees)
    t0 = time.perf_counter()
    trace = synthesize(p.system, p.unsafe, p.certificates, cfg)
    return trace, cfg, time.perf_counter() - t0


def test_criterion_1_toy_verification(capsys, toy_problem):
    with Gate(capsys, 1, "toy initial pair verifies") as g:
        p = toy_problem
        assert (p.degrees.s0, p.degrees.s1, p.degrees.s2, p.degrees.s3) == (2, 2, 4, 4)
        t0 = time.perf_counter()
        out = verify_compatibility(p.system, p.certificates, p.degrees, tol=1e-6)
        elapsed = time.perf_counter() - t0
        checks = out.certificate.checks if out.certificate else {}
        g.detail = (f"status={out.status} checks={sorted(k for k, r in checks.items() if r.passed)} "
                    f"time={elapsed:.2f}s (budget 60s)")
        assert out.verified
        assert {"master", "s2", "s3"} <= set(checks) and all(r.passed for r in checks.values())
        assert elapsed <= 60
        g.ok = True


def test_criterion_2_incompatibility_witness(capsys, problems_dir):
    with Gate(capsys, 2, "grid search finds an incompatible state of the fixture pair") as g:
        p = load_problem(problems_dir / "toy_incompatible.toml")
        assert p.chart.resolution == (200, 200)
        t0 = time.perf_counter()
        chart = plot_region(p.system, p.certificates, p.unsafe, p.chart)
        elapsed = time.perf_counter() - t0
        chk = PointwiseChecker(p.system, p.certificates)
        verified = 0
        for cell in chart.incompatible_cells():
            x = chart.states[cell]
            V, h = chk.V_h(x)
            Lam, xi = chk.lambda_xi(x)
            if h >= 0 and V <= 1 and check_farkas(Lam, xi, chart.farkas[cell]):
                verified += 1
        g.detail = f"witness cells={verified} time={elapsed:.1f}s (budget 120s)"
        assert verified >= 1
        assert elapsed <= 120
        g.ok = True


def test_criterion_3_synthesis_growth(capsys, toy_problem, synthesis_run):
    with Gate(capsys, 3, "alternation grows the certified region") as g:
        p = toy_problem
        trace, cfg, elapsed = synthesis_run
        obj, cov = trace.objectives, trace.covered
        g.detail = (f"iterations={len(trace.entries) - 1} objective {obj[0]:.4g}->{obj[-1]:.4g} "
                    f"covered {cov[0]}->{cov[-1]}/{len(cfg.candidate_states)} time={elapsed:.0f}s")
        assert len(trace.entries) - 1 >= 10, trace.reason
        assert np.allclose(cfg.candidate_states, ring_states(0.8, 12), atol=1e-15)
        assert all(b <= a + 1e-6 for a, b in zip(obj, obj[1:]))
        assert cov[-1] > cov[0]
        for e in trace.entries:
            fresh = lagrangian_step(p.system, e.pair, p.unsafe, cfg.degrees)
            assert fresh.verified, f"iteration {e.iteration}: {fresh.reason}"
            if e.iteration:
                assert cfg.h_lower - 1e-9 <= e.pair.h.constant() <= cfg.h_upper + 1e-9
                rep = check_positive_definite(p.system, e.pair.V, cfg.pd_epsilon)
                assert rep is not None and rep.passed
        assert verify_safety_union(trace.final.pair.h, p.unsafe, cfg.degrees,
                                   variables=list(p.system.variables)).verified
        assert elapsed <= 30 * 60
        g.ok = True


def _initial_states(sys, pair, count=5):
    chk = PointwiseChecker(sys, pair)
    picks = []
    for theta, gamma in [(0.3, 0.2), (-0.3, -0.2), (0.5, -0.4), (-0.6, 0.5), (0.1, 0.6),
                         (0.7, 0.0), (-0.2, -0.6), (0.0, 0.4), (0.4, 0.4), (-0.5, 0.0)]:
        x = toy_chart_to_state(theta, gamma)
        V, h = chk.V_h(x)
        if V <= 0.9 and h >= 0.05:
            picks.append(x)
        if len(picks) == count:
            break
    return picks


def test_criterion_4_closed_loop(capsys, toy_problem, synthesis_run):
    with Gate(capsys, 4, "closed-loop invariants along five rollouts") as g:
        sys = toy_problem.system
        pair = synthesis_run[0].final.pair
        starts = _initial_states(sys, pair)
        assert len(starts) == 5
        kV = pair.kappa_V.linear
        worst = {"h": math.inf, "u": 0.0, "drift": 0.0, "events": 0}
        for x0 in starts:
            tr = simulate(sys, pair, x0, 10.0, 1e-3)
            worst["events"] += len(tr.events)
            assert len(tr.inputs) == 10000
            worst["h"] = min(worst["h"], float(tr.h_values.min()))
            worst["u"] = max(worst["u"], float(np.abs(tr.inputs).max()))
            worst["drift"] = max(worst["drift"], float(np.abs(sys.e_values(tr.states)).max()))
            env = tr.V_values[0] * np.exp(-kV * tr.times) * 1.02 + 1e-6
            assert np.all(tr.V_values <= env)
        g.detail = (f"min h={worst['h']:.3g} max|u|={worst['u']:.3g} drift={worst['drift']:.2g} "
                    f"infeasible events={worst['events']}")
        assert worst["events"] == 0
        assert worst["h"] >= -1e-3
        assert worst["u"] <= 1 + 1e-8
        assert worst["drift"] <= 1e-5
        g.ok = True


PROPERTY_SUITES = [
    "tests/test_polyalg.py::test_print_parse_round_trip",
    "tests/test_polyalg.py::test_ring_axioms",
    "tests/test_conic.py::test_farkas_exactness",
    "tests/test_sosprog.py::test_compile_recover_round_trip",
    "tests/test_certify.py::test_farkas_square_root_bridge",
    "tests/test_synthesize.py::test_double_integrator_care",
]


def test_criterion_5_property_suites(capsys):
    with Gate(capsys, 5, "property suites") as g:
        cmd = [_sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *PROPERTY_SUITES]
        res = subprocess.run(cmd, cwd=ROOT, capture_output=True, text=True)
        tail = res.stdout.strip().splitlines()[-1] if res.stdout.strip() else res.stderr.strip()
        g.detail = tail
        assert res.returncode == 0, res.stdout[-2000:]
        assert f"{len(PROPERTY_SUITES)} passed" in tail
        g.ok = True


def test_criterion_6_quadrotor_construction(capsys):
    with Gate(capsys, 6, "quadrotor model construction (full synthesis is opt-in)") as g:
        prm = QuadrotorParams()
        sys = make_quadrotor_system(prm)
        hover = np.full(4, prm.hover_thrust)
        balance = float(np.abs(sys.dynamics(np.zeros(13), hover)).max())
        g.detail = f"dims={sys.nx}/{sys.nu} e(0)={sys.e_values(np.zeros(13)).tolist()} hover residual={balance:.1e}"
        assert (sys.nx, sys.nu) == (13, 4)
        assert np.all(sys.e_values(np.zeros(13)) == 0)
        assert balance <= 1e-10
        g.ok = True


@pytest.mark.slow
@pytest.mark.skipif(not os.environ.get("CLFCBF_LONG"), reason="long-running example; set CLFCBF_LONG=1")
def test_quadrotor_end_to_end(problems_dir, tmp_path):
    from clfcbf.cli import run

    code = run(["synthesize", str(problems_dir / "quadrotor.toml"), "--out", str(tmp_path / "q.toml")])
    assert code == 0
