import math

import numpy as np
import pytest

from clfcbf.problem import (
    ProblemError,
    dumps_tables,
    load_certificates,
    load_degrees,
    load_problem,
    load_problem_data,
    save_certificates,
)
from clfcbf.system import CertificatePair, toy_chart_to_state

from conftest import ring_states

EXPLICIT = """
[system]
variables = ["a", "b"]
f = ["b", "-a"]
g = [["0"], ["1"]]
A = [[1.0], [-1.0]]
c = [2.0, 2.0]

[unsafe]
mode = "intersection"
l = ["a - 3", "b - 3"]

[certificates]
V = "a^2 + b^2"
h = "1 - a^2"
kappa_V = [0.2, 0.01]
"""


def write(tmp_path, text, name="p.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


@pytest.mark.parametrize("name", ["toy", "toy_clf_only", "toy_incompatible", "double_integrator", "quadrotor"])
def test_shipped_problems_load(problems_dir, name):
    prob = load_problem(problems_dir / f"{name}.toml")
    assert prob.system.nx in (2, 3, 13)
    assert prob.candidate_states().shape[1] == prob.system.nx


def test_toy_problem_contents(problems_dir):
    prob = load_problem(problems_dir / "toy.toml")
    assert prob.unsafe.mode == "union"
    assert prob.degrees.s2 == 4 and prob.degrees.s0 == 2
    np.testing.assert_allclose(prob.candidate_states(), ring_states(), atol=1e-15)
    assert prob.chart.labels == ("theta", "gamma")
    assert prob.chart.resolution == (200, 200)


def test_explicit_system(tmp_path):
    prob = load_problem(write(tmp_path, EXPLICIT))
    assert prob.system.variables.names == ["a", "b"]
    assert prob.unsafe.mode == "intersection"
    assert prob.certificates.kappa_V(1.0) == pytest.approx(0.21)
    assert prob.certificates.kappa_h(1.0) == pytest.approx(0.1)
    np.testing.assert_array_equal(prob.system.dynamics(np.array([1.0, 2.0]), [0.5]), [2.0, -0.5])


@pytest.mark.parametrize(
    "patch,where",
    [
        ({"system": {"builtin": "toy", "colour": 1}}, "[system]"),
        ({"system": {"builtin": "toy"}, "degrees": {"s9": 1}}, "[degrees]"),
        ({"system": {"builtin": "toy"}, "synthesis": {"iters": 1}}, "[synthesis]"),
        ({"system": {"builtin": "toy"}, "synthesis": {"candidate_ring": {"size": 1}}}, "candidate_ring"),
        ({"system": {"builtin": "toy"}, "chart": {"zoom": 2}}, "[chart]"),
        ({"system": {"builtin": "toy"}, "solver": {"speed": 2}}, "[solver]"),
        ({"system": {"builtin": "toy"}, "extra": {}}, "problem file"),
        ({"system": {"builtin": "quadrotor", "params": {"mass": 1, "colour": 2}}}, "[system.params]"),
    ],
)
def test_unknown_keys_are_located(patch, where):
    with pytest.raises(ProblemError) as exc:
        load_problem_data(patch)
    assert where in str(exc.value) and "unknown key" in str(exc.value)


def test_bad_polynomial_names_location():
    data = {"system": {"builtin": "toy"}, "certificates": {"V": "x1^2 + z", "h": "1"}}
    with pytest.raises(ProblemError) as exc:
        load_problem_data(data)
    assert "[certificates].V" in str(exc.value) and "z" in str(exc.value)


def test_structural_errors():
    with pytest.raises(ProblemError):
        load_problem_data({})
    with pytest.raises(ProblemError):
        load_problem_data({"system": {"builtin": "pendulum"}})
    with pytest.raises(ProblemError):
        load_problem_data({"system": {"builtin": "toy", "f": ["x1"]}})
    with pytest.raises(ProblemError):
        load_problem_data({"system": {"builtin": "toy"}, "synthesis": {"init": "random"}})
    with pytest.raises(ProblemError):
        load_problem_data({"system": {"builtin": "toy"}, "certificates": {"V": "x1^2 + 1", "h": "1"}})
    with pytest.raises(ProblemError):
        load_problem_data({"system": {"builtin": "toy"}, "chart": {"axes": [0, 0]}})
    with pytest.raises(ProblemError):
        load_problem_data({"system": {"builtin": "toy"}, "chart": {"coordinates": "polar"}})


def test_toml_syntax_error_and_missing_file(tmp_path):
    with pytest.raises(ProblemError):
        load_problem(write(tmp_path, "[system\nbuiltin = 'toy'"))
    with pytest.raises(FileNotFoundError):
        load_problem(tmp_path / "absent.toml")


def test_certificate_round_trip(tmp_path, toy, toy_init):
    sys, _ = toy
    path = tmp_path / "cert.toml"
    save_certificates(path, toy_init, {"iterations": 3, "note": 'quote " inside'})
    back = load_certificates(path, sys.variables)
    assert back.V == toy_init.V and back.h == toy_init.h
    assert back.kappa_V == toy_init.kappa_V and back.kappa_h == toy_init.kappa_h


def test_certificate_round_trip_is_lossless(tmp_path, toy):
    sys, _ = toy
    rng = np.random.default_rng(2)
    x1, x2, x3 = sys.variables.polys()
    V = x1 * x1 * float(rng.uniform()) + x2 * x3 * float(rng.uniform()) * 1e-7 + x3 * x3 * math.pi
    pair = CertificatePair(V, 1.0 - V * math.e, 0.1, 0.3)
    path = tmp_path / "c.toml"
    save_certificates(path, pair)
    back = load_certificates(path, sys.variables)
    assert back.V == pair.V and back.h == pair.h


def test_certificate_file_rejects_extra_tables(tmp_path, toy):
    path = write(tmp_path, '[certificates]\nV = "x1^2"\nh = "1"\n[system]\nbuiltin = "toy"\n', "c.toml")
    with pytest.raises(ProblemError):
        load_certificates(path, toy[0].variables)


def test_degrees_file(tmp_path):
    deg = load_degrees(write(tmp_path, "[degrees]\ns0 = 0\ns2 = 2\n", "d.toml"))
    assert deg.s0 == 0 and deg.s2 == 2 and deg.s3 == 4


def test_ring_with_two_radii(problems_dir):
    prob = load_problem(problems_dir / "toy_clf_only.toml")
    X = prob.candidate_states()
    ring = prob.synthesis["candidate_ring"]
    ra, rb = ring["radius"]
    np.testing.assert_allclose(X[0], toy_chart_to_state(ra, 0.0), atol=1e-15)
    assert np.abs(prob.system.e_values(X)).max() <= 1e-12


def test_state_chart_slice(problems_dir):
    prob = load_problem(problems_dir / "quadrotor.toml")
    a = np.array([[0.1]])
    b = np.array([[0.2]])
    X = prob.chart.to_state(a, b, 13)
    assert X.shape == (1, 1, 13)
    assert X[0, 0, 4] == 0.1 and X[0, 0, 6] == 0.2


def test_dumps_tables_is_valid_toml():
    import sys as _sys

    if _sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    text = dumps_tables({"t": {"s": "a\\b\"c", "f": 1e-300, "i": 3, "b": True, "l": [1.5, 2.0]}}, "hdr")
    back = tomllib.loads(text)["t"]
    assert back == {"s": "a\\b\"c", "f": 1e-300, "i": 3, "b": True, "l": [1.5, 2.0]}
