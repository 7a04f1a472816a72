from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from clfcbf.system import CertificatePair, make_toy_system

settings.register_profile("default", deadline=None, print_blob=True)
settings.load_profile("default")

PROBLEMS = Path(__file__).resolve().parents[1] / "src" / "clfcbf" / "problems"


@pytest.fixture(scope="session")
def toy():
    return make_toy_system()


@pytest.fixture(scope="session")
def toy_init(toy):
    sys, _ = toy
    x1, x2, x3 = sys.variables.polys()
    V = (x1 * x1 + x2 * x2 + x3 * x3) * 10
    return CertificatePair(V, 1 - V, 0.1, 0.1)


@pytest.fixture(scope="session")
def problems_dir():
    return PROBLEMS


def ring_states(radius=0.8, count=12):
    from clfcbf.system import toy_chart_to_state

    phi = np.linspace(0.0, 2 * np.pi, count, endpoint=False)
    ra, rb = (radius, radius) if np.isscalar(radius) else radius
    return toy_chart_to_state(ra * np.cos(phi), rb * np.sin(phi))
