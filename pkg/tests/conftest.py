import math

import numpy as np
import pytest

from nnpforge.model import ModelConfig, init_params
from nnpforge.surrogate import SurrogateSpec, generate_minima, generate_nonminima


@pytest.fixture(scope="session")
def spec():
    return SurrogateSpec()


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(n_atom_features=8, n_interactions=2, n_rbf=8, readout_hidden=8)


@pytest.fixture(scope="session")
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=4, energy_offset=-3.0)


@pytest.fixture(scope="session")
def minima(spec):
    return generate_minima(spec, [3, 4], 24, seed=3)


@pytest.fixture(scope="session")
def nonminima(spec, minima):
    return generate_nonminima(spec, minima.clusters[:8], temperature=300.0, steps=400, seed=5, per_minimum=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def erf_series(x, tol=1e-17):
    """Maclaurin series 2/sqrt(pi) * sum (-1)^n x^(2n+1) / (n! (2n+1))."""
    total, term, n = 0.0, x, 0
    while True:
        add = term / (2 * n + 1)
        total += add
        if abs(add) < tol and n > 5:
            break
        n += 1
        term *= -x * x / n
    return 2.0 / math.sqrt(math.pi) * total


def erf_complement_series(x):
    """Continued fraction for erfc, used where the Maclaurin sum cancels badly."""
    t = 0.0
    for k in range(200, 0, -1):
        t = (k / 2) / (x + t)
    return 1.0 - math.exp(-x * x) / math.sqrt(math.pi) / (x + t)


def erf_oracle(x):
    s = math.copysign(1.0, x)
    x = abs(x)
    return s * (erf_series(x) if x < 3 else erf_complement_series(x))


def erf_bisect_inverse(y, lo=-10.0, hi=10.0):
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if erf_oracle(mid) < y:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record a one-line pass/fail verdict for an acceptance criterion."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
