import numpy as np
import pytest

from stiffinfer.mechanism import load_bundled
from stiffinfer.scenarios import scenario_h2_autoignition, scenario_robertson


@pytest.fixture(scope="session")
def mech():
    return load_bundled()


@pytest.fixture(scope="session")
def robertson():
    return scenario_robertson()


@pytest.fixture(scope="session")
def h2():
    return scenario_h2_autoignition()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_jacobian(f, x, rel=1e-6, floor=1e-8):
    """Central-difference Jacobian of f at x; used as an independent oracle."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        h = max(floor, rel * abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        J[:, j] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2 * h)
    return J


_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one summary line per acceptance criterion."""
    def record(n, ok, detail, elapsed, budget):
        ok = bool(ok) and elapsed < budget
        line = (f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}  "
                f"[{elapsed:.1f} s / budget {budget:.0f} s]")
        _ACCEPTANCE[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
