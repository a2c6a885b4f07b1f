import numpy as np
import pytest

from dosegp.backdoor import DoseResponsePrior
from dosegp.data import DoseGrid


def smooth_prior(T=5, scale=0.5, lengthscale=0.3, seed=None):
    """Small non-stationary grid prior used across sampler tests."""
    x = np.linspace(0.0, 1.0, T)
    d2 = (x[:, None] - x[None, :]) ** 2
    amp = 1.0 + x
    K = scale * np.exp(-0.5 * d2 / lengthscale**2) * np.outer(amp, amp) + 1e-6 * np.eye(T)
    mean = np.sin(2.5 * x) - 0.3
    return DoseResponsePrior(DoseGrid(x), mean, K, {})


@pytest.fixture
def prior5():
    return smooth_prior()


ACCEPTANCE_LINES = []


def record_acceptance(criterion: int, name: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {criterion} [{name}]: {'PASS' if ok else 'FAIL'}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
