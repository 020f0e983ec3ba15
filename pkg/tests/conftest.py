import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], print_blob=True
)
settings.load_profile("default")


def random_spd(rng: np.random.Generator, d: int, cond: float = 50.0) -> np.ndarray:
    """Random SPD matrix with eigenvalues spread over ``[1/sqrt(cond), sqrt(cond)]``."""
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    w = np.exp(rng.uniform(-0.5, 0.5, d) * np.log(cond))
    return (q * w) @ q.T


def sym_fd_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``f`` over symmetric perturbations of ``x``.

    Off-diagonal entries are perturbed in pairs, so the result is halved
    there to give the gradient w.r.t. a single entry of a symmetric matrix.
    """
    d = x.shape[0]
    g = np.zeros_like(x)
    for i in range(d):
        for j in range(i, d):
            e = np.zeros_like(x)
            e[i, j] = e[j, i] = h
            v = (f(x + e) - f(x - e)) / (2 * h)
            g[i, j] = g[j, i] = v if i == j else v / 2
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
