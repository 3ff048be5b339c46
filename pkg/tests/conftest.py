import numpy as np
import pytest

from c2vkd.tensor import Tensor, backward, finite_diff_grad, rel_error


def grad_check(f, x0: np.ndarray, eps: float = 1e-6):
    """Return (analytic, numeric) gradients of scalar ``f`` at ``x0``."""
    x = Tensor(x0.copy(), requires_grad=True)
    backward(f(x))
    return x.grad, finite_diff_grad(f, Tensor(x0.copy()), eps)


def assert_grad_ok(f, x0, tol=1e-4, eps=1e-6):
    analytic, numeric = grad_check(f, np.asarray(x0, dtype=np.float64), eps)
    err = rel_error(analytic, numeric)
    assert err < tol, f"relative gradient error {err:.3g} >= {tol}"
    return err


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
