import numpy as np
import pytest
from hypothesis import settings

from seqground import numkernel as nk

from oracles import central_difference, max_rel_error

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

GRAD_TOL = 1e-4

# filled by the acceptance module, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def analytic_and_numeric(build, tensors, h=1e-5):
    """Gradients of ``build()`` (a 1x1 loss) by the tape and by central differences."""
    nk.zero_grad(tensors)
    with nk.ComputeTape() as tape:
        loss = build()
    tape.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    numeric = central_difference(lambda: build().item(), [t.data for t in tensors], h)
    return analytic, numeric


def gradcheck(build, tensors, h=1e-5):
    analytic, numeric = analytic_and_numeric(build, tensors, h)
    return max(max_rel_error(a, n) for a, n in zip(analytic, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
