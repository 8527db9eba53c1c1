import numpy as np
import pytest

from crispe.network import FeedForwardNet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_net(rng, widths=(4, 5, 3), hidden="tanh", bias_scale=0.5):
    return FeedForwardNet.random(list(widths), rng, hidden=hidden, bias_scale=bias_scale)


def rand_psd(rng, n, rank=None):
    B = rng.standard_normal((n, rank or n))
    return B @ B.T


def rel(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture(scope="session")
def desk_task():
    """The default synthetic capability/edit pair with its pretrained MLP."""
    from crispe.experiments import DeskTask, prepare_desk_task

    return prepare_desk_task(DeskTask())


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts at the end of the run, independent of output capture."""
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
