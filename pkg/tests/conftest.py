import numpy as np
import pytest

from sealpose import autodiff as ad
from sealpose.params import ParamStore
from sealpose.skeleton import h36m17


def store_of(**arrays) -> ParamStore:
    store = ParamStore()
    for name, value in arrays.items():
        store.add(name, value)
    return store


def directional_error(f, arrays: dict, rng: np.random.Generator, step: float = 1e-6) -> float:
    """Relative mismatch between grad . v and a central difference along a random v."""
    store = store_of(**arrays)
    nodes = store.nodes()
    grads = ad.backward(f(nodes), nodes)
    direction = {k: rng.normal(size=np.shape(v)) for k, v in arrays.items()}
    analytic = sum(float(np.sum(grads[k] * direction[k])) for k in arrays)

    def at(sign):
        shifted = {k: ad.Node(np.asarray(v) + sign * step * direction[k]) for k, v in arrays.items()}
        return float(f(shifted).value)

    numeric = (at(1) - at(-1)) / (2 * step)
    return abs(analytic - numeric) / max(1.0, abs(numeric))


@pytest.fixture(scope="session")
def spec():
    return h36m17()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
