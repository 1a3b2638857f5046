import pytest
import torch

from tarmesh import bodymodel as bm
from tarmesh.datasynth import generate_dataset


@pytest.fixture(scope="session")
def body():
    return bm.make_synthetic_model(seed=0)


@pytest.fixture(scope="session")
def tiny_body():
    return bm.make_synthetic_model(bm.SyntheticBodyConfig(n_vertices=120), seed=0)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(2, 12, seed=3)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


_criteria: list = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; tests marked ``criterion(n, name)`` call it with (ok, detail)."""
    n, name = request.node.get_closest_marker("criterion").args
    seen = []

    def record(ok, detail):
        line = f"criterion {n} ({name}): {'PASS' if ok else 'FAIL'} - {detail}"
        seen.append(line)
        _criteria.append((n, line))
        print(line, flush=True)
        assert ok, line

    yield record
    if not seen:
        _criteria.append((n, f"criterion {n} ({name}): FAIL - raised before a verdict"))


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_criteria, key=lambda c: c[0]):
            terminalreporter.write_line(line)
