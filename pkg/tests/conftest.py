import numpy as np
import pytest

from tilevm.compiler import TargetInfo, compile
from tilevm.fixtures import data_dir, load_lenet5
from tilevm.tensorio import load_tensor

ACCEPTANCE_RESULTS: list[str] = []


@pytest.fixture(scope="session")
def lenet():
    return load_lenet5()


@pytest.fixture(scope="session")
def lenet_module(lenet):
    return compile(lenet, TargetInfo(worker_count=2))


@pytest.fixture(scope="session")
def lenet_inputs():
    return [load_tensor(data_dir() / f"lenet5_input{i}.tensor") for i in range(3)]


@pytest.fixture(scope="session")
def lenet_expected():
    return [load_tensor(data_dir() / f"lenet5_expected{i}.tensor") for i in range(3)]


@pytest.fixture
def rng(request):
    return np.random.default_rng(abs(hash(request.node.name)) % 2**32)


@pytest.fixture
def record_acceptance():
    def record(line: str) -> None:
        ACCEPTANCE_RESULTS.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
