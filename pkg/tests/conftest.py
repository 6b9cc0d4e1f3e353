import pytest

import desk as desk_module

ACCEPTANCE_LINES = []


def pytest_addoption(parser):
    parser.addoption("--mnist-dir", default=None,
                     help="directory holding MNIST IDX files; enables the MNIST tests")


@pytest.fixture(scope="session")
def mnist_dir(request):
    path = request.config.getoption("--mnist-dir")
    if path is None:
        pytest.skip("MNIST tests need --mnist-dir")
    return path


@pytest.fixture(scope="session")
def desk():
    """The seed-0 desk pipeline, trained once per session."""
    return desk_module.build(seed=0)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
