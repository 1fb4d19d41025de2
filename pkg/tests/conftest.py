import numpy as np
import pytest

from minidrive.encoder import EncoderConfig, VisionEncoder


@pytest.fixture(scope="session")
def encoder():
    return VisionEncoder(EncoderConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL acceptance line; the lines are echoed in the terminal summary."""
    lines = request.config.stash.setdefault(VERDICTS, [])

    def record(label: str, ok: bool, detail: str) -> bool:
        lines.append(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
