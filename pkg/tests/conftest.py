import numpy as np
import pytest

from deformable_hmr.config import DecoderConfig, RunConfig

TINY = DecoderConfig(
    model_dim=16, num_heads=4, num_groups=2, offset_range=1.0, num_layers=1,
    context_channels=8, context_height=3, context_width=4, pe_type="relative",
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_run():
    return RunConfig(decoder=TINY, steps=3, num_samples=4, batch_size=4, num_vertices=48)


# acceptance lines, printed once at the end of the session
ACCEPTANCE_LINES = {}


def record_criterion(number, name, passed, detail):
    line = f"[criterion {number:>2}] {'PASS' if passed else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
