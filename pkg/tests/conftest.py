from importlib import resources

import pytest

from ctrlsynth.smm import load_model
from ctrlsynth.statemachine import build_state_machine
from ctrlsynth.trace import make_stream


def spec_path(name: str):
    return resources.files("ctrlsynth") / "specs" / f"{name}.json"


@pytest.fixture(scope="session")
def oracle_model():
    return load_model(spec_path("oracle_4g"))


@pytest.fixture(scope="session")
def sm4():
    return build_state_machine("4g")


@pytest.fixture(scope="session")
def sm5():
    return build_state_machine("5g")


def stream(events, ue_id="u1", device_type="phone"):
    """Shorthand: ``stream([(0, "SRV_REQ"), (3.5, "S1_CONN_REL")])``."""
    return make_stream(ue_id, events, device_type)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
