import numpy as np
import pytest
from hypothesis import settings

from bmitl.synthgen import DriftParams, make_profile, synth_session

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile("default")


@pytest.fixture(scope="session")
def profile():
    return make_profile(3)


@pytest.fixture(scope="session")
def session12(profile):
    return synth_session(profile, DriftParams.preset("none"), 12, seed=11, session_id="s12")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance verdict lines ------------------------------------------------------

_VERDICTS: dict[int, str] = {}


def record_verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    _VERDICTS[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
