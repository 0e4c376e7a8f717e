"""Shared fixtures and the acceptance-criterion summary hook."""

import functools

import numpy as np
import pytest
import torch

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
CRITERION_RESULTS = {}


def record_criterion(num: int, passed: bool, detail: str = "") -> None:
    CRITERION_RESULTS[num] = (bool(passed), detail)


def criterion(num: int):
    """Wrap an acceptance test so it always leaves one pass/fail record."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                record_criterion(num, False, f"{type(exc).__name__}: {exc}")
                raise
            record_criterion(num, True, detail or "")

        return wrapper

    return deco


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERION_RESULTS):
        passed, detail = CRITERION_RESULTS[num]
        status = "PASS" if passed else "FAIL"
        line = f"criterion {num}: {status}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread_torch():
    # the sandbox has one core; keep torch from oversubscribing it
    torch.set_num_threads(1)
    yield
