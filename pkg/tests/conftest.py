"""Collects one pass/fail line per acceptance criterion for the terminal summary."""
import contextlib

import pytest

CRITERIA: dict = {}


@contextlib.contextmanager
def criterion(label: str, title: str):
    """Records the outcome of the body under ``label``; failures still propagate."""
    detail = {}
    try:
        yield detail
    except BaseException as exc:
        if isinstance(exc, pytest.skip.Exception):
            raise
        line = f"criterion {label:>3} FAIL  {title}: {type(exc).__name__}: {exc}".splitlines()[0]
        CRITERIA[label] = line
        print(line)
        raise
    extra = ", ".join(f"{k}={v}" for k, v in detail.items())
    line = f"criterion {label:>3} PASS  {title}" + (f" ({extra})" if extra else "")
    CRITERIA[label] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    order = sorted(CRITERIA, key=lambda k: (int(k.rstrip("ab")), k))
    for label in order:
        terminalreporter.write_line(CRITERIA[label])
