from contextlib import contextmanager

import numpy as np
import pytest

from pdit.engine import default_dtype

# acceptance criterion -> list of (part, ok, detail); filled by test_acceptance
ACCEPTANCE: dict[str, list[tuple[str, bool, str]]] = {}


@contextmanager
def criterion(ac: str, part: str):
    """Record whether the body passes; ``notes`` collects detail strings."""
    notes: list[str] = []
    try:
        yield notes
    except BaseException as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        ACCEPTANCE.setdefault(ac, []).append((part, False, "; ".join(notes + [msg[:160]])))
        line = f"{ac} FAIL [{part}] {msg[:160]}"
        print(line)
        raise
    else:
        ACCEPTANCE.setdefault(ac, []).append((part, True, "; ".join(notes)))
        print(f"{ac} PASS [{part}] {'; '.join(notes)}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for ac in sorted(ACCEPTANCE, key=lambda s: int(s.split("-")[1])):
        parts = ACCEPTANCE[ac]
        ok = all(p[1] for p in parts)
        detail = " | ".join(f"{name}: {'ok' if good else 'FAILED'}{' (' + d + ')' if d else ''}"
                            for name, good, d in parts)
        terminalreporter.write_line(f"{ac} {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
