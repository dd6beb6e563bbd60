import os

import numpy as np
import pytest

from fracspace.geometry import build_cover, builtin_domain

os.environ.setdefault("FRACSPACE_THREADS", "1")


@pytest.fixture(scope="session")
def square():
    return builtin_domain("square")


@pytest.fixture(scope="session")
def square_cover():
    """Cache of interior covers of the unit square by level."""
    cache = {}

    def get(level, side="interior"):
        key = (level, side)
        if key not in cache:
            cache[key] = build_cover(builtin_domain("square"), side, max_level=level)
        return cache[key]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record and print one PASS/FAIL line per acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
