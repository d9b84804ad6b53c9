from __future__ import annotations

from pathlib import Path
from typing import Callable

import numpy as np
import pytest

from safeproj.metric import as_embedding

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"

_CRITERIA: list[str] = []


@pytest.fixture
def report() -> Callable[[int, bool, str], None]:
    """Record one acceptance line; printed in the terminal summary."""

    def _record(number: int, ok: bool, detail: str) -> None:
        _CRITERIA.append(f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {detail}")
        print(_CRITERIA[-1])

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):  # noqa: ARG001
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


class DictEmbedder:
    """Embedder backed by an explicit text -> vector table."""

    kind = "table"

    def __init__(self, table: dict[str, np.ndarray]) -> None:
        self.table = {k: as_embedding(v) for k, v in table.items()}
        self.dim = len(next(iter(self.table.values())))
        self.calls = 0

    def embed(self, text: str) -> np.ndarray:
        self.calls += 1
        return self.table[text]


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES
