"""Shared fixtures for the test suite."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from toolloop.compute import ExecutionLimits

FIXTURES = Path(__file__).parent / "fixtures"
GUEST_CASES = FIXTURES / "guest_cases"
DOCS_CORPUS = FIXTURES / "docs"


@pytest.fixture(scope="session")
def guest_case_manifest() -> dict[str, dict]:
    return json.loads((GUEST_CASES / "manifest.json").read_text(encoding="utf-8"))


@pytest.fixture()
def fast_limits(tmp_path: Path) -> ExecutionLimits:
    """Short-timeout limits with an observable temp dir."""
    return ExecutionLimits(timeout=10.0, workdir=str(tmp_path / "guests"))


@pytest.fixture(autouse=True)
def _guest_workdir(tmp_path: Path) -> None:
    (tmp_path / "guests").mkdir(exist_ok=True)
