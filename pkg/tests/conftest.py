from pathlib import Path

import pytest

from sparse_lab.cli import load_config

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "scripts" / "configs"
GOLDEN = Path(__file__).resolve().parent / "golden"

_REPORT: dict[str, tuple[bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "heavy: long Monte Carlo run used by the acceptance suite")


@pytest.fixture
def report():
    """Record an acceptance criterion outcome: report("AC1", ok, "detail")."""

    def _record(name: str, ok: bool, detail: str = "") -> None:
        _REPORT[name] = (bool(ok), detail)

    return _record


@pytest.fixture
def config():
    def _load(stem: str):
        return load_config(CONFIGS / f"{stem}.toml")[0]

    return _load


def pytest_terminal_summary(terminalreporter):
    if not _REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_REPORT, key=lambda s: int(s[2:])):
        ok, detail = _REPORT[name]
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
