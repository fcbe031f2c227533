from __future__ import annotations

import pytest

_VERDICTS: dict[int, tuple[str, str]] = {}


def pytest_addoption(parser):
    parser.addoption("--full", action="store_true", default=False,
                     help="run the full-scale CHB-MIT targets (needs $SEIZURECAST_CHBMIT_MANIFEST)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--full"):
        return
    skip = pytest.mark.skip(reason="full-scale target; pass --full to run")
    for item in items:
        if "full_scale" in item.keywords:
            item.add_marker(skip)


def pytest_configure(config):
    config.addinivalue_line("markers", "full_scale: long-running target on the real CHB-MIT corpus")


@pytest.fixture
def criterion():
    """Record a PASS/FAIL verdict for an acceptance criterion.

    Usage: ``with criterion(3, "detail"): assert ...``.
    """
    class _Verdict:
        def __init__(self, number, detail=""):
            self.number, self.detail = number, detail

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            status = "PASS" if exc_type is None else "FAIL"
            _VERDICTS[self.number] = (status, self.detail)
            return False

    return _Verdict


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_VERDICTS):
        status, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}" + (f"  ({detail})" if detail else ""))
