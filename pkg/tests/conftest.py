import importlib.util
import time
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
_RESULTS: dict[str, tuple[bool, str]] = {}


def _load_oracle_script():
    spec = importlib.util.spec_from_file_location("synthetic_oracle", ROOT / "scripts" / "synthetic_oracle.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


@pytest.fixture(scope="session")
def synthetic(tmp_path_factory):
    """Full synthetic pipeline through the CLI: data, vocab, 2000-step pretrain, SFT/AFTER, probes."""
    work = tmp_path_factory.mktemp("synthetic")
    t0 = time.perf_counter()
    summary = _load_oracle_script().run_pipeline(work)
    summary["elapsed_s"] = time.perf_counter() - t0
    summary["work"] = work
    return summary


@pytest.fixture(scope="session")
def acceptance():
    """Records one pass/fail line per acceptance criterion and fails the test when it did not pass."""
    def record(key: str, ok: bool, detail: str) -> None:
        _RESULTS[key] = (bool(ok), detail)
        print(f"criterion {key}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, f"criterion {key} failed: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_RESULTS, key=lambda k: (int(k.rstrip("abc")), k)):
        ok, detail = _RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'} ({detail})")
