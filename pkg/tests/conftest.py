import shutil

import pytest

from ssense.cli import main
from ssense.synth import SynthConfig, write_synth


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """Default synthetic dataset, preprocessed once per session."""
    root = tmp_path_factory.mktemp("synth")
    write_synth(root, SynthConfig())
    assert main(["preprocess", "--config", str(root / "config.yaml")]) == 0
    return root


@pytest.fixture
def synth_copy(synth_root, tmp_path):
    """Private copy of the preprocessed dataset for tests that write."""
    dst = tmp_path / "synth"
    shutil.copytree(synth_root, dst)
    return dst


ACCEPTANCE = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
