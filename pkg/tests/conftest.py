import os
import subprocess
import sys
from pathlib import Path

import pytest

sys.path.insert(0, os.path.dirname(__file__))

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist5k"

_criteria: dict[str, tuple[str, str]] = {}


def load_mnist5k():
    """The 4500/500 MNIST subset under data/mnist5k, fetched on first use."""
    from ddistill.data import load_idx

    if not (MNIST_DIR / "val-labels-idx1-ubyte").exists():
        subprocess.run([sys.executable, str(ROOT / "scripts" / "fetch_mnist5k.py"), "--out", str(MNIST_DIR)], check=True)
    train = load_idx(MNIST_DIR / "train-images-idx3-ubyte", MNIST_DIR / "train-labels-idx1-ubyte", split="train")
    val = load_idx(MNIST_DIR / "val-images-idx3-ubyte", MNIST_DIR / "val-labels-idx1-ubyte", split="val")
    return train, val


@pytest.fixture(scope="session")
def mnist5k():
    return load_mnist5k()


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.outcome != "passed":
        detail = ""
        if report.outcome == "failed":
            detail = str(report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") else report.longrepr).splitlines()[0]
        _criteria.setdefault(name, (report.outcome, detail))
        if report.outcome != "passed":
            _criteria[name] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria, key=lambda n: int(n.split("_")[2])):
        outcome, detail = _criteria[name]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        line = f"{verdict}  {name}"
        if detail:
            line += f"  ({detail[:160]})"
        terminalreporter.write_line(line)
