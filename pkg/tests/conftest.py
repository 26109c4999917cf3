from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


REFERENCE = Path(__file__).resolve().parents[1] / "models" / "reference.cse"


@pytest.fixture(scope="session")
def reference_path():
    if not REFERENCE.exists():
        pytest.fail(f"{REFERENCE} is missing; run scripts/train_reference.py first")
    return REFERENCE


@pytest.fixture(scope="session")
def reference_model(reference_path):
    from cse.training import load_checkpoint
    return load_checkpoint(reference_path)


def pytest_terminal_summary(terminalreporter):
    """One verdict line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "skipped", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::" not in nodeid or rep.when not in ("call", "setup"):
                continue
            if outcome == "passed" and rep.when != "call":
                continue
            detail = dict(getattr(rep, "user_properties", [])).get("detail", "")
            name = nodeid.split("::")[-1]
            lines.append((name, {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP", "error": "FAIL"}[outcome], detail))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, verdict, detail in sorted(lines):
            terminalreporter.write_line(f"{verdict:4s}  {name}  {detail}")
