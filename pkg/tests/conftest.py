"""Shared fixtures and the acceptance report hook.

RSA keypairs are expensive, so the suite generates a deterministic set once
per session and hands them out wherever a test does not specifically
exercise key generation itself. The sim key library lets scenario batches
(replay/tamper sweeps) skip per-scenario keygen while staying deterministic.

Every test in test_acceptance.py is one acceptance criterion; the terminal
summary prints one PASS/FAIL line per criterion at the end of the run.
"""

import pytest

from certsso.crypto import gen_keypair
from certsso.rng import Rng

_ACCEPTANCE_RESULTS = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call" and item.fspath.basename == "test_acceptance.py":
        _ACCEPTANCE_RESULTS.append((item.name, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _ACCEPTANCE_RESULTS:
        label = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"{label}  {name}")


@pytest.fixture(scope="session")
def kp1024():
    return gen_keypair(1024, Rng("fixture:kp1024"))


@pytest.fixture(scope="session")
def kp1024_other():
    return gen_keypair(1024, Rng("fixture:kp1024-other"))


@pytest.fixture(scope="session")
def kp2048():
    return gen_keypair(2048, Rng("fixture:kp2048"))


@pytest.fixture(scope="session")
def sim_keys():
    """Keypair library for simulator batches: home, rs1, rs2, then issuance."""
    return [gen_keypair(1024, Rng(f"fixture:simkey:{i}")) for i in range(6)]
