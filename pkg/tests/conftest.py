import functools

import pytest

from dmsb import auction
from dmsb.errors import DomainError


class OutcomeAudit:
    """Counts every priced auction outcome produced during the session."""

    def __init__(self):
        self.seen = 0
        self.infeasible = []

    def record(self, outcome, source):
        self.seen += 1
        try:
            outcome.check_feasible()
        except DomainError as exc:
            self.infeasible.append((source, str(exc)))
        return outcome


AUDIT = OutcomeAudit()
# criterion number -> (passed, detail); filled in by test_acceptance.py
ACCEPTANCE = {}


def _audited(fn, source):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        return AUDIT.record(fn(*args, **kwargs), source)
    return wrapper


def pytest_configure(config):
    # env.py and the harness call these through the module, so patching here
    # sees every outcome any test produces
    auction.msb_auction = _audited(auction.msb_auction, "msb_auction")
    auction.spa = _audited(auction.spa, "spa")


def pytest_collection_modifyitems(config, items):
    # acceptance checks run last so the feasibility audit covers the whole session
    items.sort(key=lambda item: item.module.__name__.endswith("test_acceptance"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")


@pytest.fixture(scope="session")
def outcome_audit():
    return AUDIT
