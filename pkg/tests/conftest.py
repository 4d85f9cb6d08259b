import os

import pytest
from hypothesis import HealthCheck, settings

from helpers import cvem_small, eco_small

os.environ.setdefault("POWERNET_SEED", "0")

settings.register_profile(
    "powernet", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("powernet")


@pytest.fixture(scope="session")
def eco20():
    return eco_small()


@pytest.fixture(scope="session")
def cvem10():
    return cvem_small()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[cid])
