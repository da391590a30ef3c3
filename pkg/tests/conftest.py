from __future__ import annotations

import pytest

from voltctrl import load_case, parse_case

# Two-bus network with a closed-form solution, used as the hand-checked
# oracle throughout the suite: slack at 1.0 pu feeding a 0.736 pu reactive
# load over a lossless x=0.1 line. The load bus settles at exactly 0.92 pu
# and the voltage sensitivity to local injection is exactly 0.1.
TOY2_TEXT = """\
function mpc = toy2
mpc.baseMVA = 100;
mpc.bus = [
\t1\t3\t0\t0\t0\t0\t1\t1\t0\t0\t1\t1.1\t0.9;
\t2\t1\t0\t73.6\t0\t0\t1\t1\t0\t0\t1\t1.1\t0.9;
];
mpc.gen = [
\t1\t0\t0\t0\t0\t1.0\t100\t1\t0\t0;
];
mpc.branch = [
\t1\t2\t0\t0.1\t0\t0\t0\t0\t0\t0\t1\t-360\t360;
];
"""


@pytest.fixture(scope="session")
def toy2():
    return parse_case(TOY2_TEXT, name="toy2")


@pytest.fixture(scope="session")
def case14():
    return load_case("case14")


@pytest.fixture(scope="session")
def case30():
    return load_case("case30")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Repeat the acceptance verdict lines where capture cannot hide them."""
    import sys

    module = sys.modules.get("test_acceptance")
    verdicts = getattr(module, "VERDICTS", None) if module else None
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(verdicts):
            terminalreporter.write_line(line)
