import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from zipflppl.lppl_core import LinearParams, NonlinearParams  # noqa: E402
from zipflppl.synth import SynthSpec, generate_series  # noqa: E402

TRUE_NL = NonlinearParams(tc=220.0, m=0.5, omega=8.0, phi=1.0)
TRUE_LIN = LinearParams(gamma=0.4, A=7.0, B=-0.05, C=0.005)


def synth_series(nl=TRUE_NL, lin=TRUE_LIN, t1=1, t2=200, sigma=0.0, zeta="linear-drift",
                 rate=0.002, seed=0, zeta_values=()):
    return generate_series(SynthSpec(nl, lin, t1, t2, sigma, zeta, rate, tuple(zeta_values), seed))


@pytest.fixture
def noiseless():
    return synth_series()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")
