import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mapoi.control import PulseShape
from mapoi.oi import OIConfig, pulse_template
from mapoi.quantum import ladder_system

settings.register_profile(
    "default", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture(scope="session")
def bundled():
    return ladder_system()


@pytest.fixture(scope="session")
def template(bundled) -> PulseShape:
    return pulse_template(bundled, OIConfig())


@pytest.fixture(scope="session")
def moderate_pulse(template) -> PulseShape:
    rng = np.random.default_rng(11)
    n = template.n_components
    return template.with_knobs(np.r_[rng.uniform(0.2, 0.6, n), rng.uniform(0, 2 * np.pi, n)])


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request, capsys):
    """Record (and echo) one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def report(criterion, ok, detail):
        line = f"[{criterion}] {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        with capsys.disabled():
            print(f"\nACCEPTANCE {line}")
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: s.split("]")[0]):
            terminalreporter.write_line(line)
