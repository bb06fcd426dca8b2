import numpy as np
import pytest

from qdisco.circuit import parse_code, realize_circuit

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def record_criterion(request):
    """Log one PASS/FAIL line per acceptance criterion and return the verdict."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        request.config.stash[_LINES].append((number, line))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


def circuit_with(code: str, by_kind: dict, flux_ext: float = 0.0, gate_charges=()):
    """Circuit whose elements of each kind share one value."""
    topo = parse_code(code)
    return realize_circuit(topo, [by_kind[kind] for _, _, kind in topo.branches], flux_ext, gate_charges)


@pytest.fixture
def transmon():
    return realize_circuit("JJ", [18e9, 18e9, 108e-15], 2 * np.pi * 0.01)


@pytest.fixture
def fluxonium():
    return realize_circuit("JL", [6.86e9, 1.61e-6, 9.76e-15], 2 * np.pi * 0.499)


@pytest.fixture
def jjl():
    return circuit_with("JJL", {"J": 6e9, "L": 0.3e-6, "C": 30e-15}, 1.3, [0.31])
