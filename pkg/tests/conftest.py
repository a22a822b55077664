import pytest

from blochpulse.bloch import PlaneWaveBasis, PotentialSpec
from blochpulse.coupling import coupling_table
from blochpulse.lattice import Lattice
from blochpulse.modes import BlochBands, ModeSystem, single_band_resonance_search


@pytest.fixture(scope="session")
def mathieu_model():
    lat = Lattice.cubic(1)
    return BlochBands(PotentialSpec.mathieu(0.5), PlaneWaveBasis.from_index_cutoff(lat, 8))


@pytest.fixture(scope="session")
def triple_system(mathieu_model):
    """Three pulses (k1, k2, k3) on Mathieu band 1 with 2 k1 - k2 = k3 resonant."""
    triple = single_band_resonance_search(1, mathieu_model)
    return ModeSystem.build(mathieu_model, triple.modes())


@pytest.fixture(scope="session")
def triple_table(triple_system):
    return coupling_table(triple_system, 1.0)


@pytest.fixture(scope="session")
def single_system(mathieu_model):
    return ModeSystem.build(mathieu_model, [((0.25,), 1)])


@pytest.fixture(scope="session")
def single_table(single_system):
    return coupling_table(single_system, 1.0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
