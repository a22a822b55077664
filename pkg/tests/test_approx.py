import numpy as np
import pytest

from blochpulse import amplitude as amp
from blochpulse.approx import (TwoScaleAnsatz, as_wavefield, assemble, first_order_nonresonant,
                               first_order_perp, leading_order_field, nonresonant_phases,
                               nls_residual, residual_norm, solvability_defect)
from blochpulse.bloch import PlaneWaveBasis, PotentialSpec, inner
from blochpulse.coupling import coupling_table
from blochpulse.errors import GridIncommensurate
from blochpulse.lattice import Lattice
from blochpulse.modes import BlochBands, ModeSystem, SigmaPoint
from blochpulse.nls import FineGrid, hs_eps_norm

LAT = Lattice.cubic(1)
BASIS = PlaneWaveBasis.from_index_cutoff(LAT, 8)
FREE_MODEL = BlochBands(PotentialSpec.free(LAT), BASIS)
MACRO = amp.MacroGrid((16.0,), (256,))


def run(system, table, fields, T=0.5, dt=1e-3, grid=MACRO, every=None):
    state = amp.AmplitudeState.from_system(system, table, grid, fields)
    return amp.strang_evolve(state, T, dt, every)


@pytest.fixture(scope="module")
def single_run(single_system, single_table):
    fields = amp.gaussian(MACRO, [0.0], 0.5)[None]
    return run(single_system, single_table, fields, every=100)


@pytest.fixture(scope="module")
def single_ansatz(single_system, single_table):
    return TwoScaleAnsatz(single_system, single_table, order=1)


# --------------------------------------------------------------------------- leading order

def test_zero_amplitudes_give_zero(single_ansatz, single_system, single_table):
    state = amp.AmplitudeState.from_system(single_system, single_table, MACRO, np.zeros((1, 256)))
    grid = FineGrid(single_ansatz.potential, (16.0,), 8)
    assert np.all(single_ansatz.evaluate(state, grid) == 0)


def test_free_k0_is_the_amplitude():
    system = ModeSystem.build(FREE_MODEL, [((0.0,), 1)])
    table = coupling_table(system, 1.0)
    macro = amp.MacroGrid((16.0,), (128,))
    xi = 2 * np.pi * 3 / 16.0
    f = amp.gaussian(macro, [0.5], 1.0, 0.7, phase_k=[xi])
    state = amp.AmplitudeState.from_system(system, table, macro, f[None])
    grid = FineGrid(system.pairs[0].potential, (16.0,), 4)
    u = leading_order_field(TwoScaleAnsatz(system, table, order=0), state, grid)
    x = grid.coords()
    exact = 0.7 * np.exp(-(x[0] - 0.5) ** 2 / 2) * np.exp(1j * xi * (x[0] - 0.5))
    assert np.max(np.abs(u - exact)) < 1e-10


def test_constant_amplitude_modulus_is_time_independent(single_system, single_table):
    macro = amp.MacroGrid((4.0,), (16,))
    state = amp.AmplitudeState.from_system(single_system, single_table, macro, np.full((1, 16), 0.8 + 0.1j))
    ansatz = TwoScaleAnsatz(single_system, single_table, order=0)
    grid = FineGrid(ansatz.potential, (4.0,), 4)
    later = amp.strang_evolve(state, 0.3, 1e-3)[-1]
    chi = ansatz._micro(grid, ansatz.terms[0], single_system.pairs[0].coeffs)
    for s in (state, later):
        u = ansatz.evaluate(s, grid)
        assert np.max(np.abs(np.abs(u) - abs(0.8 + 0.1j) * np.abs(chi))) < 1e-12


def test_order_zero_assembly_matches_leading_order(single_ansatz, single_run):
    grid = FineGrid(single_ansatz.potential, (16.0,), 8)
    state = single_run[-1]
    u0 = leading_order_field(single_ansatz, state, grid)
    assert np.array_equal(assemble(single_ansatz, state, grid, order=0), u0)
    wf = as_wavefield(single_ansatz, state, grid, order=0)
    assert np.array_equal(wf.u, u0) and wf.t == state.t


def test_incommensurate_grid_rejected(mathieu_model):
    system = ModeSystem.build(mathieu_model, [((0.3,), 1)])
    table = coupling_table(system, 1.0)
    state = amp.AmplitudeState.from_system(system, table, MACRO, np.zeros((1, 256)))
    ansatz = TwoScaleAnsatz(system, table, order=0)
    with pytest.raises(GridIncommensurate):
        ansatz.evaluate(state, FineGrid(ansatz.potential, (16.0,), 2))


def test_order_cap(single_system, single_table):
    with pytest.raises(ValueError):
        TwoScaleAnsatz(single_system, single_table, order=2)
    ansatz = TwoScaleAnsatz(single_system, single_table, order=0)
    state = amp.AmplitudeState.from_system(single_system, single_table, MACRO, np.zeros((1, 256)))
    with pytest.raises(ValueError):
        ansatz.evaluate(state, FineGrid(ansatz.potential, (16.0,), 8), order=1)


# --------------------------------------------------------------------------- non-resonant terms

@pytest.fixture(scope="module")
def free_pair_system():
    # modes k = pi/2 and k = 0 on band 1; (0, 1, 0) lands at k = pi, E = pi^2/4 (non-resonant)
    system = ModeSystem.build(FREE_MODEL, [((0.25,), 1), ((0.0,), 1)])
    return system, coupling_table(system, 1.5)


def test_free_resolvent_oracle(free_pair_system):
    system, table = free_pair_system
    ansatz = TwoScaleAnsatz(system, table, order=1)
    macro = amp.MacroGrid((4.0,), (8,))
    a = np.array([0.7 + 0.2j, -0.4 + 0.5j])
    state = amp.AmplitudeState.from_system(system, table, macro, a[:, None] * np.ones((2, 8)))
    sigma = SigmaPoint.make((-0.5,), np.pi ** 2 / 4)
    assert any(p.close(sigma, 1e-9, 1e-9) for p in nonresonant_phases(ansatz))
    coeffs = first_order_nonresonant(ansatz, state, sigma)[:, 0]
    # chi_0 conj(chi_1) chi_0 = 1 carried by e^{2 pi i y}; diagonal symbol at k = -pi, g = 2 pi
    g = BASIS.position[(1,)]
    expected = 1.5 * a[0] ** 2 * np.conj(a[1]) / (np.pi ** 2 / 4 - 0.5 * np.pi ** 2)
    assert abs(coeffs[g] - expected) < 1e-12
    assert np.max(np.abs(np.delete(coeffs, g))) < 1e-12


def test_nonresonant_zero_and_linear(free_pair_system):
    system, table = free_pair_system
    ansatz = TwoScaleAnsatz(system, table, order=1)
    macro = amp.MacroGrid((4.0,), (8,))
    sigma = SigmaPoint.make((-0.25,), -np.pi ** 2 / 8)    # from (1, 0, 1): a_1^2 conj(a_0)
    zero = amp.AmplitudeState.from_system(system, table, macro, np.zeros((2, 8)))
    assert np.all(first_order_nonresonant(ansatz, zero, sigma) == 0)
    a = np.array([0.3 - 0.1j, 0.6 + 0.4j])[:, None] * np.ones((2, 8))
    one = amp.AmplitudeState.from_system(system, table, macro, a)
    two = amp.AmplitudeState.from_system(system, table, macro, a * np.array([[2.0], [1.0]]))
    A1 = first_order_nonresonant(ansatz, one, sigma)
    A2 = first_order_nonresonant(ansatz, two, sigma)
    assert np.max(np.abs(A2 - 2 * A1)) < 1e-13
    with pytest.raises(KeyError):
        first_order_nonresonant(ansatz, one, SigmaPoint.make((0.1,), 3.0))


# --------------------------------------------------------------------------- perpendicular part

def test_perp_vanishes_for_constant_amplitude_without_nonlinearity(mathieu_model):
    system = ModeSystem.build(mathieu_model, [((0.25,), 1)])
    table = coupling_table(system, 0.0)
    ansatz = TwoScaleAnsatz(system, table, order=1)
    macro = amp.MacroGrid((4.0,), (16,))
    state = amp.AmplitudeState.from_system(system, table, macro, np.full((1, 16), 1.2 - 0.3j))
    assert np.max(np.abs(first_order_perp(ansatz, state, 0))) < 1e-12


def test_perp_is_orthogonal(single_ansatz, single_system, single_run):
    chi = single_system.pairs[0].coeffs
    for state in single_run:
        A = first_order_perp(single_ansatz, state, 0)
        overlaps = np.array([inner(chi, A[:, i], BASIS) for i in range(A.shape[1])])
        assert np.max(np.abs(overlaps)) < 1e-12


def test_solvability_single_mode(single_ansatz, single_run):
    assert max(solvability_defect(single_ansatz, s) for s in single_run) < 1e-10


def test_solvability_three_pulse(triple_system, triple_table):
    fields = np.array([amp.gaussian(MACRO, [c], 1.5, a) for c, a in ((-2.0, 1.0), (0.0, 0.8), (2.0, 0.6))])
    traj = run(triple_system, triple_table, fields, T=0.2, every=50)
    ansatz = TwoScaleAnsatz(triple_system, triple_table, order=1)
    assert max(solvability_defect(ansatz, s) for s in traj) < 1e-10


# --------------------------------------------------------------------------- residuals and rates

def test_time_derivative_matches_trajectory(single_ansatz, single_run):
    grid = FineGrid(single_ansatz.potential, (16.0,), 8)
    h = 1e-3
    s0 = single_run[1]
    s1 = amp.strang_evolve(s0, h, h)[-1]
    s2 = amp.strang_evolve(s1, h, h)[-1]
    u0, ut = single_ansatz.evaluate(s0, grid, order=1, time_derivative=True)
    u1, u2 = (single_ansatz.evaluate(s, grid, order=1) for s in (s1, s2))
    fd = (-3 * u0 + 4 * u1 - u2) / (2 * h)
    assert np.linalg.norm(fd - ut) / np.linalg.norm(ut) < 1e-3


def test_residual_reduction(single_ansatz, single_run):
    state = single_run[-1]
    ratios = []
    for q in (8, 16):
        grid = FineGrid(single_ansatz.potential, (16.0,), q)
        r0 = residual_norm(single_ansatz, state, grid, 0)
        r1 = residual_norm(single_ansatz, state, grid, 1)
        ratios.append(r1 / r0)
    assert ratios[1] <= 0.5
    assert ratios[1] < 0.75 * ratios[0]


def test_first_order_correction_is_order_eps(single_ansatz, single_run):
    state = single_run[-1]
    eps, diffs = [], []
    for q in (8, 16, 32):
        grid = FineGrid(single_ansatz.potential, (16.0,), q)
        d = single_ansatz.evaluate(state, grid, 1) - single_ansatz.evaluate(state, grid, 0)
        eps.append(grid.eps)
        diffs.append(hs_eps_norm(d, 0, grid))
    slope = np.polyfit(np.log(eps), np.log(diffs), 1)[0]
    assert 0.9 < slope < 1.1


def test_free_k0_residual():
    """Free potential, k = 0: the amplitude equation absorbs the cubic term, leaving eps^2/2 a_xx."""
    system = ModeSystem.build(FREE_MODEL, [((0.0,), 1)])
    table = coupling_table(system, 1.0)
    fields = amp.gaussian(MACRO, [0.0], 1.0)[None]
    state = run(system, table, fields, T=0.25)[-1]
    ansatz = TwoScaleAnsatz(system, table, order=0)
    norms = []
    for q in (8, 16):
        grid = FineGrid(ansatz.potential, (16.0,), q)
        a_xx = MACRO.gradient(MACRO.gradient(state.fields[0])[0])[0]
        expected = grid.eps ** 2 / 2 * np.sqrt(MACRO.integrate(np.abs(a_xx) ** 2))
        norms.append(residual_norm(ansatz, state, grid))
        assert norms[-1] == pytest.approx(expected, rel=1e-8)
    assert norms[1] / norms[0] == pytest.approx(0.25, rel=1e-6)


def test_linear_in_amplitudes_without_nonlinearity(mathieu_model):
    system = ModeSystem.build(mathieu_model, [((0.25,), 1), ((-0.25,), 2)])
    table = coupling_table(system, 0.0)
    ansatz = TwoScaleAnsatz(system, table, order=1)
    rng = np.random.default_rng(5)
    macro = amp.MacroGrid((4.0,), (32,))
    f = rng.normal(size=(2, 32)) + 1j * rng.normal(size=(2, 32))
    g = rng.normal(size=(2, 32)) + 1j * rng.normal(size=(2, 32))
    grid = FineGrid(ansatz.potential, (4.0,), 4)

    def u(fields):
        return ansatz.evaluate(amp.AmplitudeState.from_system(system, table, macro, fields), grid)

    assert np.max(np.abs(u(f + 2 * g) - u(f) - 2 * u(g))) < 1e-10


def test_residual_shape(single_ansatz, single_run):
    grid = FineGrid(single_ansatz.potential, (16.0,), 8)
    r = nls_residual(single_ansatz, single_run[0], grid, 1)
    assert r.shape == grid.shape and np.all(np.isfinite(r))
