import csv
import io

import numpy as np
import pytest

from qdisco.circuit import realize_circuit
from qdisco.operators import build_system
from qdisco.pipeline import sample_circuit
from qdisco.spectrum import (
    charge_window,
    check_convergence,
    decay_rate,
    diagonalize,
    embed_vector,
    even_truncations,
    assign_truncations,
    harmonic_cutoffs,
    last_peak,
    solve,
    sweep,
)
from qdisco.transform import compute_transformation


def test_lc_ladder_is_evenly_spaced():
    _, spectrum = solve(realize_circuit("LL", [3e-6, 6e-6, 2e-12]), [10], n_eig=5)
    expected = 1 / (2 * np.pi * np.sqrt(2e-6 * 2e-12))
    np.testing.assert_allclose(np.diff(spectrum.frequencies), expected, rtol=1e-12)


def test_eigenpairs_have_small_residuals(fluxonium):
    system, spectrum = solve(fluxonium, [120])
    assert spectrum.residual < 1e-6 * system.hamiltonian.norm_bound()
    np.testing.assert_allclose(spectrum.vectors.conj().T @ spectrum.vectors, np.eye(10), atol=1e-10)


@pytest.mark.parametrize("code,m", [("JL", 500), ("JJL", (30, 21))])
def test_sparse_route_above_dense_limit(code, m):
    circuit = sample_circuit(code, 5)
    truncations = [m] if isinstance(m, int) else list(m)
    system = build_system(circuit, truncations)
    sparse = diagonalize(system.hamiltonian, 5, "sparse", system.config)
    dense = diagonalize(system.hamiltonian, 5, "dense", system.config)
    np.testing.assert_allclose(sparse.frequencies, dense.frequencies, rtol=1e-10)
    overlaps = np.abs(np.sum(sparse.vectors.conj() * dense.vectors, axis=0))
    assert np.all(overlaps > 1 - 1e-8)


def test_unknown_method():
    system = build_system(sample_circuit("JL", 0), [20])
    with pytest.raises(ValueError):
        diagonalize(system.hamiltonian, 3, "magic")


def test_embedding_preserves_norm_and_centres_charge_windows():
    circuit = sample_circuit("JJL", 2)
    small = build_system(circuit, [6, 5]).config
    big = small.enlarged(2)
    vec = np.zeros(small.dim, complex)
    vec[small.dims[1] // 2] = 1.0  # Fock 0, charge 0
    out = embed_vector(vec, small, big)
    assert np.linalg.norm(out) == pytest.approx(1.0)
    assert np.argmax(np.abs(out)) == big.dims[1] // 2


def test_converged_transmon_passes(transmon):
    result = check_convergence(transmon, [61])
    assert result.passed and result.error < 1e-5


def test_underresolved_fluxonium_fails(fluxonium):
    assert not check_convergence(fluxonium, [15]).passed


def test_even_allocation():
    assert even_truncations(["harmonic", "harmonic"], 100) == [10, 10]
    even = even_truncations(["harmonic", "charge"], 100)
    assert even[1] % 2 == 1 and np.prod(even) <= 100


@pytest.mark.parametrize("ej,ec", [(1e9, 1e9), (20e9, 0.2e9), (50e9, 10e6)])
def test_charge_window_is_odd_and_capped(ej, ec):
    m = charge_window(ej, ec)
    assert m % 2 == 1 and 3 <= m <= 21


def test_charge_window_grows_with_ej():
    assert charge_window(2e9, 1e9) <= charge_window(20e9, 1e9)


def test_profile_helpers():
    profile = np.exp(-0.5 * np.arange(30))
    peak = last_peak(profile)
    assert peak == 0
    assert decay_rate(profile, peak) == pytest.approx(0.5, rel=1e-6)
    cut = harmonic_cutoffs([0.5, 1.0], [0, 4], 400)
    assert np.prod(cut) <= 400 and cut[0] > 1


@pytest.mark.parametrize("code", ["JL", "JLL", "JJL"])
@pytest.mark.parametrize("budget", [300, 1000])
def test_heuristic_respects_budget(code, budget):
    circuit = sample_circuit(code, 4)
    cfg = assign_truncations(circuit, budget)
    decomp = compute_transformation(circuit)
    assert cfg.dim <= budget
    for label, m in zip(decomp.labels, cfg.truncations):
        assert m >= 1 and (label == "harmonic" or m % 2 == 1)


def test_flux_sweep_is_periodic_and_symmetric(fluxonium):
    grid = np.linspace(0, 2 * np.pi, 9)
    result = sweep(fluxonium, "flux", grid, [100], n_eig=3)
    assert not result.failed.any()
    np.testing.assert_allclose(result.frequencies[0], result.frequencies[-1], rtol=1e-10)
    np.testing.assert_allclose(result.frequencies[1], result.frequencies[-2], rtol=1e-10)


def test_sweep_csv_layout(transmon):
    result = sweep(transmon, "n_g", np.linspace(0, 1, 5), [31], n_eig=3)
    rows = list(csv.reader(io.StringIO(result.to_csv())))
    assert rows[0] == ["param_value", "f0", "f1", "f2"]
    assert len(rows) == 6
    np.testing.assert_allclose(float(rows[2][2]), result.frequencies[1, 1] / 1e9, rtol=1e-10)


def test_sweep_rejects_unknown_parameter(transmon):
    with pytest.raises(ValueError):
        sweep(transmon, "temperature", [0.0], [11])
