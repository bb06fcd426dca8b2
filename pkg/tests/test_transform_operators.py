import numpy as np
import pytest
from scipy.linalg import expm

from qdisco import units
from qdisco.circuit import enumerate_codes
from qdisco.operators import (
    SparseOperator,
    annihilation,
    build_system,
    charge_numbers,
    displacement,
    node_charge_operator,
)
from qdisco.pipeline import sample_circuit
from qdisco.transform import compute_transformation

THREE_NODE_CODES = [c for c in enumerate_codes(3) if c not in ("JJ", "JL", "LL")]


@pytest.mark.parametrize("code", ["JJ", "JL", "LL"] + THREE_NODE_CODES)
def test_transformation_invariants(code):
    circuit = sample_circuit(code, 3)
    d = compute_transformation(circuit)
    n = d.n_modes
    np.testing.assert_allclose(d.S.T @ d.R, np.eye(n), atol=1e-10)
    c_inv = d.R.T @ np.linalg.inv(circuit.capacitance) @ d.R
    np.testing.assert_allclose(d.c_inv, c_inv, rtol=1e-9, atol=1e-9 * np.abs(c_inv).max())
    l_star = d.S.T @ circuit.susceptance @ d.S
    scale = max(np.abs(l_star).max(), 1.0)
    np.testing.assert_allclose(d.l_star, l_star, atol=1e-9 * scale)
    h = d.n_harmonic
    # harmonic modes are decoupled, charge modes carry no inductance
    assert np.allclose(d.c_inv[:h, :h], np.diag(np.diag(d.c_inv[:h, :h])), atol=1e-9 * np.abs(d.c_inv).max())
    assert np.allclose(d.l_star[h:, :], 0, atol=1e-9 * scale)
    assert np.allclose(d.c_inv[:h, h:], 0, atol=1e-9 * np.abs(d.c_inv).max())
    # junction couplings into charge modes are integers
    for k in circuit.topology.junctions:
        w = d.w[k, h:]
        np.testing.assert_allclose(w, np.round(w), atol=1e-9)


def test_single_node_labels():
    assert compute_transformation(sample_circuit("JJ", 0)).labels == ["charge"]
    assert compute_transformation(sample_circuit("JL", 0)).labels == ["harmonic"]


def test_ladder_operators():
    a = annihilation(6)
    comm = a @ a.T - a.T @ a
    # exact except in the last row, an artefact of truncation
    np.testing.assert_allclose(comm[:-1, :-1], np.eye(5))
    np.testing.assert_array_equal(charge_numbers(5), [-2, -1, 0, 1, 2])


@pytest.mark.parametrize("beta", [0.0, 0.3, 1.7, 4.0])
def test_displacement_against_matrix_exponential(beta):
    m, big = 8, 160
    a = annihilation(big)
    oracle = expm(1j * beta * (a + a.T))[:m, :m]
    np.testing.assert_allclose(displacement(m, beta), oracle, atol=1e-10)


def test_factored_operator_matches_kron():
    rng = np.random.default_rng(1)
    dims = (3, 4, 2)
    mats = {0: rng.normal(size=(3, 3)), 2: rng.normal(size=(2, 2))}
    diag = rng.normal(size=24)
    op = SparseOperator(dims, diag, [(0.7, mats), (1.5j, {1: rng.normal(size=(4, 4))})], hermitian=False)
    _, second = op.terms[1]
    dense = np.diag(diag).astype(complex)
    dense += 0.7 * np.kron(np.kron(mats[0], np.eye(4)), mats[2])
    dense += 1.5j * np.kron(np.kron(np.eye(3), second[1]), np.eye(2))
    np.testing.assert_allclose(op.to_dense(), dense, atol=1e-12)
    vecs = rng.normal(size=(24, 3)) + 1j * rng.normal(size=(24, 3))
    np.testing.assert_allclose(op.apply(vecs), dense @ vecs, atol=1e-12)
    np.testing.assert_allclose(op.adjoint().to_dense(), dense.conj().T, atol=1e-12)
    assert op.norm_bound() >= np.linalg.norm(dense, 2)


def test_transmon_hamiltonian_against_hand_built_charge_matrix():
    ej1, ej2, cap, flux, ng, m = 5e9, 8e9, 60e-15, 0.7, 0.23, 21
    circuit = sample_circuit("JJ", 0).with_values([ej1, ej2, cap]).with_flux(flux).with_gate_charges([ng])
    ham = build_system(circuit, [m]).hamiltonian.to_dense()
    ec = units.e**2 / (2 * cap) / units.h
    n = charge_numbers(m)
    hop = -(ej1 + ej2 * np.exp(1j * flux)) / 2
    oracle = np.diag(4 * ec * (n - ng) ** 2) + np.diag(np.full(m - 1, hop), -1) + np.diag(np.full(m - 1, np.conj(hop)), 1)
    np.testing.assert_allclose(np.linalg.eigvalsh(ham), np.linalg.eigvalsh(oracle), rtol=1e-12)


def test_node_charge_operator_bases():
    circuit = sample_circuit("JJL", 0)
    system = build_system(circuit, [8, 5])
    opset = system.opset
    q1 = node_charge_operator(opset, 1).to_dense()
    assert np.allclose(q1, q1.conj().T)
    with pytest.raises(IndexError):
        node_charge_operator(opset, 3)
    with pytest.raises(ValueError):
        node_charge_operator(opset, 1, basis="lab")
