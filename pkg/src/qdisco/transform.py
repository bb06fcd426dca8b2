"""Canonical change of variables that splits a circuit into modes.

Node fluxes and charges are mapped to mode variables through
``Phi = S Phi_t`` and ``Q = R Q_t`` with ``R = S^-T``.  The harmonic
modes diagonalise the quadratic part of the Hamiltonian; the charge
modes span the null space of the inductive susceptance matrix and are
scaled so that every junction couples to them with integer weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy import linalg

from .circuit import Circuit

_TIE_TOL = 1e-9


class TransformError(ArithmeticError):
    """The circuit matrices could not be brought into block form."""


@dataclass(frozen=True)
class ModeDecomposition:
    """Mode variables of one circuit, harmonic modes first.

    Attributes
    ----------
    S, R
        ``Phi = S Phi_t`` and ``Q = R Q_t``.
    c_inv
        Transformed inverse capacitance ``R^T C^-1 R``.
    l_star
        Transformed susceptance ``S^T L* S``.
    w
        Transformed branch couplings, one row ``w_k^T S`` per branch.
    """

    S: np.ndarray
    R: np.ndarray
    c_inv: np.ndarray
    l_star: np.ndarray
    w: np.ndarray
    n_harmonic: int
    n_charge: int

    @property
    def n_modes(self) -> int:
        return self.n_harmonic + self.n_charge

    @property
    def labels(self) -> List[str]:
        return ["harmonic"] * self.n_harmonic + ["charge"] * self.n_charge

    @property
    def harmonic_omegas(self) -> np.ndarray:
        """Angular frequencies sqrt(c_inv_ii * l_ii) of the harmonic modes."""
        idx = np.arange(self.n_harmonic)
        return np.sqrt(self.c_inv[idx, idx] * self.l_star[idx, idx])

    @property
    def harmonic_frequencies(self) -> np.ndarray:
        return self.harmonic_omegas / (2 * np.pi)

    @property
    def impedances(self) -> np.ndarray:
        idx = np.arange(self.n_harmonic)
        return np.sqrt(self.c_inv[idx, idx] / self.l_star[idx, idx])

    @property
    def charge_c_inv(self) -> np.ndarray:
        n = self.n_harmonic
        return self.c_inv[n:, n:]

    def to_dict(self) -> dict:
        return {
            "S": self.S.tolist(),
            "R": self.R.tolist(),
            "labels": self.labels,
            "harmonic_frequencies_GHz": (self.harmonic_frequencies / 1e9).tolist(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _inv_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    if vals.min() <= vals.max() * 1e-14:
        raise TransformError("capacitance matrix is numerically singular")
    return (vecs / np.sqrt(vals)) @ vecs.T


def _independent_rows(mat: np.ndarray, count: int) -> List[int]:
    chosen: List[int] = []
    scale = max(np.abs(mat).max(), 1.0)
    for row in range(mat.shape[0]):
        trial = mat[chosen + [row]]
        if np.linalg.matrix_rank(trial, tol=1e-9 * scale) == len(chosen) + 1:
            chosen.append(row)
            if len(chosen) == count:
                break
    return chosen


def compute_transformation(circuit: Circuit) -> ModeDecomposition:
    """Build the block-diagonalising transformation for ``circuit``.

    The charge subspace is the null space of the inductor incidence rows,
    which is exactly the null space of L* for positive inductances and is
    found on a matrix of small integers rather than on L* itself, whose
    entries can span thirty orders of magnitude.
    """
    topo = circuit.topology
    cap = circuit.capacitance
    ls = circuit.susceptance
    n = topo.n_modes
    _inv_sqrt(cap)
    inductive = topo.incidence[list(topo.inductors)]
    null = linalg.null_space(inductive) if len(topo.inductors) else np.eye(n)
    n_charge = null.shape[1]
    n_h = n - n_charge

    cols = np.zeros((n, 0))
    if n_h:
        lam, vecs = linalg.eigh(ls, cap)
        cols = vecs[:, np.argsort(lam)[n_charge:]]
        if n_charge:
            # remove any numerical overlap with the charge subspace
            proj = null @ np.linalg.solve(null.T @ cap @ null, null.T @ cap)
            cols = cols - proj @ cols
        lam, rot = linalg.eigh(cols.T @ ls @ cols, cols.T @ cap @ cols)
        if lam.min() <= 0:
            raise TransformError(f"{topo.code}: harmonic mode with vanishing stiffness")
        cols = cols @ rot
        pivots = np.abs(cols).argmax(axis=0)
        cols = cols / cols[pivots, np.arange(n_h)]
        c_diag = np.einsum("ji,jk,ki->i", cols, cap, cols)
        l_diag = np.einsum("ji,jk,ki->i", cols, ls, cols)
        omegas = np.sqrt(l_diag / c_diag)
        z = 1.0 / np.sqrt(c_diag * l_diag)
        # ascending frequency, ties broken by descending impedance
        bucket = omegas.max() * _TIE_TOL
        order = sorted(range(n_h), key=lambda i: (round(omegas[i] / bucket), -z[i]))
        cols = cols[:, order]

    if n_charge:
        wj = topo.incidence[list(topo.junctions)] @ null if topo.junctions else np.zeros((0, n_charge))
        rows = _independent_rows(wj, n_charge)
        if len(rows) < n_charge:
            raise TransformError(f"{topo.code}: charge modes are not fixed by the junctions")
        null = null @ np.linalg.inv(wj[rows])

    S = np.hstack([cols, null])
    R = np.linalg.inv(S).T
    if np.abs(S.T @ R - np.eye(len(S))).max() > 1e-10:
        raise TransformError("S^T R deviates from identity")
    c_inv = R.T @ np.linalg.inv(cap) @ R
    l_star = S.T @ ls @ S
    w = topo.incidence @ S
    if n_charge:
        jrows = list(topo.junctions)
        block = w[jrows, n_h:]
        rounded = np.round(block)
        if np.abs(block - rounded).max() > 1e-8:
            raise TransformError(f"{topo.code}: non-integer charge couplings {block}")
        w[jrows, n_h:] = rounded
        w[list(topo.inductors), n_h:] = 0.0
    _check_blocks(c_inv, l_star, n_h)
    # remove round-off outside the block structure
    c_inv = (c_inv + c_inv.T) / 2
    c_inv[:n_h, n_h:] = 0.0
    c_inv[n_h:, :n_h] = 0.0
    c_inv[:n_h, :n_h] = np.diag(np.diag(c_inv[:n_h, :n_h]))
    l_star = np.diag(np.concatenate([np.diag(l_star)[:n_h], np.zeros(n_charge)]))
    return ModeDecomposition(S, R, c_inv, l_star, w, n_h, n_charge)


def _check_blocks(c_inv: np.ndarray, l_star: np.ndarray, n_h: int) -> None:
    diag = np.sqrt(np.abs(np.outer(np.diag(c_inv), np.diag(c_inv))))
    off_c = np.abs(c_inv) / diag
    off_c[n_h:, n_h:] = 0.0
    off_c[np.arange(n_h), np.arange(n_h)] = 0.0
    ldiag = np.abs(np.diag(l_star))
    scale = np.sqrt(np.outer(ldiag, ldiag))
    off_l = np.abs(l_star)
    off_l[np.arange(n_h), np.arange(n_h)] = 0.0
    if off_c.max() > 1e-8 or (off_l > 1e-8 * scale.max()).any():
        raise TransformError("transformed matrices are not block diagonal")
    if n_h and ldiag[:n_h].min() <= 0:
        raise TransformError("harmonic mode with non-positive stiffness")


def classify_modes(decomp: ModeDecomposition) -> Tuple[int, int, List[str]]:
    return decomp.n_harmonic, decomp.n_charge, decomp.labels
