"""Analytic derivatives of eigenfrequencies, eigenvectors and matrix elements.

Derivatives of the Hamiltonian are taken with the node operators held
fixed, so the charge and flux operators of the circuit never depend on the
element values.  Eigenvector derivatives combine the perturbative sum over
the ``n_E`` computed states with, where requested, a remainder for the
rest of the space obtained from a linear solve.

Units follow the parameters: hertz per farad, per henry, per hertz of E_J,
per Cooper pair of gate charge and per radian of external flux.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import logging

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from . import units
from .circuit import Circuit
from .operators import Factors, OperatorSet, SparseOperator, System, build_system
from .spectrum import DEFAULT_N_EIG, Spectrum, diagonalize
from .transform import ModeDecomposition

logger = logging.getLogger(__name__)

DEGENERACY_TOL = 1e-6
PARAMETER_KINDS = ("C", "L", "J", "flux", "n_g")


class MissingParameterError(KeyError):
    pass


@dataclass(frozen=True)
class ParameterRef:
    """An element (by branch), the loop flux or the gate charge of one charge mode."""

    kind: str
    index: int = 0
    trainable: bool = True

    def __post_init__(self):
        if self.kind not in PARAMETER_KINDS:
            raise ValueError(f"unknown parameter kind {self.kind!r}")

    @property
    def name(self) -> str:
        return f"{self.kind}{self.index}"

    @property
    def is_element(self) -> bool:
        return self.kind in ("C", "L", "J")


def circuit_parameters(circuit: Circuit, decomp: ModeDecomposition, controls: bool = True) -> List[ParameterRef]:
    """Every element, then the loop flux (if a junction carries it), then the gate charges."""
    refs = [ParameterRef(kind, k) for k, (_, _, kind) in enumerate(circuit.topology.branches)]
    if controls:
        if circuit.topology.flux_branch is not None:
            refs.append(ParameterRef("flux", 0))
        refs.extend(ParameterRef("n_g", j) for j in range(decomp.n_charge))
    return refs


def _check_ref(circuit: Circuit, decomp: ModeDecomposition, ref: ParameterRef) -> None:
    topo = circuit.topology
    if ref.is_element:
        if not 0 <= ref.index < topo.n_branches or topo.branches[ref.index][2] != ref.kind:
            raise MissingParameterError(f"{topo.code} has no {ref.kind} on branch {ref.index}")
    elif ref.kind == "flux":
        if ref.index != 0:
            raise MissingParameterError("single-loop circuits have one external flux")
    elif not 0 <= ref.index < decomp.n_charge:
        raise MissingParameterError(f"{topo.code} has no charge mode {ref.index}")


def parameter_value(circuit: Circuit, decomp: ModeDecomposition, ref: ParameterRef) -> float:
    _check_ref(circuit, decomp, ref)
    if ref.is_element:
        return circuit.values[ref.index]
    if ref.kind == "flux":
        return circuit.flux_ext
    return float(circuit.gate_charge_vector(decomp.n_charge)[ref.index])


def with_parameter(circuit: Circuit, decomp: ModeDecomposition, ref: ParameterRef, value: float) -> Circuit:
    _check_ref(circuit, decomp, ref)
    if ref.is_element:
        vals = list(circuit.values)
        vals[ref.index] = value
        return circuit.with_values(vals)
    if ref.kind == "flux":
        return circuit.with_flux(value)
    ng = circuit.gate_charge_vector(decomp.n_charge).copy()
    ng[ref.index] = value
    return circuit.with_gate_charges(ng)


# ---------------------------------------------------------------------------
# Classical coefficient vectors
# ---------------------------------------------------------------------------


def voltage_weights(circuit: Circuit, decomp: ModeDecomposition, branch: int) -> np.ndarray:
    """v with ``w_k^T C^-1 Q = v^T Q_t``: the branch voltage times capacitance units."""
    return decomp.R.T @ np.linalg.solve(circuit.capacitance, circuit.topology.incidence[branch])


def offset_transport(circuit: Circuit, decomp: ModeDecomposition, branch: int) -> np.ndarray:
    """``R^T C^-1 dR_ch/dc`` for one capacitor, shape (n_modes, n_charge).

    Gate charges live on the transformed charge variables, whose node
    representation ``R_ch = C S_ch (S_ch^T C S_ch)^-1`` moves with every
    capacitance.
    """
    n_h = decomp.n_harmonic
    s_ch = decomp.S[:, n_h:]
    cap = circuit.capacitance
    d_cap = circuit.stamp(branch)
    a = np.linalg.inv(s_ch.T @ cap @ s_ch)
    d_r = d_cap @ s_ch @ a - cap @ s_ch @ a @ (s_ch.T @ d_cap @ s_ch) @ a
    return decomp.R.T @ np.linalg.solve(cap, d_r)


def shifted_charge_matrices(opset: OperatorSet, gate_charges: np.ndarray) -> Tuple[Dict[int, np.ndarray], Dict[int, np.ndarray]]:
    """Per-mode Q_t' (gate charge subtracted on charge modes) and its projected square."""
    n_h = opset.decomp.n_harmonic
    q, q2 = {}, {}
    for mode in range(len(opset.dims)):
        if mode < n_h:
            q[mode], q2[mode] = opset.charge[mode], opset.charge_sq[mode]
        else:
            diag = np.diag(opset.charge[mode]) - 2 * units.e * gate_charges[mode - n_h]
            q[mode], q2[mode] = np.diag(diag), np.diag(diag**2)
    return q, q2


def _quadratic_form(dims, coef: float, weights: np.ndarray, single: Dict, square: Dict, modes: Iterable[int]) -> SparseOperator:
    """``coef * (sum_mu weights_mu X_mu)^2`` with projected squares on the diagonal."""
    op = SparseOperator(dims)
    modes = [m for m in modes if weights[m] != 0]
    for mu in modes:
        for nu in modes:
            if mu == nu:
                op.add_term(coef * weights[mu] ** 2, {mu: square[mu]})
            else:
                op.add_term(coef * weights[mu] * weights[nu], {mu: single[mu], nu: single[nu]})
    return op


def hamiltonian_derivative(system: System, ref: ParameterRef) -> SparseOperator:
    """dH/dx (hertz per parameter unit) as an operator on the truncated space."""
    circuit, decomp, opset = system.circuit, system.decomp, system.opset
    _check_ref(circuit, decomp, ref)
    dims = opset.dims
    n_h, n = decomp.n_harmonic, decomp.n_modes
    ng = circuit.gate_charge_vector(decomp.n_charge)
    b = circuit.topology.loop_matrix
    if ref.kind == "C":
        q, q2 = shifted_charge_matrices(opset, ng)
        v = voltage_weights(circuit, decomp, ref.index)
        op = _quadratic_form(dims, -0.5 / units.h, v, q, q2, range(n))
        if decomp.n_charge and n_h:
            u = offset_transport(circuit, decomp, ref.index) @ ng
            for mode in range(n):
                if u[mode] != 0:
                    op.add_term(-2 * units.e * u[mode] / units.h, {mode: q[mode]})
        return op
    if ref.kind == "L":
        l = circuit.values[ref.index]
        w = decomp.w[ref.index]
        return _quadratic_form(dims, -0.5 / (units.h * l**2), w, opset.flux, opset.flux_sq, range(n_h))
    if ref.kind == "J":
        cos = opset.cos_operator(ref.index, b[ref.index] * circuit.flux_ext)
        return SparseOperator(dims, None, [(-c, f) for c, f in cos.terms])
    if ref.kind == "flux":
        op = SparseOperator(dims)
        for k in circuit.topology.junctions:
            if b[k]:
                sin = opset.sin_operator(k, b[k] * circuit.flux_ext)
                for c, f in sin.terms:
                    op.add_term(circuit.values[k] * b[k] * c, f)
        return op
    q, _ = shifted_charge_matrices(opset, ng)
    row = decomp.charge_c_inv[ref.index]
    op = SparseOperator(dims)
    for i, weight in enumerate(row):
        if weight != 0:
            op.add_term(-2 * units.e * weight / units.h, {n_h + i: q[n_h + i]})
    return op


# ---------------------------------------------------------------------------
# Eigenbasis derivatives
# ---------------------------------------------------------------------------

GREEN_RTOL = 1e-11
DENSE_GREEN_LIMIT = 400


def _apply(dims, factors: Factors, vecs: np.ndarray) -> np.ndarray:
    return SparseOperator(dims, None, [(1.0, factors)]).apply(vecs)


class SpectralDerivatives:
    """Hamiltonian derivatives acting on the computed eigenstates.

    ``dH/dx |f_i>`` is assembled from cached products of the mode operators
    with the eigenvectors, so each parameter costs a few linear
    combinations.  The first-order change of a state has a part inside the
    computed states (the perturbative sum) and a remainder outside them,
    ``-G_i dH/dx |f_i>`` with ``G_i`` the reduced resolvent on the
    complement; the remainder is obtained from a linear solve and is
    included wherever ``complete`` is set.

    ``degenerate`` is set when a pair of computed states closer than
    ``DEGENERACY_TOL * max|f|`` had its perturbative term dropped.
    """

    def __init__(self, system: System, spectrum: Spectrum, degeneracy_tol: float = DEGENERACY_TOL):
        self.system = system
        self.spectrum = spectrum
        self.degeneracy_tol = degeneracy_tol
        circuit, decomp, opset = system.circuit, system.decomp, system.opset
        vecs = spectrum.vectors
        dims = opset.dims
        n, n_h = decomp.n_modes, decomp.n_harmonic
        self.gate_charges = circuit.gate_charge_vector(decomp.n_charge)
        q, q2 = shifted_charge_matrices(opset, self.gate_charges)
        self._q, self._q2 = q, q2
        #: Q_t'_mu |f>, flux_mu |f> and their pairwise products (projected squares on the diagonal)
        self.charge_vecs = [_apply(dims, {m: q[m]}, vecs) for m in range(n)]
        self.charge_pairs = {}
        for mu in range(n):
            for nu in range(n):
                fac = {mu: q2[mu]} if mu == nu else {mu: q[mu], nu: q[nu]}
                self.charge_pairs[mu, nu] = _apply(dims, fac, vecs)
        self.flux_vecs = [_apply(dims, {m: opset.flux[m]}, vecs) for m in range(n_h)]
        self.flux_pairs = {}
        for mu in range(n_h):
            for nu in range(n_h):
                fac = {mu: opset.flux_sq[mu]} if mu == nu else {mu: opset.flux[mu], nu: opset.flux[nu]}
                self.flux_pairs[mu, nu] = _apply(dims, fac, vecs)
        b = circuit.topology.loop_matrix
        self.cos_vecs: Dict[int, np.ndarray] = {}
        self.sin_vecs: Dict[int, np.ndarray] = {}
        for k in circuit.topology.junctions:
            fac = opset.junctions[k]
            dag = {m: f.conj().T for m, f in fac.items()}
            ph = np.exp(1j * b[k] * circuit.flux_ext)
            d, dd = _apply(dims, fac, vecs), _apply(dims, dag, vecs)
            self.cos_vecs[k] = 0.5 * (ph * d + np.conj(ph) * dd)
            self.sin_vecs[k] = (ph * d - np.conj(ph) * dd) / 2j
        f = spectrum.frequencies
        gaps = f[None, :] - f[:, None]  # gaps[m, i] = f_i - f_m
        tol = degeneracy_tol * np.abs(f).max()
        off = ~np.eye(len(f), dtype=bool)
        close = off & (np.abs(gaps) < tol)
        self.degenerate = bool(close.any())
        self._inv_gaps = np.zeros_like(gaps)
        keep = off & ~close
        self._inv_gaps[keep] = 1.0 / gaps[keep]
        self._applied: Dict[ParameterRef, np.ndarray] = {}
        self._elements: Dict[ParameterRef, np.ndarray] = {}
        self._responses: Dict[Tuple[ParameterRef, int], np.ndarray] = {}
        self._dense_complement = None

    @classmethod
    def compute(cls, circuit: Circuit, truncations: Sequence[int], n_eig: int = DEFAULT_N_EIG, **kw) -> "SpectralDerivatives":
        system = build_system(circuit, truncations)
        return cls(system, diagonalize(system.hamiltonian, n_eig, config=system.config), **kw)

    @property
    def circuit(self) -> Circuit:
        return self.system.circuit

    @property
    def decomp(self) -> ModeDecomposition:
        return self.system.decomp

    @property
    def frequencies(self) -> np.ndarray:
        return self.spectrum.frequencies

    @property
    def vectors(self) -> np.ndarray:
        return self.spectrum.vectors

    def parameters(self, controls: bool = True) -> List[ParameterRef]:
        return circuit_parameters(self.circuit, self.decomp, controls)

    # -- first order -----------------------------------------------------

    def _combine(self, table: Mapping, weights: np.ndarray) -> np.ndarray:
        out = np.zeros_like(self.vectors)
        for (mu, nu), vecs in table.items():
            coef = weights[mu] * weights[nu]
            if coef != 0:
                out += coef * vecs
        return out

    def applied(self, ref: ParameterRef) -> np.ndarray:
        """``dH/dx |f_i>`` as columns."""
        if ref in self._applied:
            return self._applied[ref]
        circuit, decomp = self.circuit, self.decomp
        _check_ref(circuit, decomp, ref)
        n_h = decomp.n_harmonic
        b = circuit.topology.loop_matrix
        if ref.kind == "C":
            v = voltage_weights(circuit, decomp, ref.index)
            out = -0.5 / units.h * self._combine(self.charge_pairs, v)
            if decomp.n_charge and n_h:
                u = offset_transport(circuit, decomp, ref.index) @ self.gate_charges
                out = out - 2 * units.e / units.h * sum(u[m] * self.charge_vecs[m] for m in range(decomp.n_modes))
        elif ref.kind == "L":
            w = np.zeros(decomp.n_modes)
            w[:n_h] = decomp.w[ref.index, :n_h]
            l = circuit.values[ref.index]
            out = -0.5 / (units.h * l**2) * self._combine(self.flux_pairs, w)
        elif ref.kind == "J":
            out = -self.cos_vecs[ref.index]
        elif ref.kind == "flux":
            out = np.zeros_like(self.vectors)
            for k in circuit.topology.junctions:
                if b[k]:
                    out = out + circuit.values[k] * b[k] * self.sin_vecs[k]
        else:
            row = decomp.charge_c_inv[ref.index]
            out = -2 * units.e / units.h * sum(row[i] * self.charge_vecs[n_h + i] for i in range(decomp.n_charge))
        self._applied[ref] = out
        return out

    def hamiltonian_elements(self, ref: ParameterRef) -> np.ndarray:
        """``<f_m| dH/dx |f_i>`` for all computed states."""
        if ref not in self._elements:
            self._elements[ref] = self.vectors.conj().T @ self.applied(ref)
        return self._elements[ref]

    def eigenvalue_gradient(self, ref: ParameterRef) -> np.ndarray:
        """d f_i / dx for every computed state."""
        return np.real(np.diag(self.hamiltonian_elements(ref))).copy()

    def coefficients(self, ref: ParameterRef) -> np.ndarray:
        """``D[m, i]`` with ``d|f_i>/dx = sum_m D[m, i] |f_m>`` over computed states; zero diagonal."""
        return self.hamiltonian_elements(ref) * self._inv_gaps

    # -- remainder outside the computed states -----------------------------

    def _project_out(self, vecs: np.ndarray) -> np.ndarray:
        return vecs - self.vectors @ (self.vectors.conj().T @ vecs)

    def reduced_resolvent(self, state: int, rhs: np.ndarray) -> np.ndarray:
        """Solve ``Q (H - f_i) Q y = Q rhs`` on the complement ``Q`` of the computed states."""
        rhs = self._project_out(rhs.reshape(len(rhs), -1))
        f_i = self.frequencies[state]
        ham = self.system.hamiltonian
        if ham.dim <= DENSE_GREEN_LIMIT:
            if self._dense_complement is None:
                vals, basis = np.linalg.eigh(ham.to_dense())
                self._dense_complement = (vals[self.spectrum.n_eig:], basis[:, self.spectrum.n_eig:])
            vals, basis = self._dense_complement
            return basis @ ((basis.conj().T @ rhs) / (vals - f_i)[:, None])
        return np.column_stack([self._cg(state, col) for col in rhs.T])

    def _cg(self, state: int, rhs: np.ndarray) -> np.ndarray:
        ham = self.system.hamiltonian
        f_i = self.frequencies[state]
        gap = max(self.frequencies[-1] - f_i, 1.0)
        dim = ham.dim

        def matvec(y):
            y = self._project_out(y.reshape(dim, 1))
            return self._project_out(ham.apply(y) - f_i * y)[:, 0]

        diag = np.maximum(ham.diagonal - f_i, gap)
        precond = LinearOperator((dim, dim), matvec=lambda y: y / diag, dtype=complex)
        op = LinearOperator((dim, dim), matvec=matvec, dtype=complex)
        sol, info = cg(op, rhs, rtol=GREEN_RTOL, atol=0.0, M=precond, maxiter=20 * dim)
        if info != 0:
            logger.warning("reduced resolvent solve stopped early (info=%d)", info)
        return self._project_out(sol.reshape(dim, 1))[:, 0]

    def response(self, ref: ParameterRef, state: int) -> np.ndarray:
        """Part of ``d|f_i>/dx`` outside the computed states."""
        key = (ref, state)
        if key not in self._responses:
            rhs = self.applied(ref)[:, state]
            self._responses[key] = -self.reduced_resolvent(state, rhs)[:, 0]
        return self._responses[key]

    def eigenvector_gradient(self, ref: ParameterRef, state: int, complete: bool = False) -> np.ndarray:
        """``d|f_i>/dx``: the perturbative sum over the computed states, plus the remainder if ``complete``."""
        out = self.vectors @ self.coefficients(ref)[:, state]
        return out + self.response(ref, state) if complete else out

    def matrix_element(self, op_vecs: np.ndarray, left: int, right: int, hermitian: bool = True,
                       adjoint_vecs: Optional[np.ndarray] = None) -> "MatrixElement":
        """Tracker for ``<f_left| O |f_right>`` given ``O |f_m>`` as columns of ``op_vecs``."""
        return MatrixElement(self, op_vecs, left, right, hermitian, adjoint_vecs)

    # -- second order ----------------------------------------------------

    def second_applied(self, x: ParameterRef, lam: ParameterRef) -> np.ndarray:
        """``d2H/dx dlam |f_i>``; pairs not listed below vanish.

        Nonzero pairs are (flux, E_J), (flux, flux), (n_g, n_g) and (C, n_g).
        """
        zero = np.zeros_like(self.vectors)
        kinds = {x.kind, lam.kind}
        circuit, decomp = self.circuit, self.decomp
        b = circuit.topology.loop_matrix
        n_h = decomp.n_harmonic
        if kinds == {"flux", "J"}:
            k = x.index if x.kind == "J" else lam.index
            return b[k] * self.sin_vecs[k]
        if kinds == {"flux"}:
            return sum((circuit.values[k] * b[k] ** 2 * self.cos_vecs[k] for k in circuit.topology.junctions), zero)
        if kinds == {"n_g"}:
            return (2 * units.e) ** 2 * decomp.charge_c_inv[x.index, lam.index] / units.h * self.vectors
        if kinds == {"C", "n_g"}:
            c_ref, g_ref = (x, lam) if x.kind == "C" else (lam, x)
            j = g_ref.index
            v = voltage_weights(circuit, decomp, c_ref.index)
            weights = v[n_h + j] * v
            if decomp.n_charge and n_h:
                p = offset_transport(circuit, decomp, c_ref.index)
                weights = weights - p[:, j]
            out = 2 * units.e / units.h * sum(weights[m] * self.charge_vecs[m] for m in range(decomp.n_modes))
            if decomp.n_charge and n_h:
                out = out + (2 * units.e) ** 2 / units.h * (p[n_h:] @ self.gate_charges)[j] * self.vectors
            return out
        return zero

    def second_hamiltonian_elements(self, x: ParameterRef, lam: ParameterRef) -> np.ndarray:
        return self.vectors.conj().T @ self.second_applied(x, lam)

    def eigenvalue_second_gradient(self, x: ParameterRef, lam: ParameterRef, complete: bool = True) -> np.ndarray:
        """d2 f_i / dx dlam for every computed state.

        The remainder term needs one linear solve per state for ``lam``;
        with ``complete=False`` only the computed states enter the sum.
        """
        mx = self.hamiltonian_elements(x)
        ml = self.hamiltonian_elements(lam)
        direct = np.real(np.einsum("mi,mi->i", self.vectors.conj(), self.second_applied(x, lam)))
        # sum_m <i|dH_x|m><m|dH_l|i> / (f_i - f_m)
        total = direct + 2 * np.real(np.einsum("im,mi,mi->i", mx, ml, self._inv_gaps))
        if complete:
            applied = self.applied(x)
            for i in range(self.spectrum.n_eig):
                total[i] += 2 * np.real(np.vdot(applied[:, i], self.response(lam, i)))
        return total

    def second_gradient_states(self, x: ParameterRef, lam: ParameterRef, states: Sequence[int]) -> np.ndarray:
        """As :meth:`eigenvalue_second_gradient` but solving only for ``states``."""
        mx = self.hamiltonian_elements(x)
        ml = self.hamiltonian_elements(lam)
        applied = self.applied(x)
        second = self.second_applied(x, lam)
        out = []
        for i in states:
            val = np.real(np.vdot(self.vectors[:, i], second[:, i]))
            val += 2 * np.real(np.sum(mx[i] * ml[:, i] * self._inv_gaps[:, i]))
            val += 2 * np.real(np.vdot(applied[:, i], self.response(lam, i)))
            out.append(val)
        return np.array(out)


class MatrixElement:
    """``<f_a| O |f_b>`` for a parameter-independent operator and its derivatives.

    Two adjoint solves make the derivative with respect to every parameter
    cost one inner product each: the remainder contributions are
    ``-<a| dH/dx |y_a>`` and ``-<y_b| dH/dx |b>`` with
    ``y_a = G_a O |b>`` and ``y_b = G_b O^dagger |a>``.
    """

    def __init__(self, derivs: SpectralDerivatives, op_vecs: np.ndarray, left: int, right: int,
                 hermitian: bool = True, adjoint_vecs: Optional[np.ndarray] = None):
        self.derivs = derivs
        self.left, self.right = left, right
        vecs = derivs.vectors
        self.block = vecs.conj().T @ op_vecs  # <m| O |n>
        self.value = complex(self.block[left, right])
        adj = op_vecs if hermitian else adjoint_vecs
        if adj is None:
            raise ValueError("a non-Hermitian operator needs O^dagger |f_m> as well")
        self._y_left = derivs.reduced_resolvent(left, op_vecs[:, right])[:, 0]
        self._y_right = derivs.reduced_resolvent(right, adj[:, left])[:, 0]

    def derivative(self, ref: ParameterRef, explicit: complex = 0.0) -> complex:
        d = self.derivs.coefficients(ref)
        a, b = self.left, self.right
        inside = np.vdot(d[:, a], self.block[:, b]) + np.dot(self.block[a, :], d[:, b])
        applied = self.derivs.applied(ref)
        outside = -np.conj(np.vdot(self._y_left, applied[:, a])) - np.vdot(self._y_right, applied[:, b])
        return complex(inside + outside + explicit)


# ---------------------------------------------------------------------------
# Chain rule
# ---------------------------------------------------------------------------


@dataclass
class LossPartials:
    """Partial derivatives of a scalar loss.

    ``vectors`` maps a state index to ``g_i`` with
    ``dL = 2 Re <g_i | d f_i>`` (the derivative with respect to the complex
    conjugate of the state).
    """

    frequencies: Optional[np.ndarray] = None
    vectors: Mapping[int, np.ndarray] = field(default_factory=dict)
    explicit: Mapping[ParameterRef, float] = field(default_factory=dict)


def backprop_loss(partials: LossPartials, derivs: SpectralDerivatives, params: Sequence[ParameterRef],
                  complete: bool = False) -> np.ndarray:
    """dL/dx for each parameter in ``params``.

    With ``complete`` the eigenvector changes include the part outside the
    computed states.
    """
    out = np.zeros(len(params))
    basis = derivs.spectrum.vectors
    projected = {i: basis.conj().T @ g for i, g in partials.vectors.items()}
    for p, ref in enumerate(params):
        total = float(partials.explicit.get(ref, 0.0))
        if partials.frequencies is not None:
            total += float(np.dot(partials.frequencies, derivs.eigenvalue_gradient(ref)[: len(partials.frequencies)]))
        if projected:
            coef = derivs.coefficients(ref)
            for i, g in projected.items():
                total += 2 * float(np.real(np.vdot(g, coef[:, i])))
                if complete:
                    total += 2 * float(np.real(np.vdot(partials.vectors[i], derivs.response(ref, i))))
        out[p] = total
    return out


# ---------------------------------------------------------------------------
# Finite-difference certification
# ---------------------------------------------------------------------------

DEFAULT_STEPS = {"C": 1e-6, "L": 1e-6, "J": 1e-6, "flux": 1e-4, "n_g": 1e-3}
FD_NOISE = 100


@dataclass
class GradientCheck:
    parameter: str
    state: int
    analytic: float
    finite_difference: float
    #: round-off level of the central difference, ``FD_NOISE * eps * max|f| / step``
    noise_floor: float = 0.0

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.finite_difference))
        return 0.0 if scale == 0 else abs(self.analytic - self.finite_difference) / scale

    def ok(self, tol: float) -> bool:
        """Relative agreement, or both values inside the finite-difference noise."""
        return self.rel_error < tol or abs(self.analytic - self.finite_difference) < self.noise_floor

    def to_dict(self) -> dict:
        return {
            "parameter": self.parameter,
            "state": self.state,
            "analytic": self.analytic,
            "finite_difference": self.finite_difference,
            "rel_error": self.rel_error,
            "noise_floor": self.noise_floor,
        }


def finite_difference_frequencies(
    circuit: Circuit,
    decomp: ModeDecomposition,
    truncations: Sequence[int],
    ref: ParameterRef,
    step: float,
    n_eig: int,
) -> np.ndarray:
    """Central difference of all computed eigenfrequencies; ``step`` is absolute."""
    x0 = parameter_value(circuit, decomp, ref)
    out = []
    for sign in (1, -1):
        c = with_parameter(circuit, decomp, ref, x0 + sign * step)
        system = build_system(c, truncations)
        out.append(diagonalize(system.hamiltonian, n_eig, config=system.config).frequencies)
    return (out[0] - out[1]) / (2 * step)


def absolute_step(value: float, ref: ParameterRef, steps: Mapping[str, float] = DEFAULT_STEPS) -> float:
    """Element steps are relative to the value; flux and gate-charge steps are absolute."""
    return steps[ref.kind] * value if ref.is_element else steps[ref.kind]


def verify_gradients(
    circuit: Circuit,
    truncations: Sequence[int],
    params: Optional[Sequence[ParameterRef]] = None,
    states: Sequence[int] = (0, 1, 2),
    n_eig: int = DEFAULT_N_EIG,
    steps: Mapping[str, float] = DEFAULT_STEPS,
) -> List[GradientCheck]:
    """Compare analytic eigenfrequency gradients with central differences."""
    derivs = SpectralDerivatives.compute(circuit, truncations, n_eig)
    params = derivs.parameters() if params is None else params
    report = []
    for ref in params:
        value = parameter_value(circuit, derivs.decomp, ref)
        step = absolute_step(value, ref, steps)
        fd = finite_difference_frequencies(circuit, derivs.decomp, truncations, ref, step, n_eig)
        grad = derivs.eigenvalue_gradient(ref)
        floor = FD_NOISE * np.finfo(float).eps * np.abs(derivs.frequencies).max() / step
        for i in states:
            report.append(GradientCheck(ref.name, i, float(grad[i]), float(fd[i]), float(floor)))
    return report
