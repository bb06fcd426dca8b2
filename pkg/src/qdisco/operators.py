"""Truncated mode operators and the circuit Hamiltonian.

Harmonic modes use a Fock basis, charge modes a centred Cooper-pair number
basis.  Operators are kept in factored form: a diagonal over the product
space plus a sum of terms, each a scalar times a Kronecker product of small
per-mode matrices.  Applying such an operator costs ``K * sum(m_i)`` per
term and never needs the full ``K x K`` matrix, which for several coupled
harmonic modes would be dense.

All energies are in hertz (divided by Planck's constant).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache, reduce
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, sparse

from . import units
from .circuit import Circuit
from .transform import ModeDecomposition, compute_transformation

DEFAULT_K_MAX = 16000


class TruncationError(ValueError):
    pass


@dataclass(frozen=True)
class HilbertConfig:
    """Truncation number per mode, harmonic modes first."""

    truncations: Tuple[int, ...]
    labels: Tuple[str, ...]
    k_max: Optional[int] = None

    def __post_init__(self):
        if len(self.truncations) != len(self.labels):
            raise TruncationError("one truncation number per mode is required")
        for m, label in zip(self.truncations, self.labels):
            if int(m) != m or m < 1:
                raise TruncationError(f"truncation numbers must be positive integers, got {m}")
            if label == "charge" and m % 2 == 0:
                raise TruncationError(f"charge-mode truncation must be odd, got {m}")
        if self.k_max is not None and self.dim > self.k_max:
            raise TruncationError(f"K = {self.dim} exceeds the limit {self.k_max}")

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(int(m) for m in self.truncations)

    @property
    def dim(self) -> int:
        return int(np.prod(self.truncations, dtype=np.int64)) if self.truncations else 1

    def enlarged(self, t: int) -> "HilbertConfig":
        """Every truncation increased by ``t`` (charge modes stay odd for even t)."""
        return HilbertConfig(tuple(m + t for m in self.truncations), self.labels, self.k_max)

    def basis_offsets(self, other: "HilbertConfig") -> Tuple[int, ...]:
        """Index shift that embeds this basis in a larger ``other`` basis."""
        if self.labels != other.labels:
            raise TruncationError("mode layouts differ")
        out = []
        for m, big, label in zip(self.truncations, other.truncations, self.labels):
            if big < m:
                raise TruncationError("target basis is smaller")
            out.append((big - m) // 2 if label == "charge" else 0)
        return tuple(out)


def config_for(decomp: ModeDecomposition, truncations: Sequence[int], k_max=None) -> HilbertConfig:
    return HilbertConfig(tuple(int(m) for m in truncations), tuple(decomp.labels), k_max)


# ---------------------------------------------------------------------------
# Factored operators
# ---------------------------------------------------------------------------

Factors = Dict[int, np.ndarray]


@dataclass
class SparseOperator:
    """``diag(d) + sum_t c_t * kron(A_t0, A_t1, ...)`` over a product space.

    Missing factors in a term are identities.  ``to_sparse`` and
    ``to_dense`` materialise the matrix for inspection and small problems.
    """

    dims: Tuple[int, ...]
    diagonal: Optional[np.ndarray] = None
    terms: List[Tuple[complex, Factors]] = field(default_factory=list)
    hermitian: bool = True

    @property
    def dim(self) -> int:
        return int(np.prod(self.dims, dtype=np.int64)) if self.dims else 1

    def add_term(self, coef: complex, factors: Factors) -> None:
        self.terms.append((coef, factors))

    def apply(self, vecs: np.ndarray) -> np.ndarray:
        single = vecs.ndim == 1
        v = vecs.reshape(self.dim, -1)
        out = np.zeros(v.shape, dtype=complex)
        if self.diagonal is not None:
            out += self.diagonal[:, None] * v
        for coef, factors in self.terms:
            out += coef * _apply_factors(v, self.dims, factors)
        return out[:, 0] if single else out

    def matrix_elements(self, left: np.ndarray, right: Optional[np.ndarray] = None) -> np.ndarray:
        """``left^dagger A right`` for column-stacked state vectors."""
        right = left if right is None else right
        return left.conj().T @ self.apply(right)

    def adjoint(self) -> "SparseOperator":
        diag = None if self.diagonal is None else np.conj(self.diagonal)
        terms = [(np.conj(c), {m: f.conj().T for m, f in fac.items()}) for c, fac in self.terms]
        return SparseOperator(self.dims, diag, terms, self.hermitian)

    def stored_entries(self) -> int:
        """Numbers kept in memory by the factored form."""
        count = 0 if self.diagonal is None else self.dim
        for _, factors in self.terms:
            count += sum(int(np.count_nonzero(f)) for f in factors.values())
        return count

    def to_sparse(self) -> sparse.csr_matrix:
        out = sparse.csr_matrix((self.dim, self.dim), dtype=complex)
        if self.diagonal is not None:
            out = out + sparse.diags(self.diagonal.astype(complex), format="csr")
        for coef, factors in self.terms:
            mats = [sparse.csr_matrix(factors[i]) if i in factors else sparse.identity(d, format="csr")
                    for i, d in enumerate(self.dims)]
            out = out + coef * reduce(lambda a, b: sparse.kron(a, b, format="csr"), mats)
        out.eliminate_zeros()
        return out

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.dim, self.dim), dtype=complex)
        if self.diagonal is not None:
            out[np.diag_indices(self.dim)] += self.diagonal
        for coef, factors in self.terms:
            mats = [factors.get(i, np.eye(d)) for i, d in enumerate(self.dims)]
            out += coef * reduce(np.kron, mats)
        return out

    def norm_bound(self) -> float:
        """Triangle-inequality upper bound on the spectral norm.

        Each factor uses ``||A||_2 <= sqrt(||A||_1 ||A||_inf)``, which avoids an SVD.
        """
        total = 0.0 if self.diagonal is None else float(np.abs(self.diagonal).max())
        for coef, factors in self.terms:
            norms = [np.sqrt(np.linalg.norm(f, 1) * np.linalg.norm(f, np.inf)) for f in factors.values()]
            total += abs(coef) * float(np.prod(norms))
        return total

    def dump_coo(self) -> str:
        """Coordinate text dump ``row col real imag`` for debugging."""
        coo = self.to_sparse().tocoo()
        return "\n".join(f"{r} {c} {v.real:.17g} {v.imag:.17g}" for r, c, v in zip(coo.row, coo.col, coo.data))


def _apply_factors(v: np.ndarray, dims: Tuple[int, ...], factors: Factors) -> np.ndarray:
    out = v
    for mode, mat in factors.items():
        before = int(np.prod(dims[:mode], dtype=np.int64))
        block = out.reshape(before, dims[mode], -1)
        if block.shape[2] == 1:
            out = out.reshape(before, dims[mode]) @ mat.T
        else:
            out = np.matmul(mat, block)
    return out.reshape(v.shape)


# ---------------------------------------------------------------------------
# Single-mode matrices
# ---------------------------------------------------------------------------


def annihilation(m: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, m, dtype=float)), k=1)


def charge_numbers(m: int) -> np.ndarray:
    half = (m - 1) // 2
    return np.arange(-half, half + 1, dtype=float)


def charge_shift(m: int, steps: int) -> np.ndarray:
    """Matrix of exp(i * steps * phi): |n> -> |n + steps> within the window."""
    return np.eye(m, k=-int(steps))


@lru_cache(maxsize=32)
def _position_eigensystem(size: int) -> Tuple[np.ndarray, np.ndarray]:
    off = np.sqrt(np.arange(1, size, dtype=float))
    return linalg.eigh_tridiagonal(np.zeros(size), off)


def displacement(m: int, beta: float) -> np.ndarray:
    """<j| exp(i beta (a + a^dagger)) |k> for j, k < m.

    The exponential is taken in a padded Fock space large enough for the
    displaced states to fit, then projected, so the block equals the
    exact infinite-dimensional matrix elements to round-off.
    """
    pad_to = int(np.ceil((np.sqrt(m) + abs(beta) + 8.0) ** 2)) + 8
    size = max(m + 16, pad_to)
    lam, vecs = _position_eigensystem(size)
    top = vecs[:m]
    return (top * np.exp(1j * beta * lam)) @ top.T


# ---------------------------------------------------------------------------
# Operator sets and Hamiltonian assembly
# ---------------------------------------------------------------------------


@dataclass
class OperatorSet:
    """Per-mode operators of one decomposed circuit in one truncation.

    ``charge`` and ``flux`` hold single-mode matrices (gate charge not
    included); ``charge_sq`` and ``flux_sq`` hold the projected squares.
    ``junctions`` maps branch index to the factors of exp(i w_k^T phi),
    without the external-flux phase.
    """

    decomp: ModeDecomposition
    config: HilbertConfig
    charge: Dict[int, np.ndarray]
    charge_sq: Dict[int, np.ndarray]
    flux: Dict[int, np.ndarray]
    flux_sq: Dict[int, np.ndarray]
    number: Dict[int, np.ndarray]
    junctions: Dict[int, Factors]
    flux_zpf: np.ndarray

    @property
    def dims(self) -> Tuple[int, ...]:
        return self.config.dims

    def lifted(self, mode: int, mat: np.ndarray, coef: complex = 1.0) -> SparseOperator:
        return SparseOperator(self.dims, None, [(coef, {mode: mat})])

    def exp_operator(self, branch: int, phase: float = 0.0) -> SparseOperator:
        return SparseOperator(self.dims, None, [(np.exp(1j * phase), self.junctions[branch])], hermitian=False)

    def cos_operator(self, branch: int, phase: float) -> SparseOperator:
        d = self.junctions[branch]
        dag = {m: f.conj().T for m, f in d.items()}
        return SparseOperator(self.dims, None, [(0.5 * np.exp(1j * phase), d), (0.5 * np.exp(-1j * phase), dag)])

    def sin_operator(self, branch: int, phase: float) -> SparseOperator:
        d = self.junctions[branch]
        dag = {m: f.conj().T for m, f in d.items()}
        return SparseOperator(
            self.dims, None, [(np.exp(1j * phase) / 2j, d), (-np.exp(-1j * phase) / 2j, dag)]
        )


def build_mode_operators(
    decomp: ModeDecomposition, config: HilbertConfig, junctions: Sequence[int] = ()
) -> OperatorSet:
    """Per-mode operators and junction displacement/shift factors.

    Parameters
    ----------
    junctions
        Branch indices of the junctions whose exponentials are needed.
    """
    if tuple(config.labels) != tuple(decomp.labels):
        raise TruncationError("truncation layout does not match the decomposition")
    if config.k_max is not None and config.dim > config.k_max:
        raise TruncationError(f"K = {config.dim} exceeds the limit {config.k_max}")
    n_h = decomp.n_harmonic
    charge, charge_sq, flux, flux_sq, number = {}, {}, {}, {}, {}
    zpf = np.zeros(n_h)
    imp = decomp.impedances
    for mode, m in enumerate(config.dims):
        if mode < n_h:
            a = annihilation(m)
            ad = a.T
            nn = np.arange(m, dtype=float)
            q_scale = np.sqrt(units.hbar / (2 * imp[mode]))
            f_scale = np.sqrt(units.hbar * imp[mode] / 2)
            charge[mode] = -1j * q_scale * (a - ad)
            charge_sq[mode] = q_scale**2 * (np.diag(2 * nn + 1) - a @ a - ad @ ad)
            flux[mode] = f_scale * (a + ad)
            flux_sq[mode] = f_scale**2 * (np.diag(2 * nn + 1) + a @ a + ad @ ad)
            number[mode] = np.diag(nn)
            zpf[mode] = units.FLUX_TO_PHASE * f_scale
        else:
            n = charge_numbers(m)
            charge[mode] = np.diag(2 * units.e * n)
            charge_sq[mode] = np.diag((2 * units.e * n) ** 2)
    factors: Dict[int, Factors] = {}
    for k in junctions:
        fac: Factors = {}
        for mode, m in enumerate(config.dims):
            weight = decomp.w[k, mode]
            if weight == 0:
                continue
            if mode < n_h:
                fac[mode] = displacement(m, zpf[mode] * weight)
            else:
                fac[mode] = charge_shift(m, int(round(weight)))
        factors[k] = fac
    return OperatorSet(decomp, config, charge, charge_sq, flux, flux_sq, number, factors, zpf)


def _mode_grid(config: HilbertConfig, mode: int, values: np.ndarray) -> np.ndarray:
    shape = [1] * len(config.dims)
    shape[mode] = config.dims[mode]
    return values.reshape(shape)


def shifted_charge_numbers(config: HilbertConfig, n_h: int, gate_charges: np.ndarray) -> List[np.ndarray]:
    """Per charge mode, the broadcastable array n - n_g over the product grid."""
    out = []
    for j, mode in enumerate(range(n_h, len(config.dims))):
        out.append(_mode_grid(config, mode, charge_numbers(config.dims[mode]) - gate_charges[j]))
    return out


def diagonal_energies(circuit: Circuit, opset: OperatorSet, gate_charges: Optional[np.ndarray] = None) -> np.ndarray:
    """Quadratic part of the Hamiltonian, which is diagonal in this basis."""
    decomp, config = opset.decomp, opset.config
    n_h = decomp.n_harmonic
    if gate_charges is None:
        gate_charges = circuit.gate_charge_vector(decomp.n_charge)
    grid = np.zeros(config.dims)
    freqs = decomp.harmonic_frequencies
    for mode in range(n_h):
        grid = grid + _mode_grid(config, mode, freqs[mode] * (np.arange(config.dims[mode]) + 0.5))
    if decomp.n_charge:
        shifted = shifted_charge_numbers(config, n_h, gate_charges)
        block = decomp.charge_c_inv * (2 * units.e) ** 2 / (2 * units.h)
        for i, ni in enumerate(shifted):
            for j, nj in enumerate(shifted):
                grid = grid + block[i, j] * ni * nj
    return np.asarray(grid, dtype=float).reshape(-1)


def assemble_hamiltonian(
    circuit: Circuit,
    decomp: ModeDecomposition,
    opset: OperatorSet,
    flux_ext: Optional[float] = None,
    gate_charges: Optional[Sequence[float]] = None,
) -> SparseOperator:
    """Hamiltonian in hertz over the truncated product space.

    Gate charges enter as ``Q_t -> Q_t - 2e n_g`` on the charge modes.
    """
    if opset.decomp is not decomp:
        raise TruncationError("operator set was built for a different decomposition")
    flux = circuit.flux_ext if flux_ext is None else float(flux_ext)
    ng = circuit.gate_charge_vector(decomp.n_charge) if gate_charges is None else np.asarray(gate_charges, float)
    if ng.shape != (decomp.n_charge,):
        raise ValueError(f"expected {decomp.n_charge} gate charges")
    ham = SparseOperator(opset.dims, diagonal_energies(circuit, opset, ng))
    b = circuit.topology.loop_matrix
    for k in circuit.topology.junctions:
        phase = b[k] * flux
        ej = circuit.values[k]
        cos = opset.cos_operator(k, phase)
        for coef, factors in cos.terms:
            ham.add_term(-ej * coef, factors)
    return ham


@dataclass
class System:
    """A circuit together with its decomposition, operators and Hamiltonian."""

    circuit: Circuit
    decomp: ModeDecomposition
    opset: OperatorSet
    hamiltonian: SparseOperator

    @property
    def config(self) -> HilbertConfig:
        return self.opset.config


def build_system(
    circuit: Circuit,
    truncations: Sequence[int],
    decomp: Optional[ModeDecomposition] = None,
    k_max: Optional[int] = None,
) -> System:
    decomp = compute_transformation(circuit) if decomp is None else decomp
    config = config_for(decomp, truncations, k_max)
    opset = build_mode_operators(decomp, config, circuit.topology.junctions)
    return System(circuit, decomp, opset, assemble_hamiltonian(circuit, decomp, opset))


def node_charge_operator(opset: OperatorSet, node: int, basis: str = "original") -> SparseOperator:
    """Charge operator of node ``node`` (1-based, ground excluded) or of mode ``node``.

    In the original basis ``Q = R Q_t``, so node ``i`` gets row ``i`` of R.
    """
    n = opset.decomp.n_modes
    if not 1 <= node <= n:
        raise IndexError(f"node index {node} out of range 1..{n}")
    if basis == "transformed":
        return opset.lifted(node - 1, opset.charge[node - 1])
    if basis != "original":
        raise ValueError("basis must be 'original' or 'transformed'")
    row = opset.decomp.R[node - 1]
    op = SparseOperator(opset.dims)
    for mode in range(n):
        if row[mode] != 0:
            op.add_term(row[mode], {mode: opset.charge[mode]})
    return op
