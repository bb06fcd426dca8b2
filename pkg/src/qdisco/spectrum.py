"""Lowest eigenpairs, the truncation convergence test and truncation assignment."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, LinearOperator, eigsh

from . import units
from .circuit import Circuit
from .operators import (
    HilbertConfig,
    SparseOperator,
    System,
    TruncationError,
    assemble_hamiltonian,
    build_system,
    config_for,
)
from .transform import ModeDecomposition, compute_transformation

logger = logging.getLogger(__name__)

DENSE_LIMIT = 400
DEFAULT_N_EIG = 10
RESIDUAL_TOL = 1e-8
# relative to each eigenvalue; well below what the convergence test can resolve
LANCZOS_TOL = 1e-10


class DiagonalizationError(ArithmeticError):
    """The eigensolver did not reach the residual target."""


@dataclass
class Spectrum:
    """Lowest eigenfrequencies (Hz, ascending) and unit eigenvectors as columns."""

    frequencies: np.ndarray
    vectors: np.ndarray
    config: Optional[HilbertConfig] = None
    residual: float = 0.0

    @property
    def n_eig(self) -> int:
        return len(self.frequencies)

    @property
    def qubit_frequency(self) -> float:
        return float(self.frequencies[1] - self.frequencies[0])

    @property
    def relative(self) -> np.ndarray:
        return self.frequencies - self.frequencies[0]


def _fix_phases(vecs: np.ndarray) -> np.ndarray:
    idx = np.abs(vecs).argmax(axis=0)
    phases = vecs[idx, np.arange(vecs.shape[1])]
    return vecs * (np.abs(phases) / phases)


def diagonalize(
    hamiltonian: SparseOperator,
    n_eig: int = DEFAULT_N_EIG,
    method: str = "auto",
    config: Optional[HilbertConfig] = None,
    max_iter: Optional[int] = None,
) -> Spectrum:
    """Lowest ``n_eig`` eigenpairs of a Hermitian operator.

    ``method`` is ``"dense"``, ``"sparse"`` (Lanczos on the factored
    operator) or ``"auto"``, which uses the dense solver up to K = 400.
    Eigenvector phases are fixed so the largest component is real and
    positive.
    """
    dim = hamiltonian.dim
    n_eig = min(n_eig, dim)
    if method == "auto":
        method = "dense" if dim <= DENSE_LIMIT else "sparse"
    if method == "sparse" and n_eig >= dim - 1:
        method = "dense"
    if method == "dense":
        mat = hamiltonian.to_dense()
        vals, vecs = linalg.eigh(mat, subset_by_index=[0, n_eig - 1], driver="evr")
    elif method == "sparse":
        op = LinearOperator((dim, dim), matvec=hamiltonian.apply, matmat=hamiltonian.apply, dtype=complex)
        start = np.linspace(1.0, 2.0, dim).astype(complex)
        ncv = min(dim, max(2 * n_eig + 1, 40))
        try:
            vals, vecs = eigsh(op, k=n_eig, which="SA", v0=start, ncv=ncv, tol=LANCZOS_TOL,
                               maxiter=max_iter or 50 * dim)
        except (ArpackNoConvergence, ArpackError) as exc:
            raise DiagonalizationError(f"Lanczos did not converge: {exc}") from exc
    else:
        raise ValueError(f"unknown method {method!r}")
    order = np.argsort(vals)
    vals = np.asarray(vals[order], dtype=float)
    vecs = _fix_phases(vecs[:, order])
    vecs = vecs / np.linalg.norm(vecs, axis=0)
    resid = np.linalg.norm(hamiltonian.apply(vecs) - vecs * vals, axis=0).max()
    scale = hamiltonian.norm_bound()
    if resid > RESIDUAL_TOL * scale:
        raise DiagonalizationError(f"residual {resid:.3g} exceeds {RESIDUAL_TOL:g} x |H| = {scale:.3g}")
    return Spectrum(vals, vecs, config, float(resid))


def solve(circuit: Circuit, truncations: Sequence[int], n_eig: int = DEFAULT_N_EIG,
          method: str = "auto") -> Tuple[System, Spectrum]:
    system = build_system(circuit, truncations)
    return system, diagonalize(system.hamiltonian, n_eig, method, system.config)


# ---------------------------------------------------------------------------
# Convergence test
# ---------------------------------------------------------------------------

CONVERGENCE_THRESHOLD = 1e-5
CONVERGENCE_STATE = 2


def embed_vector(vec: np.ndarray, small: HilbertConfig, big: HilbertConfig) -> np.ndarray:
    """Zero-pad a product-basis vector of ``small`` into the basis of ``big``.

    Charge windows are centred, so a charge mode is padded on both sides.
    """
    offsets = small.basis_offsets(big)
    out = np.zeros(big.dims, dtype=complex)
    window = tuple(slice(o, o + m) for o, m in zip(offsets, small.dims))
    out[window] = vec.reshape(small.dims)
    return out.reshape(-1)


def convergence_error(small: Spectrum, big: Spectrum, state: int = CONVERGENCE_STATE) -> float:
    """1 - |<f~|f'>|^2 between a state and its recomputation in a larger basis."""
    if small.config is None or big.config is None:
        raise ValueError("both spectra need their truncation configuration")
    padded = embed_vector(small.vectors[:, state], small.config, big.config)
    overlap = abs(np.vdot(padded, big.vectors[:, state])) ** 2
    return float(min(max(1.0 - overlap, 0.0), 1.0))


@dataclass
class ConvergenceResult:
    passed: bool
    error: float
    spectrum: Spectrum
    enlarged: Spectrum

    def __bool__(self) -> bool:
        return self.passed


def check_convergence(
    circuit: Circuit,
    truncations: Sequence[int],
    t: int = 2,
    threshold: float = CONVERGENCE_THRESHOLD,
    state: int = CONVERGENCE_STATE,
    n_eig: Optional[int] = None,
    decomp: Optional[ModeDecomposition] = None,
    spectrum: Optional[Spectrum] = None,
    k_max: Optional[int] = None,
) -> ConvergenceResult:
    """Compare ``state`` with its recomputation after adding ``t`` to every truncation.

    A previously computed ``spectrum`` for ``truncations`` is reused when given.
    """
    decomp = compute_transformation(circuit) if decomp is None else decomp
    n_eig = max(state + 1, 3) if n_eig is None else n_eig
    if spectrum is None:
        system = build_system(circuit, truncations, decomp)
        spectrum = diagonalize(system.hamiltonian, n_eig, config=system.config)
    big_cfg = spectrum.config.enlarged(t)
    if k_max is not None and big_cfg.dim > k_max:
        raise TruncationError(f"enlarged K = {big_cfg.dim} exceeds the limit {k_max}")
    big_sys = build_system(circuit, big_cfg.truncations, decomp)
    enlarged = diagonalize(big_sys.hamiltonian, spectrum.n_eig, config=big_sys.config)
    err = convergence_error(spectrum, enlarged, state)
    return ConvergenceResult(err < threshold, err, spectrum, enlarged)


# ---------------------------------------------------------------------------
# Truncation assignment
# ---------------------------------------------------------------------------

PEAK_THRESHOLD = 1e-6
MIN_FIT_POINTS = 3
DEFAULT_C_MAX = 21


def even_truncations(labels: Sequence[str], budget: int) -> List[int]:
    """Equal share floor(K^(1/n)) per mode; charge modes moved to the nearest odd number that fits."""
    n = len(labels)
    base = max(int(math.floor(budget ** (1.0 / n) + 1e-9)), 1)
    out = [base] * n
    for i, label in enumerate(labels):
        if label == "charge" and out[i] % 2 == 0:
            out[i] += 1
            if np.prod(out, dtype=np.int64) > budget:
                out[i] -= 2
    return [max(m, 1) for m in out]


def charge_window(ej_eff: float, ec_eff: float, c_max: int = DEFAULT_C_MAX) -> int:
    """Odd charge-basis size covering three ground-state widths.

    The width is (E_J / 8 E_C)^(1/4); the result is at least 3.
    """
    sigma = (ej_eff / (8 * ec_eff)) ** 0.25 if ej_eff > 0 else 0.0
    c = min(c_max, int(math.floor(3 * sigma)))
    if c % 2 == 0:
        c += 1
    return max(c, 3)


def effective_charge_energies(circuit: Circuit, decomp: ModeDecomposition) -> Tuple[np.ndarray, np.ndarray]:
    """(E_J,eff, E_C,eff) per charge mode in hertz from the quadratic expansion of the junctions."""
    n_h = decomp.n_harmonic
    ec = units.e**2 * np.diag(decomp.charge_c_inv) / (2 * units.h)
    ej = np.zeros(decomp.n_charge)
    for k in circuit.topology.junctions:
        ej += circuit.values[k] * decomp.w[k, n_h:] ** 2
    return ej, ec


def mode_profile(vec: np.ndarray, dims: Sequence[int], mode: int) -> np.ndarray:
    """Squared magnitude per basis index of one mode, maximised over the other modes."""
    amps = np.abs(vec.reshape(dims))
    axes = tuple(i for i in range(len(dims)) if i != mode)
    return amps.max(axis=axes) ** 2 if axes else amps**2


def last_peak(profile: np.ndarray, threshold: float = PEAK_THRESHOLD) -> int:
    """Highest index whose weight exceeds ``threshold`` and both neighbours."""
    padded = np.concatenate([[-1.0], profile, [-1.0]])
    for n in range(len(profile) - 1, -1, -1):
        p = padded[n + 1]
        if p >= threshold and p > padded[n] and p > padded[n + 2]:
            return n
    return 0


def decay_rate(profile: np.ndarray, peak: int) -> Optional[float]:
    """Rate alpha of ``profile ~ A exp(-alpha (j - peak))`` from a log-linear fit of the tail.

    Components at the round-off floor (for example the vanishing parity
    partners of a symmetric state) are left out of the fit.
    """
    idx = np.arange(peak + 1, len(profile))
    idx = idx[profile[idx] > 1e-24 * profile.max()]
    if len(idx) < MIN_FIT_POINTS:
        return None
    slope = np.polyfit(idx, np.log(profile[idx]), 1)[0]
    return float(-slope) if slope < 0 else None


def harmonic_cutoffs(alphas: Sequence[float], peaks: Sequence[int], budget: float) -> List[int]:
    """Cutoffs from decay rates and peak positions for a harmonic budget ``K_h``."""
    alphas = np.asarray(alphas, float)
    n = len(alphas)
    prelim = np.floor((budget * np.prod(alphas)) ** (1.0 / n) / alphas)
    shifted = prelim + np.asarray(peaks)
    shifted = np.maximum(shifted, 1.0)
    scaled = shifted * (budget / np.prod(shifted)) ** (1.0 / n)
    return [max(int(h), 2) for h in np.floor(scaled)]


def _fit_budget(truncations: List[int], labels: Sequence[str], budget: int) -> List[int]:
    out = list(truncations)
    while np.prod(out, dtype=np.int64) > budget:
        harmonic = [i for i, lab in enumerate(labels) if lab == "harmonic" and out[i] > 2]
        pool = harmonic or [i for i in range(len(out)) if out[i] > (3 if labels[i] == "charge" else 1)]
        if not pool:
            break
        i = max(pool, key=lambda j: out[j])
        out[i] -= 2 if labels[i] == "charge" else 1
    return out


def assign_truncations(
    circuit: Circuit,
    budget: int,
    c_max: int = DEFAULT_C_MAX,
    proxy_state: int = 1,
    decomp: Optional[ModeDecomposition] = None,
    proxy: Optional[Spectrum] = None,
) -> HilbertConfig:
    """Heuristic per-mode truncation numbers with product at most ``budget``.

    Charge modes get a window from the quadratic expansion of the junction
    terms. Harmonic modes share the remainder according to how fast the
    proxy eigenstate decays in each Fock basis, shifted by the position of
    its outermost peak. ``proxy`` may carry an already computed spectrum in
    the even allocation.
    """
    decomp = compute_transformation(circuit) if decomp is None else decomp
    labels = decomp.labels
    even = even_truncations(labels, budget)
    n_h, n_c = decomp.n_harmonic, decomp.n_charge
    if n_h == 0:
        return config_for(decomp, even)
    charge = []
    if n_c:
        ej, ec = effective_charge_energies(circuit, decomp)
        charge = [charge_window(a, b, c_max) for a, b in zip(ej, ec)]
    h_budget = budget / float(np.prod(charge)) if charge else float(budget)
    even_cfg = config_for(decomp, even)
    if proxy is None or proxy.config != even_cfg or proxy.n_eig <= proxy_state:
        try:
            system = build_system(circuit, even, decomp)
            proxy = diagonalize(system.hamiltonian, proxy_state + 1, config=system.config)
        except (DiagonalizationError, TruncationError) as exc:
            logger.warning("proxy diagonalization failed (%s); using even allocation", exc)
            return even_cfg
    vec = proxy.vectors[:, proxy_state]
    alphas: List[Optional[float]] = []
    peaks = []
    for mode in range(n_h):
        profile = mode_profile(vec, even_cfg.dims, mode)
        peak = last_peak(profile)
        peaks.append(peak)
        alphas.append(decay_rate(profile, peak))
    fitted = [a for a in alphas if a is not None]
    fallback = float(np.mean(fitted)) if fitted else 1.0
    alphas = [fallback if a is None else a for a in alphas]
    harmonic = harmonic_cutoffs(alphas, peaks, h_budget)
    return config_for(decomp, _fit_budget(harmonic + charge, labels, budget))


# ---------------------------------------------------------------------------
# Parameter sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    parameter: str
    values: np.ndarray
    frequencies: np.ndarray
    failed: np.ndarray

    def to_csv(self) -> str:
        """Rows of ``param_value, f0, f1, ...`` with frequencies in GHz."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        n = self.frequencies.shape[1]
        writer.writerow(["param_value"] + [f"f{i}" for i in range(n)])
        for value, row in zip(self.values, self.frequencies):
            writer.writerow([f"{value:.12g}"] + [f"{f / 1e9:.12g}" for f in row])
        return buf.getvalue()


def sweep(
    circuit: Circuit,
    parameter: str,
    grid: Sequence[float],
    truncations: Sequence[int],
    n_eig: int = DEFAULT_N_EIG,
    decomp: Optional[ModeDecomposition] = None,
) -> SweepResult:
    """Spectra over external flux (rad) or over gate charge along the diagonal.

    For ``"n_g"`` every charge mode gets the same gate charge. Rows whose
    diagonalization fails are NaN and flagged.
    """
    if parameter not in ("flux", "n_g"):
        raise ValueError("parameter must be 'flux' or 'n_g'")
    decomp = compute_transformation(circuit) if decomp is None else decomp
    system = build_system(circuit, truncations, decomp)
    grid = np.asarray(grid, float)
    n_eig = min(n_eig, system.config.dim)
    freqs = np.full((len(grid), n_eig), np.nan)
    failed = np.zeros(len(grid), bool)
    for row, value in enumerate(grid):
        if parameter == "flux":
            ham = assemble_hamiltonian(circuit, decomp, system.opset, flux_ext=value)
        else:
            ng = np.full(decomp.n_charge, value)
            ham = assemble_hamiltonian(circuit, decomp, system.opset, gate_charges=ng)
        try:
            freqs[row] = diagonalize(ham, n_eig, config=system.config).frequencies
        except DiagonalizationError as exc:
            logger.warning("sweep point %s = %g failed: %s", parameter, value, exc)
            failed[row] = True
    return SweepResult(parameter, grid, freqs, failed)
