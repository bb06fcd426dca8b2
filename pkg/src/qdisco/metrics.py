"""Qubit figures of merit and the constrained search loss, with gradients.

Every metric can be returned together with its derivative with respect to
a list of :class:`~qdisco.gradients.ParameterRef`.  Rates are in 1/s,
times in seconds and frequencies in hertz.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import units
from .circuit import Circuit
from .gradients import MatrixElement, ParameterRef, SpectralDerivatives, circuit_parameters
from .operators import build_system
from .spectrum import DEFAULT_N_EIG, DiagonalizationError, diagonalize
from .transform import compute_transformation

logger = logging.getLogger(__name__)

TWO_PI = 2 * np.pi
SENSITIVITY_N_EIG = 3


class MetricError(ArithmeticError):
    """A metric is undefined for this circuit (zero frequency, zero gate count, ...)."""


@dataclass(frozen=True)
class NoiseModel:
    """Noise amplitudes and loss-channel constants.

    ``A_ch_factor`` is the charge-noise amplitude in Cooper pairs and
    ``A_flux`` is in radians.  The depolarization constants feed a simple
    stand-in model, see :func:`depolarization_rate`.
    """

    A_cc: float = 1e-7
    A_ch_factor: float = 1e-4
    A_flux: float = TWO_PI * 1e-6
    omega_low: float = TWO_PI * 1.0
    t_exp: float = 1e-5
    Q_cap: float = 1e6
    Q_ind: float = 5e8
    x_qp: float = 3e-6
    temperature: float = 0.02
    qp_gap: float = 3.4e-4 * units.e

    @property
    def prefactor(self) -> float:
        return float(np.sqrt(2 * abs(np.log(self.omega_low * self.t_exp))))

    def to_dict(self) -> dict:
        return {
            "A_cc": self.A_cc,
            "A_ch_factor": self.A_ch_factor,
            "A_flux": self.A_flux,
            "omega_low_Hz": self.omega_low / TWO_PI,
            "t_exp_s": self.t_exp,
            "Q_cap": self.Q_cap,
            "Q_ind": self.Q_ind,
            "x_qp": self.x_qp,
            "temperature_K": self.temperature,
            "qp_gap_eV": self.qp_gap / units.e,
        }

    @classmethod
    def from_dict(cls, data: Optional[Mapping]) -> "NoiseModel":
        data = dict(data or {})
        keys = {
            "A_cc": ("A_cc", 1.0),
            "A_ch_factor": ("A_ch_factor", 1.0),
            "A_flux": ("A_flux", 1.0),
            "omega_low_Hz": ("omega_low", TWO_PI),
            "t_exp_s": ("t_exp", 1.0),
            "Q_cap": ("Q_cap", 1.0),
            "Q_ind": ("Q_ind", 1.0),
            "x_qp": ("x_qp", 1.0),
            "temperature_K": ("temperature", 1.0),
            "qp_gap_eV": ("qp_gap", units.e),
        }
        unknown = set(data) - set(keys)
        if unknown:
            raise ValueError(f"unknown noise settings {sorted(unknown)}")
        kwargs = {keys[k][0]: float(v) * keys[k][1] for k, v in data.items()}
        return cls(**kwargs)


@dataclass(frozen=True)
class LossConfig:
    """Weights, tolerances and sensitivity settings of the search loss.

    ``delta_flux`` is the full flux excursion in radians; ``fab_error`` is
    the relative standard deviation of every element (or one per branch).
    """

    beta_flux: float = 1.0
    beta_charge: float = 1.0
    beta_element: float = 1.0
    beta_freq: float = 1.0
    tol_flux: float = 0.1
    tol_charge: float = 0.02
    tol_element: float = 0.1
    f_q_max: float = 10e9
    delta_flux: float = TWO_PI * 0.01
    charge_samples: int = 11
    fab_error: Union[float, Tuple[float, ...]] = 0.01
    n_samples: int = 5
    n_eig: int = DEFAULT_N_EIG
    noise: NoiseModel = field(default_factory=NoiseModel)

    def __post_init__(self):
        if min(self.beta_flux, self.beta_charge, self.beta_element, self.beta_freq) < 0:
            raise ValueError("loss weights must be non-negative")
        if min(self.tol_flux, self.tol_charge, self.tol_element, self.f_q_max) <= 0:
            raise ValueError("tolerances and the frequency cap must be positive")
        if self.charge_samples < 2 or self.n_samples < 1 or self.n_eig < 3:
            raise ValueError("need at least 2 charge samples, 1 element sample and 3 levels")

    def to_dict(self) -> dict:
        fab = self.fab_error if isinstance(self.fab_error, (int, float)) else list(self.fab_error)
        return {
            "betas": {"flux": self.beta_flux, "charge": self.beta_charge,
                      "element": self.beta_element, "freq": self.beta_freq},
            "tolerances": {"flux": self.tol_flux, "charge": self.tol_charge, "element": self.tol_element},
            "delta_flux": self.delta_flux / TWO_PI,
            "charge_samples": self.charge_samples,
            "fab_errors": fab,
            "n_S": self.n_samples,
            "n_eig": self.n_eig,
            "f_q_max_GHz": self.f_q_max / 1e9,
            "noise": self.noise.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Optional[Mapping]) -> "LossConfig":
        """Inverse of :meth:`to_dict`; missing keys keep their defaults."""
        data = dict(data or {})
        known = {"betas", "tolerances", "delta_flux", "charge_samples", "fab_errors", "n_S", "n_eig",
                 "f_q_max_GHz", "noise"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown loss settings {sorted(unknown)}")
        kw = {}
        for group, prefix in (("betas", "beta_"), ("tolerances", "tol_")):
            for name, value in (data.get(group) or {}).items():
                if prefix + name not in cls.__dataclass_fields__:
                    raise ValueError(f"unknown {group} entry {name!r}")
                kw[prefix + name] = float(value)
        if "delta_flux" in data:
            kw["delta_flux"] = TWO_PI * float(data["delta_flux"])
        if "charge_samples" in data:
            kw["charge_samples"] = int(data["charge_samples"])
        if "fab_errors" in data:
            fab = data["fab_errors"]
            kw["fab_error"] = float(fab) if np.isscalar(fab) else tuple(float(v) for v in fab)
        if "n_S" in data:
            kw["n_samples"] = int(data["n_S"])
        if "n_eig" in data:
            kw["n_eig"] = int(data["n_eig"])
        if "f_q_max_GHz" in data:
            kw["f_q_max"] = 1e9 * float(data["f_q_max_GHz"])
        if "noise" in data:
            kw["noise"] = NoiseModel.from_dict(data["noise"])
        return cls(**kw)


@dataclass
class Rate:
    """A scalar and, when requested, its gradient over a parameter list."""

    value: float
    gradient: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# Elementary metrics
# ---------------------------------------------------------------------------


def hinge(x: float, a: float) -> float:
    return max(x - a, 0.0)


def decoherence_time(t1: float, t_phi: float) -> float:
    """Combined time ``1 / (1/(2 T1) + 1/T_phi)``; infinite inputs drop out."""
    if t1 < 0 or t_phi < 0:
        raise ValueError("times must be non-negative")
    if t1 == 0 or t_phi == 0:
        return 0.0
    rate = 0.5 / t1 + 1.0 / t_phi
    return np.inf if rate == 0 else 1.0 / rate


def gate_count(t: float, g: float) -> float:
    if t < 0 or g < 0:
        raise ValueError("T and G must be non-negative")
    return 0.0 if t == 0 or g == 0 else t * g


def gate_speed_terms(frequencies: Sequence[float]) -> Tuple[float, np.ndarray]:
    """Gate-speed bound and its weights ``dG = weights . df``.

    The bound is the smallest of ``f_i - f_1`` and ``|f_i - 2 f_1|`` over
    every computed level ``i >= 2``, with frequencies relative to the
    ground state.  Ties go to the smaller ``i`` and, within one level, to
    the first term.
    """
    f = np.asarray(frequencies, float)
    if len(f) < 3:
        raise MetricError("the gate-speed bound needs at least three levels")
    rel = f - f[0]
    best, weights = np.inf, None
    for i in range(2, len(f)):
        first = rel[i] - rel[1]
        if first < best:
            best, weights = first, np.zeros(len(f))
            weights[i], weights[1] = 1.0, -1.0
        diff = rel[i] - 2 * rel[1]
        if abs(diff) < best:
            best, weights = abs(diff), np.zeros(len(f))
            sign = np.sign(diff)
            weights[i], weights[1], weights[0] = sign, -2 * sign, sign
    return float(best), weights


def gate_speed(frequencies: Sequence[float]) -> float:
    return gate_speed_terms(frequencies)[0]


def thermal_factor(omega: float, temperature: float) -> Tuple[float, float]:
    """``2 coth(hbar omega / 2 k_B T)`` and its derivative in omega."""
    if temperature <= 0:
        return 2.0, 0.0
    x = units.hbar * omega / (2 * units.k_B * temperature)
    if x > 350:
        return 2.0, 0.0
    value = 2.0 / np.tanh(x)
    slope = -2.0 / np.sinh(x) ** 2 * units.hbar / (2 * units.k_B * temperature)
    return float(value), float(slope)


# ---------------------------------------------------------------------------
# Decoherence channels
# ---------------------------------------------------------------------------

DEPHASING_CHANNELS = ("cc", "charge", "flux")
DEPOLARIZATION_CHANNELS = ("capacitive", "inductive", "quasiparticle")


def noise_sources(derivs: SpectralDerivatives, channel: str, noise: NoiseModel) -> List[Tuple[ParameterRef, float, Optional[ParameterRef]]]:
    """``(noisy parameter, amplitude, parameter the amplitude scales with)`` per instance."""
    circuit, decomp = derivs.circuit, derivs.decomp
    if channel == "cc":
        return [(ParameterRef("J", k), noise.A_cc * circuit.values[k], ParameterRef("J", k))
                for k in circuit.topology.junctions]
    if channel == "charge":
        return [(ParameterRef("n_g", j), noise.A_ch_factor, None) for j in range(decomp.n_charge)]
    if channel == "flux":
        if circuit.topology.flux_branch is None:
            return []
        return [(ParameterRef("flux", 0), noise.A_flux, None)]
    raise ValueError(f"unknown dephasing channel {channel!r}")


def dephasing_rate(derivs: SpectralDerivatives, channel: str, noise: NoiseModel = NoiseModel(),
                   params: Optional[Sequence[ParameterRef]] = None) -> Rate:
    """1/f dephasing of the 0-1 transition from one channel, summed over its instances.

    ``params`` requests the gradient, which needs the second derivatives of
    the transition frequency.
    """
    pre = TWO_PI * noise.prefactor
    value = 0.0
    grad = None if params is None else np.zeros(len(params))
    for ref, amp, amp_ref in noise_sources(derivs, channel, noise):
        g = derivs.eigenvalue_gradient(ref)
        slope = g[1] - g[0]
        value += pre * abs(amp * slope)
        if grad is None:
            continue
        sign = np.sign(amp * slope)
        if sign == 0:
            continue
        for p, x in enumerate(params):
            second = derivs.second_gradient_states(x, ref, (0, 1))
            d = amp * (second[1] - second[0])
            if amp_ref is not None and x == amp_ref:
                d += noise.A_cc * slope
            grad[p] += pre * sign * d
    return Rate(float(value), grad)


class _TransitionElements:
    """``<f_0| O |f_1>`` for the mode operators used by the depolarization channels."""

    def __init__(self, derivs: SpectralDerivatives, with_solves: bool):
        self.derivs = derivs
        self.with_solves = with_solves
        self._cache: Dict[Tuple[str, int], object] = {}

    def get(self, kind: str, index: int):
        key = (kind, index)
        if key not in self._cache:
            d = self.derivs
            vecs = {"charge": d.charge_vecs, "flux": d.flux_vecs}.get(kind)
            op_vecs = vecs[index] if vecs is not None else 0.5 * d.sin_vecs[index]
            if self.with_solves:
                self._cache[key] = MatrixElement(d, op_vecs, 0, 1)
            else:
                self._cache[key] = complex(np.vdot(d.vectors[:, 0], op_vecs[:, 1]))
        return self._cache[key]

    def value(self, kind: str, index: int) -> complex:
        item = self.get(kind, index)
        return item.value if isinstance(item, MatrixElement) else item


def _chain_abs2(element: complex, d_element: complex) -> float:
    return 2 * float(np.real(np.conj(element) * d_element))


def depolarization_rate(derivs: SpectralDerivatives, channel: str, noise: NoiseModel = NoiseModel(),
                        params: Optional[Sequence[ParameterRef]] = None,
                        _elements: Optional[_TransitionElements] = None) -> Rate:
    """Stand-in relaxation model ``Gamma = |<0|O|1>|^2 S(omega_10) / hbar`` per element.

    capacitive
        ``O`` is the branch voltage of each capacitor and
        ``S = 2 coth(hbar omega / 2 k_B T) c / Q_cap``.
    inductive
        ``O`` is the branch flux of each inductor and
        ``S = 2 coth(hbar omega / 2 k_B T) / (Q_ind l)``.
    quasiparticle
        ``O = sin(theta_k) / 2`` for each junction (the small-phase form of
        ``sin(theta_k / 2)``) and the rate is ``16 x_qp sqrt(2 Delta / hbar omega) E_J |<0|O|1>|^2``
        with E_J in hertz; no thermal factor.
    """
    if channel not in DEPOLARIZATION_CHANNELS:
        raise ValueError(f"unknown depolarization channel {channel!r}")
    circuit, decomp = derivs.circuit, derivs.decomp
    topo = circuit.topology
    want = params is not None
    elements = _elements or _TransitionElements(derivs, want)
    f = derivs.frequencies
    omega = TWO_PI * (f[1] - f[0])
    if omega <= 0:
        raise MetricError("non-positive transition frequency")
    d_omega = None
    if want:
        d_omega = np.array([TWO_PI * (g[1] - g[0]) for g in (derivs.eigenvalue_gradient(x) for x in params)])
    theta, d_theta = thermal_factor(omega, noise.temperature)
    value = 0.0
    grad = np.zeros(len(params)) if want else None

    def mode_element(kind: str, weights: np.ndarray, modes: Sequence[int]):
        m = sum(weights[mu] * elements.value(kind, mu) for mu in modes)
        if not want:
            return m, None
        dm = np.array([sum(weights[mu] * elements.get(kind, mu).derivative(x) for mu in modes) for x in params])
        return m, dm

    if channel == "capacitive":
        c_inv = np.linalg.inv(circuit.capacitance)
        w = topo.incidence
        caps = list(topo.capacitors)
        modes = range(decomp.n_modes)
        voltages = {}
        for k in caps:
            v = decomp.R.T @ c_inv @ w[k]
            voltages[k] = mode_element("charge", v, modes)
        for k in caps:
            m, dm = voltages[k]
            scale = circuit.values[k] / (units.hbar * noise.Q_cap)
            rate = scale * theta * abs(m) ** 2
            value += rate
            if not want:
                continue
            for p, x in enumerate(params):
                d_m = dm[p]
                if x.kind == "C":
                    d_m = d_m - (w[k] @ c_inv @ w[x.index]) * voltages[x.index][0]
                g = scale * theta * _chain_abs2(m, d_m) + scale * d_theta * d_omega[p] * abs(m) ** 2
                if x.kind == "C" and x.index == k:
                    g += rate / circuit.values[k]
                grad[p] += g
    elif channel == "inductive":
        n_h = decomp.n_harmonic
        for k in topo.inductors:
            m, dm = mode_element("flux", decomp.w[k], range(n_h))
            scale = 1.0 / (units.hbar * noise.Q_ind * circuit.values[k])
            rate = scale * theta * abs(m) ** 2
            value += rate
            if not want:
                continue
            for p, x in enumerate(params):
                g = scale * theta * _chain_abs2(m, dm[p]) + scale * d_theta * d_omega[p] * abs(m) ** 2
                if x.kind == "L" and x.index == k:
                    g -= rate / circuit.values[k]
                grad[p] += g
    else:
        b = topo.loop_matrix
        density = 16 * noise.x_qp * np.sqrt(2 * noise.qp_gap / (units.hbar * omega))
        for k in topo.junctions:
            ej = circuit.values[k]
            m = elements.value("sin", k)
            rate = density * ej * abs(m) ** 2
            value += rate
            if not want:
                continue
            item = elements.get("sin", k)
            cos_element = 0.5 * b[k] * complex(np.vdot(derivs.vectors[:, 0], derivs.cos_vecs[k][:, 1]))
            for p, x in enumerate(params):
                explicit = cos_element if x.kind == "flux" else 0.0
                g = density * ej * _chain_abs2(m, item.derivative(x, explicit)) - 0.5 * rate * d_omega[p] / omega
                if x.kind == "J" and x.index == k:
                    g += rate / ej
                grad[p] += g
    return Rate(float(value), grad)


# ---------------------------------------------------------------------------
# Single-circuit core: T1, T_phi, G, f_q
# ---------------------------------------------------------------------------


@dataclass
class CoreMetrics:
    """Rates and spectral metrics of one circuit at one operating point."""

    f_q: float
    gamma_1: float
    gamma_phi: float
    G: float
    gradients: Optional[Dict[str, np.ndarray]] = None

    @property
    def decay(self) -> float:
        """``1/T = Gamma_1 / 2 + Gamma_phi``."""
        return 0.5 * self.gamma_1 + self.gamma_phi

    @property
    def T(self) -> float:
        return np.inf if self.decay == 0 else 1.0 / self.decay

    @property
    def N(self) -> float:
        return gate_count(self.T, self.G) if np.isfinite(self.T) else np.inf

    @property
    def inv_N(self) -> float:
        if self.G == 0:
            raise MetricError("gate count is zero")
        return self.decay / self.G


def core_metrics(derivs: SpectralDerivatives, noise: NoiseModel = NoiseModel(),
                 params: Optional[Sequence[ParameterRef]] = None) -> CoreMetrics:
    """f_q, Gamma_1, Gamma_phi and G; with ``params`` also their gradients and that of 1/N."""
    f = derivs.frequencies
    f_q = float(f[1] - f[0])
    if f_q <= 0:
        raise MetricError("qubit frequency is zero")
    g_value, g_weights = gate_speed_terms(f)
    want = params is not None
    elements = _TransitionElements(derivs, want)
    gamma_1 = Rate(0.0, np.zeros(len(params)) if want else None)
    for channel in DEPOLARIZATION_CHANNELS:
        r = depolarization_rate(derivs, channel, noise, params, elements)
        gamma_1.value += r.value
        if want:
            gamma_1.gradient += r.gradient
    gamma_phi = Rate(0.0, np.zeros(len(params)) if want else None)
    for channel in DEPHASING_CHANNELS:
        r = dephasing_rate(derivs, channel, noise, params)
        gamma_phi.value += r.value
        if want:
            gamma_phi.gradient += r.gradient
    out = CoreMetrics(f_q, gamma_1.value, gamma_phi.value, g_value)
    if want:
        eig = np.array([derivs.eigenvalue_gradient(x) for x in params])
        d_g = eig @ g_weights
        d_decay = 0.5 * gamma_1.gradient + gamma_phi.gradient
        if g_value == 0:
            raise MetricError("gate count is zero")
        out.gradients = {
            "f_q": eig[:, 1] - eig[:, 0],
            "gamma_1": gamma_1.gradient,
            "gamma_phi": gamma_phi.gradient,
            "G": d_g,
            "inv_N": d_decay / g_value - out.decay * d_g / g_value**2,
        }
    return out


# ---------------------------------------------------------------------------
# Sensitivities
# ---------------------------------------------------------------------------


def _derivs(circuit: Circuit, truncations: Sequence[int], n_eig: int, decomp=None) -> SpectralDerivatives:
    system = build_system(circuit, truncations, decomp=decomp)
    return SpectralDerivatives(system, diagonalize(system.hamiltonian, n_eig, config=system.config))


def _fq_gradient(derivs: SpectralDerivatives, params: Sequence[ParameterRef]) -> np.ndarray:
    return np.array([g[1] - g[0] for g in (derivs.eigenvalue_gradient(x) for x in params)])


def _controls_only(params: Sequence[ParameterRef], kinds: Sequence[str]) -> np.ndarray:
    return np.array([x.kind in kinds for x in params], dtype=bool)


def flux_sensitivity(circuit: Circuit, truncations: Sequence[int], delta: float = TWO_PI * 0.01,
                     f_q: Optional[float] = None, params: Optional[Sequence[ParameterRef]] = None,
                     decomp=None, f_q_gradient: Optional[np.ndarray] = None) -> Rate:
    """``|f_q(phi + delta/2) - f_q(phi - delta/2)| / f_q(phi)``; zero without a flux loop."""
    if circuit.topology.flux_branch is None:
        return Rate(0.0, None if params is None else np.zeros(len(params)))
    decomp = decomp or compute_transformation(circuit)
    ends = [_derivs(circuit.with_flux(circuit.flux_ext + s * delta / 2), truncations, SENSITIVITY_N_EIG, decomp)
            for s in (1, -1)]
    if f_q is None:
        centre = _derivs(circuit, truncations, SENSITIVITY_N_EIG, decomp)
        f_q = centre.spectrum.qubit_frequency
        if params is not None and f_q_gradient is None:
            f_q_gradient = _fq_gradient(centre, params)
    if f_q <= 0:
        raise MetricError("qubit frequency is zero")
    diff = ends[0].spectrum.qubit_frequency - ends[1].spectrum.qubit_frequency
    value = abs(diff) / f_q
    if params is None:
        return Rate(value)
    d_diff = _fq_gradient(ends[0], params) - _fq_gradient(ends[1], params)
    grad = np.sign(diff) * d_diff / f_q - value * np.asarray(f_q_gradient) / f_q
    return Rate(float(value), grad)


def charge_samples(n_charge: int, count: int = 11) -> np.ndarray:
    """Gate-charge vectors evenly spaced along the diagonal of ``[0, 1]^n_charge``."""
    return np.outer(np.linspace(0.0, 1.0, count), np.ones(n_charge))


def charge_sensitivity(circuit: Circuit, truncations: Sequence[int], count: int = 11,
                       params: Optional[Sequence[ParameterRef]] = None, decomp=None) -> Rate:
    """Relative spread ``(max - min) / mean`` of f_q over diagonal gate-charge samples.

    The samples replace the circuit's own gate charges, so the gradient
    with respect to ``n_g`` is zero.
    """
    decomp = decomp or compute_transformation(circuit)
    if decomp.n_charge == 0:
        return Rate(0.0, None if params is None else np.zeros(len(params)))
    runs = []
    for ng in charge_samples(decomp.n_charge, count):
        system = build_system(circuit.with_gate_charges(ng), truncations, decomp=decomp)
        runs.append((system, diagonalize(system.hamiltonian, SENSITIVITY_N_EIG, config=system.config)))
    fq = np.array([spec.qubit_frequency for _, spec in runs])
    hi, lo = int(np.argmax(fq)), int(np.argmin(fq))
    top, bottom = fq[hi], fq[lo]
    if top + bottom <= 0:
        raise MetricError("zero mean qubit frequency over the charge samples")
    value = 2 * (top - bottom) / (top + bottom)
    if params is None:
        return Rate(float(value))
    d_top = _fq_gradient(SpectralDerivatives(*runs[hi]), params)
    d_bottom = _fq_gradient(SpectralDerivatives(*runs[lo]), params)
    grad = 4 * (bottom * d_top - top * d_bottom) / (top + bottom) ** 2
    grad[_controls_only(params, ("n_g",))] = 0.0
    return Rate(float(value), grad)


def fabrication_draws(n_branches: int, n_samples: int = 5, seed: int = 0) -> np.ndarray:
    """Standard-normal draws, one row per sampled circuit, reused across a run."""
    return np.random.default_rng(seed).standard_normal((n_samples, n_branches))


def spread(values: Sequence[float]) -> float:
    """Population standard deviation over mean."""
    values = np.asarray(values, float)
    mean = values.mean()
    if mean == 0:
        raise MetricError("zero mean")
    return float(values.std() / mean)


@dataclass
class ElementSensitivity:
    value: float
    gradient: Optional[np.ndarray]
    gate_counts: List[float]
    excluded: List[int]


def element_sensitivity(circuit: Circuit, truncations: Sequence[int], draws: np.ndarray,
                        fab_error: Union[float, Sequence[float]] = 0.01, noise: NoiseModel = NoiseModel(),
                        n_eig: int = DEFAULT_N_EIG, params: Optional[Sequence[ParameterRef]] = None,
                        ) -> ElementSensitivity:
    """Spread of the gate count over circuits with every element scaled by ``1 + e_i z_i``.

    ``draws`` holds the ``z`` values (one row per sample) so repeated
    evaluations see the same perturbations and the result is smooth in
    the nominal values.  Samples whose diagonalization fails are excluded.
    """
    base = circuit.value_array()
    scale = 1.0 + np.asarray(fab_error, float) * np.asarray(draws, float)
    if np.any(scale <= 0):
        raise MetricError("a fabrication draw makes an element non-positive")
    counts, grads, excluded = [], [], []
    elem_mask = None if params is None else np.array([x.is_element for x in params])
    for s, row in enumerate(scale):
        sample = circuit.with_values(base * row)
        try:
            core = core_metrics(_derivs(sample, truncations, n_eig), noise, params)
        except (DiagonalizationError, MetricError) as exc:
            logger.warning("element sample %d excluded: %s", s, exc)
            excluded.append(s)
            continue
        counts.append(core.N)
        if params is not None:
            d_n = -core.N**2 * core.gradients["inv_N"]
            factors = np.ones(len(params))
            factors[elem_mask] = [row[x.index] for x in params if x.is_element]
            grads.append(d_n * factors)
    if not counts:
        raise MetricError("every element sample failed")
    counts_arr = np.asarray(counts)
    if not np.all(np.isfinite(counts_arr)):
        return ElementSensitivity(0.0, None if params is None else np.zeros(len(params)), counts, excluded)
    value = spread(counts_arr)
    grad = None
    if params is not None:
        g = np.asarray(grads)
        mean = counts_arr.mean()
        std = counts_arr.std()
        d_mean = g.mean(axis=0)
        d_std = np.zeros(len(params)) if std == 0 else ((counts_arr - mean) @ g) / (len(counts_arr) * std)
        grad = d_std / mean - std * d_mean / mean**2
    return ElementSensitivity(value, grad, counts, excluded)


# ---------------------------------------------------------------------------
# Metric set and loss
# ---------------------------------------------------------------------------


@dataclass
class MetricSet:
    T1: float
    T_phi: float
    T: float
    G: float
    N: float
    S_flux: float
    S_charge: float
    S_element: float
    f_q: float
    flux_ext: float

    def to_dict(self) -> dict:
        return asdict(self)

    def report(self, loss: float) -> dict:
        """Summary with GHz frequencies and the flux in units of the flux quantum."""
        return {
            "loss": loss,
            "N": self.N,
            "G_GHz": self.G / 1e9,
            "T_s": self.T,
            "S_flux": self.S_flux,
            "S_charge": self.S_charge,
            "S_element": self.S_element,
            "f_q_GHz": self.f_q / 1e9,
            "phi_ext_over_2pi": self.flux_ext / TWO_PI,
        }


def total_loss(metrics: MetricSet, config: LossConfig = LossConfig()) -> Tuple[float, Dict[str, float]]:
    """``1/N`` plus the weighted hinge penalties, and dL/d(metric) for each term.

    The objective partial is taken with respect to ``1/N`` so an infinite
    gate count stays well defined.
    """
    if metrics.N == 0:
        raise MetricError("gate count is zero")
    partials = {"inv_N": 1.0}
    loss = 0.0 if np.isinf(metrics.N) else 1.0 / metrics.N
    for name, beta, tol in (
        ("S_flux", config.beta_flux, config.tol_flux),
        ("S_charge", config.beta_charge, config.tol_charge),
        ("S_element", config.beta_element, config.tol_element),
    ):
        excess = hinge(getattr(metrics, name), tol)
        loss += beta * excess
        partials[name] = beta if excess > 0 else 0.0
    ratio = metrics.f_q / config.f_q_max
    loss += config.beta_freq * hinge(ratio, 1.0)
    partials["f_q"] = config.beta_freq / config.f_q_max if ratio > 1 else 0.0
    return float(loss), partials


@dataclass
class Evaluation:
    metrics: MetricSet
    loss: float
    params: List[ParameterRef]
    gradient: Optional[np.ndarray] = None
    excluded_samples: List[int] = field(default_factory=list)


def evaluate(circuit: Circuit, truncations: Sequence[int], config: LossConfig = LossConfig(),
             draws: Optional[np.ndarray] = None, params: Optional[Sequence[ParameterRef]] = None,
             gradient: bool = True) -> Evaluation:
    """All metrics, the loss and (optionally) dL/dx for ``params``.

    ``params`` defaults to every element followed by the flux and gate
    charges.  ``draws`` fixes the fabrication perturbations; the default
    uses seed 0.
    """
    decomp = compute_transformation(circuit)
    params = list(params if params is not None else circuit_parameters(circuit, decomp))
    want = params if gradient else None
    if draws is None:
        draws = fabrication_draws(circuit.topology.n_branches, config.n_samples)
    derivs = _derivs(circuit, truncations, config.n_eig, decomp)
    core = core_metrics(derivs, config.noise, want)
    d_fq = core.gradients["f_q"] if gradient else None
    s_flux = flux_sensitivity(circuit, truncations, config.delta_flux, core.f_q, want, decomp, d_fq)
    s_charge = charge_sensitivity(circuit, truncations, config.charge_samples, want, decomp)
    s_elem = element_sensitivity(circuit, truncations, draws, config.fab_error, config.noise,
                                 config.n_eig, want)
    t1 = np.inf if core.gamma_1 == 0 else 1.0 / core.gamma_1
    t_phi = np.inf if core.gamma_phi == 0 else 1.0 / core.gamma_phi
    metrics = MetricSet(
        T1=t1, T_phi=t_phi, T=core.T, G=core.G, N=core.N,
        S_flux=s_flux.value, S_charge=s_charge.value, S_element=s_elem.value,
        f_q=core.f_q, flux_ext=circuit.flux_ext,
    )
    loss, partials = total_loss(metrics, config)
    grad = None
    if gradient:
        grad = (partials["inv_N"] * core.gradients["inv_N"]
                + partials["S_flux"] * s_flux.gradient
                + partials["S_charge"] * s_charge.gradient
                + partials["S_element"] * s_elem.gradient
                + partials["f_q"] * core.gradients["f_q"])
    return Evaluation(metrics, loss, params, grad, s_elem.excluded)
