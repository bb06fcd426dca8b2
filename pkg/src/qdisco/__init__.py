"""Gradient-based discovery of superconducting qubit circuits."""

from .circuit import Circuit, enumerate_codes, load_circuit, parse_code, realize_circuit
from .metrics import LossConfig, MetricSet, NoiseModel, evaluate
from .pipeline import DiscoveryConfig, RunRecord, run_discovery
from .spectrum import Spectrum, assign_truncations, check_convergence, solve

__all__ = [
    "Circuit",
    "DiscoveryConfig",
    "LossConfig",
    "MetricSet",
    "NoiseModel",
    "RunRecord",
    "Spectrum",
    "assign_truncations",
    "check_convergence",
    "enumerate_codes",
    "evaluate",
    "load_circuit",
    "parse_code",
    "realize_circuit",
    "run_discovery",
    "solve",
]
