"""Physical constants and unit conversion helpers.

Everything inside the package is SI: farads, henries, radians, and hertz
for junction energies (E_J / h) and eigenfrequencies.
"""

from scipy import constants as _c

e = _c.e
h = _c.h
hbar = _c.hbar
k_B = _c.k
PHI0 = h / (2 * e)
#: 2 pi / Phi_0, converts a node flux in webers into a phase.
FLUX_TO_PHASE = 2 * _c.pi / PHI0

_SCALE = {
    "F": 1.0,
    "pF": 1e-12,
    "fF": 1e-15,
    "H": 1.0,
    "uH": 1e-6,
    "nH": 1e-9,
    "pH": 1e-12,
    "fH": 1e-15,
    "Hz": 1.0,
    "MHz": 1e6,
    "GHz": 1e9,
}

_KIND_UNITS = {
    "C": {"F", "pF", "fF"},
    "L": {"H", "uH", "nH", "pH", "fH"},
    "J": {"Hz", "MHz", "GHz"},
}

DEFAULT_UNIT = {"C": "fF", "L": "uH", "J": "GHz"}


def to_si(value: float, unit: str, kind: str) -> float:
    """Convert ``value`` given in ``unit`` to SI for an element of ``kind``."""
    if unit not in _KIND_UNITS[kind]:
        raise ValueError(f"unit {unit!r} is not valid for element kind {kind!r}")
    return float(value) * _SCALE[unit]


def from_si(value: float, unit: str) -> float:
    return float(value) / _SCALE[unit]


def charging_energy(capacitance: float) -> float:
    """E_C = e^2 / 2C expressed in hertz."""
    return e**2 / (2 * capacitance) / h


def capacitance_from_ec(ec_hz: float) -> float:
    return e**2 / (2 * ec_hz * h)
