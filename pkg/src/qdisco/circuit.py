"""Circuit codes, topologies and the classical circuit matrices.

A circuit code such as ``"JL(JC)"`` lists the elements of the single
inductive loop in ring order.  A parenthesised group after an element is
a series path laid in parallel with that element.  Every node pair also
receives its own capacitor, so the capacitance matrix is always full rank.
"""

from __future__ import annotations

import itertools
import json
import logging
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import units

logger = logging.getLogger(__name__)

KINDS = ("C", "L", "J")
KIND_NAMES = {"C": "capacitor", "L": "inductor", "J": "junction"}
_NAME_TO_KIND = {v: k for k, v in KIND_NAMES.items()}
MAX_NODES = 4

# Ordering used to pick the canonical representative of a code.
_RANK = {"J": 0, "L": 1, "C": 2}

_ITEM_RE = re.compile(r"([JL])(?:\(([^()]*)\))?")


class CodeError(ValueError):
    """Raised for strings outside the circuit-code grammar."""


class BoundsError(ValueError):
    """Raised when an element value leaves its allowed range."""


Item = Tuple[str, str]
Branch = Tuple[int, int, str]


@dataclass(frozen=True)
class Bounds:
    """Per-kind ``(low, high)`` limits in SI units (hertz for junctions)."""

    limits: Mapping[str, Tuple[float, float]] = field(
        default_factory=lambda: {
            "C": (1e-15, 12e-12),
            "L": (1e-15, 5e-6),
            "J": (1e9, 100e9),
        }
    )

    def __getitem__(self, kind: str) -> Tuple[float, float]:
        return tuple(self.limits[kind])

    def contains(self, kind: str, value: float) -> bool:
        lo, hi = self[kind]
        return lo <= value <= hi

    def to_dict(self) -> Dict[str, List[float]]:
        return {k: [float(v) for v in self.limits[k]] for k in KINDS}

    @classmethod
    def from_dict(cls, data: Optional[Mapping[str, Sequence[float]]]) -> "Bounds":
        limits = dict(cls().limits)
        for kind, pair in (data or {}).items():
            if kind not in KINDS or len(pair) != 2 or not 0 < pair[0] <= pair[1]:
                raise ValueError(f"bad bounds entry {kind!r}: {pair!r}")
            limits[kind] = (float(pair[0]), float(pair[1]))
        return cls(limits)


DEFAULT_BOUNDS = Bounds()


@dataclass(frozen=True)
class Element:
    kind: str
    value: float
    branch: Tuple[int, int]
    trainable: bool = True
    q_factor: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown element kind {self.kind!r}")
        if not self.value > 0:
            raise ValueError(f"element value must be positive, got {self.value!r}")


# ---------------------------------------------------------------------------
# Codes
# ---------------------------------------------------------------------------


def _tokenize(text: str) -> List[Item]:
    if not isinstance(text, str) or not text:
        raise CodeError("empty circuit code")
    items = []
    pos = 0
    while pos < len(text):
        match = _ITEM_RE.match(text, pos)
        if match is None:
            raise CodeError(f"unexpected symbol {text[pos]!r} at position {pos} in {text!r}")
        kind, group = match.group(1), match.group(2)
        if group is not None:
            if not group or any(ch not in "JLC" for ch in group):
                raise CodeError(f"invalid group ({group}) in {text!r}")
            if "C" not in group:
                raise CodeError(
                    f"group ({group}) has no capacitor and would close a second inductive loop"
                )
        items.append((kind, group or ""))
        pos = match.end()
    if len(items) < 2:
        raise CodeError(f"{text!r} needs at least two elements in the inductive loop")
    return items


def _item_key(item: Item):
    kind, group = item
    return (_RANK[kind], bool(group), tuple(_RANK[g] for g in group))


def canonical_items(items: Sequence[Item]) -> Tuple[Item, ...]:
    """Lowest representative under ring rotation and reflection.

    Reflection reverses the direction of travel around the ring, so every
    group path is reversed as well.
    """
    items = [tuple(i) for i in items]
    mirrored = [(kind, group[::-1]) for kind, group in reversed(items)]
    candidates = []
    for seq in (items, mirrored):
        for shift in range(len(seq)):
            candidates.append(tuple(seq[shift:] + seq[:shift]))
    return min(candidates, key=lambda seq: [_item_key(i) for i in seq])


def _items_to_string(items: Iterable[Item]) -> str:
    return "".join(kind + (f"({group})" if group else "") for kind, group in items)


def _node_count(items: Sequence[Item]) -> int:
    return len(items) + sum(max(len(group) - 1, 0) for _, group in items)


@dataclass(frozen=True)
class CircuitTopology:
    """Node/branch structure of one circuit code.

    ``branches`` lists ``(node_a, node_b, kind)`` with ground as node 0:
    first the ring elements, then group paths, then the added all-to-all
    capacitors.  The ring elements form the single inductive loop.
    """

    code: str
    items: Tuple[Item, ...]
    n_nodes: int
    branches: Tuple[Branch, ...]
    loop_branches: Tuple[int, ...]
    flux_branch: Optional[int]

    @property
    def n_modes(self) -> int:
        return self.n_nodes - 1

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @property
    def kinds(self) -> Tuple[str, ...]:
        return tuple(b[2] for b in self.branches)

    def indices(self, kind: str) -> Tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.branches) if b[2] == kind)

    @property
    def junctions(self) -> Tuple[int, ...]:
        return self.indices("J")

    @property
    def inductors(self) -> Tuple[int, ...]:
        return self.indices("L")

    @property
    def capacitors(self) -> Tuple[int, ...]:
        return self.indices("C")

    @cached_property
    def incidence(self) -> np.ndarray:
        """Row k is w_k: +1 on node_a, -1 on node_b, ground dropped."""
        w = np.zeros((self.n_branches, self.n_modes))
        for k, (a, b, _) in enumerate(self.branches):
            if a:
                w[k, a - 1] += 1.0
            if b:
                w[k, b - 1] -= 1.0
        return w

    @cached_property
    def loop_matrix(self) -> np.ndarray:
        """Binary b_k per branch for the single external flux."""
        b = np.zeros(self.n_branches)
        if self.flux_branch is not None:
            b[self.flux_branch] = 1.0
        return b

    def inductive_loop_count(self) -> int:
        """Cycle rank of the subgraph of inductors and junctions."""
        edges, components = self._inductive_graph()
        return edges - self.n_nodes + components

    def inductively_connected(self) -> bool:
        """True when no island hangs on capacitors alone."""
        return self._inductive_graph()[1] == 1

    def _inductive_graph(self) -> Tuple[int, int]:
        parent = list(range(self.n_nodes))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        edges = 0
        for a, b, kind in self.branches:
            if kind == "C":
                continue
            edges += 1
            parent[find(a)] = find(b)
        components = len({find(n) for n in range(self.n_nodes)})
        return edges, components


def build_topology(items: Sequence[Item]) -> CircuitTopology:
    """Lay out a ring of ``items`` with its groups and all-to-all capacitors."""
    items = canonical_items(items)
    n_nodes = _node_count(items)
    if n_nodes > MAX_NODES:
        raise CodeError(
            f"{_items_to_string(items)!r} needs {n_nodes} nodes; at most {MAX_NODES} are allowed"
        )
    ring = len(items)
    branches: List[Branch] = []
    for j, (kind, _) in enumerate(items, start=1):
        branches.append((j - 1, j % ring, kind))
    fresh = ring
    for j, (_, group) in enumerate(items, start=1):
        if not group:
            continue
        path = [j - 1] + list(range(fresh, fresh + len(group) - 1)) + [j % ring]
        fresh += len(group) - 1
        for kind, a, b in zip(group, path[:-1], path[1:]):
            branches.append((a, b, kind))
    has_cap = {frozenset((a, b)) for a, b, kind in branches if kind == "C"}
    for a, b in itertools.combinations(range(n_nodes), 2):
        if frozenset((a, b)) not in has_cap:
            branches.append((a, b, "C"))
    loop = tuple(range(ring))
    flux = next((k for k in loop if branches[k][2] == "J"), None)
    topo = CircuitTopology(
        code=_items_to_string(items),
        items=items,
        n_nodes=n_nodes,
        branches=tuple(branches),
        loop_branches=loop,
        flux_branch=flux,
    )
    if topo.inductive_loop_count() != 1:
        raise CodeError(f"{topo.code!r} does not have exactly one inductive loop")
    if not topo.inductively_connected():
        raise CodeError(f"{topo.code!r} leaves an island coupled only through capacitors")
    return topo


def parse_code(text: str) -> CircuitTopology:
    """Parse a circuit code into its canonical topology.

    Raises
    ------
    CodeError
        On grammar violations, groups without a capacitor, or more than
        four nodes including ground.
    """
    return build_topology(_tokenize(text.strip()))


def emit_code(topology: CircuitTopology) -> str:
    if topology.inductive_loop_count() != 1 or not topology.items:
        raise CodeError("topology is outside the single-inductive-loop family")
    return _items_to_string(canonical_items(topology.items))


def canonical_code(text: str) -> str:
    return emit_code(parse_code(text))


def _groups(max_len: int) -> List[str]:
    out = []
    for n in range(2, max_len + 1):
        for combo in itertools.product("JLC", repeat=n):
            group = "".join(combo)
            # every fresh node needs an inductive neighbour, otherwise it is
            # a purely capacitive island with no dynamics of its own
            if "C" in group and "CC" not in group:
                out.append(group)
    return out


def enumerate_codes(max_nodes: int = MAX_NODES) -> List[str]:
    """All canonical codes with at most ``max_nodes`` nodes (ground included).

    Single-element groups are skipped because a lone capacitor in parallel
    duplicates the all-to-all capacitor already present on that pair.
    """
    if not 2 <= max_nodes <= MAX_NODES:
        raise ValueError(f"max_nodes must lie in [2, {MAX_NODES}]")
    found = {}
    for ring in range(2, max_nodes + 1):
        spare = max_nodes - ring
        options = [""] + [g for g in _groups(spare + 1)]
        for kinds in itertools.product("JL", repeat=ring):
            for groups in itertools.product(options, repeat=ring):
                items = list(zip(kinds, groups))
                if _node_count(items) > max_nodes:
                    continue
                try:
                    topo = build_topology(items)
                except CodeError:
                    continue
                found[topo.code] = topo.items
    order = sorted(
        found.items(),
        key=lambda kv: (_node_count(kv[1]), len(kv[1]), [_item_key(i) for i in kv[1]]),
    )
    return [code for code, _ in order]


# ---------------------------------------------------------------------------
# Circuits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Circuit:
    """A topology with element values, external flux and gate charges.

    ``values`` follows ``topology.branches``.  ``flux_ext`` is in radians.
    ``gate_charges`` holds one offset per charge mode, in Cooper pairs; an
    empty tuple means all zero.
    """

    topology: CircuitTopology
    values: Tuple[float, ...]
    flux_ext: float = 0.0
    gate_charges: Tuple[float, ...] = ()

    @property
    def code(self) -> str:
        return self.topology.code

    @property
    def elements(self) -> Tuple[Element, ...]:
        return tuple(
            Element(kind, v, (a, b)) for (a, b, kind), v in zip(self.topology.branches, self.values)
        )

    def value_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    def _stamp(self, kind: str, transform) -> np.ndarray:
        w = self.topology.incidence
        n = self.topology.n_modes
        out = np.zeros((n, n))
        for k in self.topology.indices(kind):
            out += transform(self.values[k]) * np.outer(w[k], w[k])
        return out

    @cached_property
    def capacitance(self) -> np.ndarray:
        """C: diagonal sums incident capacitance, off-diagonal is -c_ij."""
        return self._stamp("C", lambda c: c)

    @cached_property
    def susceptance(self) -> np.ndarray:
        """L*: the inverse-inductance analogue of C."""
        return self._stamp("L", lambda l: 1.0 / l)

    def stamp(self, branch: int) -> np.ndarray:
        """d(C or L*)/d(weight) for one branch: w_k w_k^T."""
        w = self.topology.incidence[branch]
        return np.outer(w, w)

    def gate_charge_vector(self, n_charge: int) -> np.ndarray:
        if not self.gate_charges:
            return np.zeros(n_charge)
        if len(self.gate_charges) != n_charge:
            raise ValueError(
                f"{self.code}: expected {n_charge} gate charges, got {len(self.gate_charges)}"
            )
        return np.asarray(self.gate_charges, dtype=float)

    def with_values(self, values: Sequence[float]) -> "Circuit":
        return realize_circuit(self.topology, values, self.flux_ext, self.gate_charges)

    def with_flux(self, flux_ext: float) -> "Circuit":
        return replace(self, flux_ext=float(flux_ext))

    def with_gate_charges(self, gate_charges: Sequence[float]) -> "Circuit":
        return replace(self, gate_charges=tuple(float(g) for g in gate_charges))


def realize_circuit(
    topology: Union[CircuitTopology, str],
    values: Union[Sequence[float], Mapping[int, float]],
    flux_ext: float = 0.0,
    gate_charges: Optional[Sequence[float]] = None,
    bounds: Optional[Bounds] = None,
    strict: bool = False,
) -> Circuit:
    """Attach element values to a topology.

    Parameters
    ----------
    values
        One value per branch in SI units, or a mapping from branch index.
    bounds
        If given, values outside it are logged, or rejected when
        ``strict`` is set.
    """
    if isinstance(topology, str):
        topology = parse_code(topology)
    if isinstance(values, Mapping):
        missing = set(range(topology.n_branches)) - set(values)
        if missing:
            raise ValueError(f"missing values for branches {sorted(missing)}")
        values = [values[k] for k in range(topology.n_branches)]
    values = tuple(float(v) for v in values)
    if len(values) != topology.n_branches:
        raise ValueError(f"{topology.code}: expected {topology.n_branches} values, got {len(values)}")
    for k, v in enumerate(values):
        if not np.isfinite(v) or v <= 0:
            raise ValueError(f"branch {k} ({topology.branches[k][2]}) has non-positive value {v!r}")
        if bounds is not None and not bounds.contains(topology.branches[k][2], v):
            msg = f"branch {k} value {v:.4g} is outside {bounds[topology.branches[k][2]]}"
            if strict:
                raise BoundsError(msg)
            logger.warning(msg)
    return Circuit(topology, values, float(flux_ext), tuple(float(g) for g in (gate_charges or ())))


def sample_elements(
    topology: CircuitTopology,
    bounds: Bounds = DEFAULT_BOUNDS,
    seed: Union[int, np.random.Generator, None] = None,
) -> np.ndarray:
    """Draw every element value log-uniformly within its bounds."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = np.empty(topology.n_branches)
    for k, (_, _, kind) in enumerate(topology.branches):
        lo, hi = bounds[kind]
        out[k] = np.exp(rng.uniform(np.log(lo), np.log(hi)))
    return out


# ---------------------------------------------------------------------------
# JSON files
# ---------------------------------------------------------------------------


def circuit_to_dict(circuit: Circuit) -> dict:
    elements = []
    for (a, b, kind), v in zip(circuit.topology.branches, circuit.values):
        unit = units.DEFAULT_UNIT[kind]
        elements.append(
            {"branch": [a, b], "kind": KIND_NAMES[kind], "value": units.from_si(v, unit), "unit": unit}
        )
    return {
        "code": circuit.code,
        "elements": elements,
        "flux_ext": circuit.flux_ext / (2 * np.pi),
        "gate_charges": list(circuit.gate_charges),
    }


def circuit_from_dict(data: Mapping) -> Circuit:
    """Build a circuit from its JSON form.

    ``flux_ext`` is in flux quanta (phi_ext / 2 pi).  Elements are matched
    to topology branches by node pair and kind; capacitors that are not
    listed fall back to ``default_capacitance`` when the file provides it.
    """
    try:
        topology = parse_code(data["code"])
    except KeyError as exc:
        raise ValueError("circuit file needs a 'code' entry") from exc
    slots: Dict[Tuple[int, int, str], List[int]] = {}
    for k, (a, b, kind) in enumerate(topology.branches):
        slots.setdefault((min(a, b), max(a, b), kind), []).append(k)
    values: Dict[int, float] = {}
    for entry in data.get("elements", []):
        kind = _NAME_TO_KIND.get(entry.get("kind"), entry.get("kind"))
        if kind not in KINDS:
            raise ValueError(f"unknown element kind {entry.get('kind')!r}")
        a, b = (int(n) for n in entry["branch"])
        key = (min(a, b), max(a, b), kind)
        free = [k for k in slots.get(key, []) if k not in values]
        if not free:
            raise ValueError(f"{topology.code}: no free {KIND_NAMES[kind]} on branch {[a, b]}")
        values[free[0]] = units.to_si(entry["value"], entry.get("unit", units.DEFAULT_UNIT[kind]), kind)
    default_cap = data.get("default_capacitance")
    for k in topology.capacitors:
        if k not in values and default_cap is not None:
            values[k] = units.to_si(default_cap["value"], default_cap.get("unit", "fF"), "C")
    flux = 2 * np.pi * float(data.get("flux_ext", 0.0))
    return realize_circuit(topology, values, flux, data.get("gate_charges") or ())


def load_circuit(path: Union[str, Path]) -> Circuit:
    with open(path) as fh:
        return circuit_from_dict(json.load(fh))


def save_circuit(circuit: Circuit, path: Union[str, Path]) -> None:
    with open(path, "w") as fh:
        json.dump(circuit_to_dict(circuit), fh, indent=2)
        fh.write("\n")
