"""Random-restart circuit discovery: sample, truncate, check, optimise, archive.

Each restart is an independent task.  Element values are optimised through
the cosine map of :mod:`qdisco.reparam`, so every visited value lies inside
its bounds; the external flux and gate charges are optimised directly.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .circuit import DEFAULT_BOUNDS, Bounds, Circuit, CodeError, canonical_code, parse_code, realize_circuit, sample_elements
from .gradients import ParameterRef
from .metrics import LossConfig, MetricError, evaluate, fabrication_draws
from .operators import DEFAULT_K_MAX, TruncationError
from .optimize import OptimizationError, bfgs_minimize
from .reparam import from_alpha, reparam_chain, to_alpha
from .spectrum import DiagonalizationError, assign_truncations, check_convergence
from .transform import TransformError, compute_transformation

logger = logging.getLogger(__name__)

RECHECK_EVERY = 10
LADDER_START = 25
NUMERICAL_ERRORS = (ArithmeticError, TruncationError, np.linalg.LinAlgError)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DiscoveryConfig:
    codes: Tuple[str, ...]
    restarts: int = 1
    max_iter: int = 100
    budget: Union[int, str] = "auto"
    k_max: int = DEFAULT_K_MAX
    workers: int = 1
    seeds: Tuple[int, ...] = ()
    loss: LossConfig = field(default_factory=LossConfig)
    bounds: Bounds = DEFAULT_BOUNDS
    train_flux: bool = True
    train_gate_charges: bool = True
    budget_trials: int = 10
    recheck_every: int = RECHECK_EVERY
    record_time: bool = False

    def __post_init__(self):
        if not self.codes:
            raise ConfigError("no circuit codes given")
        if self.restarts < 1 or self.max_iter < 0 or self.workers < 1:
            raise ConfigError("restarts and workers must be positive and max_iter non-negative")
        if self.budget != "auto" and (not isinstance(self.budget, int) or self.budget < 1):
            raise ConfigError(f"K must be a positive integer or 'auto', got {self.budget!r}")
        if self.seeds and len(self.seeds) != self.restarts:
            raise ConfigError("need one seed per restart")
        if self.budget_trials < 1 or self.recheck_every < 1:
            raise ConfigError("budget_trials and recheck_every must be positive")

    @property
    def seed_list(self) -> List[int]:
        return list(self.seeds) if self.seeds else list(range(self.restarts))

    @classmethod
    def from_dict(cls, data: Mapping) -> "DiscoveryConfig":
        known = {"codes", "restarts", "max_iter", "K", "K_max", "workers", "seeds", "loss", "bounds",
                 "train_flux", "train_gate_charges", "budget_trials", "recheck_every", "record_time"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            codes = tuple(canonical_code(c) for c in data["codes"])
            restarts = int(data.get("restarts", 1))
            seeds = data.get("seeds", ())
            if isinstance(seeds, int):
                seeds = range(seeds, seeds + restarts)
            budget = data.get("K", "auto")
            return cls(
                codes=codes,
                restarts=restarts,
                max_iter=int(data.get("max_iter", 100)),
                budget=budget if budget == "auto" else int(budget),
                k_max=int(data.get("K_max", DEFAULT_K_MAX)),
                workers=int(data.get("workers", 1)),
                seeds=tuple(int(s) for s in seeds),
                loss=LossConfig.from_dict(data.get("loss")),
                bounds=Bounds.from_dict(data.get("bounds")),
                train_flux=bool(data.get("train_flux", True)),
                train_gate_charges=bool(data.get("train_gate_charges", True)),
                budget_trials=int(data.get("budget_trials", 10)),
                recheck_every=int(data.get("recheck_every", RECHECK_EVERY)),
                record_time=bool(data.get("record_time", False)),
            )
        except KeyError as exc:
            raise ConfigError(f"missing config key {exc}") from exc
        except (TypeError, ValueError, CodeError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DiscoveryConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "codes": list(self.codes),
            "restarts": self.restarts,
            "max_iter": self.max_iter,
            "K": self.budget,
            "K_max": self.k_max,
            "workers": self.workers,
            "seeds": self.seed_list,
            "loss": self.loss.to_dict(),
            "bounds": self.bounds.to_dict(),
            "train_flux": self.train_flux,
            "train_gate_charges": self.train_gate_charges,
            "budget_trials": self.budget_trials,
            "recheck_every": self.recheck_every,
            "record_time": self.record_time,
        }


@dataclass
class RunRecord:
    """Everything about one restart; ``to_dict``/``from_dict`` round-trip exactly."""

    code: str
    seed: int
    truncations: List[int]
    initial_values: List[float]
    initial_flux: float
    initial_gate_charges: List[float]
    final_values: List[float] = field(default_factory=list)
    final_flux: float = 0.0
    final_gate_charges: List[float] = field(default_factory=list)
    history: List[dict] = field(default_factory=list)
    convergence: List[dict] = field(default_factory=list)
    status: str = "pending"
    final_loss: float = math.inf
    final_grad_norm: float = math.inf
    wall_time: Optional[float] = None

    @property
    def converged(self) -> bool:
        return bool(self.convergence) and all(c["passed"] for c in self.convergence)

    def to_dict(self) -> dict:
        return {
            "code": self.code,
            "seed": self.seed,
            "truncations": list(self.truncations),
            "initial_values": list(self.initial_values),
            "initial_flux": self.initial_flux,
            "initial_gate_charges": list(self.initial_gate_charges),
            "final_values": list(self.final_values),
            "final_flux": self.final_flux,
            "final_gate_charges": list(self.final_gate_charges),
            "history": self.history,
            "convergence": self.convergence,
            "status": self.status,
            "final_loss": self.final_loss,
            "final_grad_norm": self.final_grad_norm,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "RunRecord":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "RunRecord":
        return cls.from_dict(json.loads(text))

    def final_circuit(self) -> Circuit:
        return realize_circuit(self.code, self.final_values, self.final_flux, self.final_gate_charges)


# ---------------------------------------------------------------------------
# Truncation budget
# ---------------------------------------------------------------------------


def budget_ladder(k_max: int = DEFAULT_K_MAX, start: int = LADDER_START) -> List[int]:
    ladder = []
    k = start
    while k < k_max:
        ladder.append(k)
        k *= 2
    return ladder + [k_max]


def sample_circuit(code: str, seed: int, bounds: Bounds = DEFAULT_BOUNDS) -> Circuit:
    """Log-uniform elements and, for circuits with a flux loop, a uniform flux in [0, 2 pi)."""
    topo = parse_code(code)
    rng = np.random.default_rng(seed)
    values = sample_elements(topo, bounds, rng)
    flux = rng.uniform(0.0, 2 * np.pi) if topo.flux_branch is not None else 0.0
    return realize_circuit(topo, values, flux)


def _passes(circuit: Circuit, budget: int) -> bool:
    try:
        decomp = compute_transformation(circuit)
        cfg = assign_truncations(circuit, budget, decomp=decomp)
        return check_convergence(circuit, cfg.truncations, decomp=decomp).passed
    except NUMERICAL_ERRORS as exc:
        logger.debug("budget trial failed: %s", exc)
        return False


def pick_truncation_budget(code: str, n_trials: int = 10, k_max: int = DEFAULT_K_MAX,
                           bounds: Bounds = DEFAULT_BOUNDS) -> int:
    """Smallest ladder K at which circuits sampled with seeds ``0..n_trials-1`` all converge.

    The trial sets are nested in ``n_trials``, so the result never
    decreases as trials are added.  Returns ``k_max`` with a warning when
    even the cap fails.
    """
    trials = [sample_circuit(code, seed, bounds) for seed in range(n_trials)]
    for budget in budget_ladder(k_max):
        if all(_passes(c, budget) for c in trials):
            return budget
    logger.warning("%s: not every trial converged at the cap K = %d", code, k_max)
    return k_max


# ---------------------------------------------------------------------------
# One restart
# ---------------------------------------------------------------------------


class _Problem:
    """Maps the optimisation vector to circuits and evaluates loss and gradient."""

    def __init__(self, circuit: Circuit, truncations: Sequence[int], config: DiscoveryConfig, seed: int):
        self.topology = circuit.topology
        self.truncations = list(truncations)
        self.config = config
        kinds = [kind for _, _, kind in self.topology.branches]
        self.lower = np.array([config.bounds[k][0] for k in kinds])
        self.upper = np.array([config.bounds[k][1] for k in kinds])
        decomp = compute_transformation(circuit)
        self.n_charge = decomp.n_charge
        self.params = [ParameterRef(kind, k) for k, kind in enumerate(kinds)]
        self.train_flux = config.train_flux and self.topology.flux_branch is not None
        if self.train_flux:
            self.params.append(ParameterRef("flux", 0))
        self.train_ng = config.train_gate_charges and self.n_charge > 0
        if self.train_ng:
            self.params.extend(ParameterRef("n_g", j) for j in range(self.n_charge))
        self.fixed_flux = circuit.flux_ext
        self.fixed_ng = circuit.gate_charge_vector(self.n_charge)
        self.draws = fabrication_draws(self.topology.n_branches, config.loss.n_samples, seed)
        self.evaluations: Dict[bytes, object] = {}

    def encode(self, circuit: Circuit) -> np.ndarray:
        parts = [to_alpha(circuit.value_array(), self.lower, self.upper)]
        if self.train_flux:
            parts.append([circuit.flux_ext])
        if self.train_ng:
            parts.append(circuit.gate_charge_vector(self.n_charge))
        return np.concatenate(parts)

    def decode(self, z: np.ndarray) -> Circuit:
        n = self.topology.n_branches
        values = from_alpha(z[:n], self.lower, self.upper)
        flux = z[n] if self.train_flux else self.fixed_flux
        ng = z[n + int(self.train_flux):] if self.train_ng else self.fixed_ng
        return realize_circuit(self.topology, values, flux, ng if self.n_charge else ())

    def __call__(self, z: np.ndarray) -> Tuple[float, np.ndarray]:
        ev = evaluate(self.decode(z), self.truncations, self.config.loss, self.draws, self.params)
        self.evaluations[z.tobytes()] = ev
        n = self.topology.n_branches
        grad = ev.gradient.copy()
        grad[:n] = reparam_chain(grad[:n], z[:n], self.lower, self.upper)
        return ev.loss, grad


def _history_entry(iteration: int, circuit: Circuit, ev, grad_norm: float) -> dict:
    return {
        "iteration": iteration,
        "loss": ev.loss,
        "grad_norm": grad_norm,
        "values": list(circuit.values),
        "flux": circuit.flux_ext,
        "gate_charges": list(circuit.gate_charges),
        "metrics": ev.metrics.to_dict(),
    }


def _convergence_entry(iteration: int, result) -> dict:
    return {
        "iteration": iteration,
        "passed": bool(result.passed),
        "epsilon": result.error,
        "residual": max(result.spectrum.residual, result.enlarged.residual),
    }


def run_restart(code: str, seed: int, config: DiscoveryConfig, budget: Optional[int] = None) -> RunRecord:
    """Sample with ``seed``, check convergence and run BFGS; failures are recorded, not raised."""
    start = time.perf_counter()
    circuit = sample_circuit(code, seed, config.bounds)
    budget = budget if budget is not None else config.budget
    if budget == "auto":
        budget = pick_truncation_budget(code, config.budget_trials, config.k_max, config.bounds)
    decomp = compute_transformation(circuit)
    record = RunRecord(code, seed, [], list(circuit.values), circuit.flux_ext,
                       list(circuit.gate_charge_vector(decomp.n_charge)))
    try:
        cfg = assign_truncations(circuit, budget, decomp=decomp)
        record.truncations = list(cfg.truncations)
        check = check_convergence(circuit, cfg.truncations, decomp=decomp)
        record.convergence.append(_convergence_entry(0, check))
        if not check.passed:
            record.status = "not converged"
            return _finish(record, circuit, start, config)
        problem = _Problem(circuit, cfg.truncations, config, seed)
        z0 = problem.encode(circuit)
        loss0, grad0 = problem(z0)
        record.history.append(_history_entry(0, problem.decode(z0), problem.evaluations[z0.tobytes()],
                                             float(np.linalg.norm(grad0))))

        def on_step(state) -> bool:
            current = problem.decode(state.alpha)
            key = state.alpha.tobytes()
            if key not in problem.evaluations:
                problem(state.alpha)
            ev = problem.evaluations[key]
            record.history.append(_history_entry(state.iteration, current, ev, state.grad_norm))
            if state.iteration % config.recheck_every == 0:
                result = check_convergence(current, cfg.truncations)
                record.convergence.append(_convergence_entry(state.iteration, result))
                if not result.passed:
                    return False
            return True

        state = bfgs_minimize(problem, z0, config.max_iter, callback=on_step)
        final = problem.decode(state.alpha)
        record.status = "convergence lost" if not record.converged else state.status
        record.final_loss = float(state.loss)
        record.final_grad_norm = state.grad_norm
        return _finish(record, final, start, config)
    except OptimizationError as exc:
        record.status = f"failed: {exc}"
    except NUMERICAL_ERRORS as exc:
        record.status = f"failed: {type(exc).__name__}: {exc}"
    if record.history:
        last = record.history[-1]
        circuit = realize_circuit(code, last["values"], last["flux"], last["gate_charges"])
        record.final_loss = last["loss"]
    return _finish(record, circuit, start, config)


def _finish(record: RunRecord, circuit: Circuit, start: float, config: DiscoveryConfig) -> RunRecord:
    record.final_values = list(circuit.values)
    record.final_flux = circuit.flux_ext
    record.final_gate_charges = list(circuit.gate_charges) or list(record.initial_gate_charges)
    if config.record_time:
        record.wall_time = time.perf_counter() - start
    return record


def _task(args) -> RunRecord:
    code, seed, config, budget = args
    try:
        return run_restart(code, seed, config, budget)
    except Exception as exc:  # a crash must only cost this restart
        logger.exception("restart %s/%d crashed", code, seed)
        return RunRecord(code, seed, [], [], 0.0, [], status=f"crashed: {type(exc).__name__}: {exc}")


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def select_best(records: Sequence[RunRecord]) -> Optional[RunRecord]:
    """Lowest final loss among converged runs; ties go to the smaller gradient norm, then seed order."""
    candidates = [(r.final_loss, r.final_grad_norm, i, r) for i, r in enumerate(records)
                  if r.converged and math.isfinite(r.final_loss)]
    if not candidates:
        return None
    return min(candidates, key=lambda c: c[:3])[3]


@dataclass
class DiscoveryResult:
    records: Dict[str, List[RunRecord]]
    best: Dict[str, Optional[RunRecord]]
    budgets: Dict[str, int]

    def summary(self) -> dict:
        out = {}
        for code, runs in self.records.items():
            best = self.best[code]
            out[code] = {
                "K": self.budgets[code],
                "restarts": len(runs),
                "converged": sum(r.converged for r in runs),
                "best_seed": None if best is None else best.seed,
                "best_loss": None if best is None else best.final_loss,
                "best_initial_loss": min((r.history[0]["loss"] for r in runs if r.history), default=None),
            }
        return out

    def dumps(self) -> str:
        return json.dumps({"summary": self.summary(),
                           "best": {c: (b.to_dict() if b else None) for c, b in self.best.items()}},
                          indent=1, sort_keys=True)


def worker_count(config: DiscoveryConfig) -> int:
    env = os.environ.get("QF_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigError(f"QF_WORKERS must be an integer, got {env!r}") from exc
        if n < 1:
            raise ConfigError("QF_WORKERS must be positive")
        return n
    return config.workers


def run_discovery(config: DiscoveryConfig, out_dir: Optional[Union[str, Path]] = None) -> DiscoveryResult:
    """Run every restart of every code, pick the best per code and persist the records.

    With ``out_dir`` the layout is ``runs/<code>/<seed>.json``,
    ``runs/<code>/best.json`` and ``summary.json``.
    """
    budgets = {}
    for code in config.codes:
        budgets[code] = (pick_truncation_budget(code, config.budget_trials, config.k_max, config.bounds)
                         if config.budget == "auto" else int(config.budget))
    tasks = [(code, seed, config, budgets[code]) for code in config.codes for seed in config.seed_list]
    workers = worker_count(config)
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_task, tasks))
    else:
        results = [_task(t) for t in tasks]
    records: Dict[str, List[RunRecord]] = {code: [] for code in config.codes}
    for rec in results:
        records[rec.code].append(rec)
    result = DiscoveryResult(records, {c: select_best(r) for c, r in records.items()}, budgets)
    if out_dir is not None:
        write_results(result, out_dir)
    return result


def write_results(result: DiscoveryResult, out_dir: Union[str, Path]) -> None:
    root = Path(out_dir)
    for code, runs in result.records.items():
        folder = root / "runs" / code
        folder.mkdir(parents=True, exist_ok=True)
        for rec in runs:
            (folder / f"{rec.seed}.json").write_text(rec.dumps() + "\n")
        best = result.best[code]
        (folder / "best.json").write_text((best.dumps() if best else "null") + "\n")
    (root / "summary.json").write_text(result.dumps() + "\n")
