"""Command-line entry point: ``qdisco <command> ...``.

Exit status is 0 on success, 2 for bad input (flags, files, configs) and
3 when a numerical step fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .circuit import CodeError, enumerate_codes, load_circuit
from .gradients import verify_gradients
from .metrics import LossConfig, evaluate
from .pipeline import NUMERICAL_ERRORS, ConfigError, DiscoveryConfig, run_discovery
from .spectrum import assign_truncations, check_convergence, sweep
from .transform import compute_transformation

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
DEFAULT_BUDGET = 2000
GRAD_TOL = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _truncation_arg(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _add_circuit_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("circuit", help="circuit JSON file")
    p.add_argument("--truncation", type=_truncation_arg, help="per-mode truncation numbers, harmonic modes first")
    p.add_argument("--K", type=int, default=None, help=f"budget for automatic truncation (default {DEFAULT_BUDGET})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qdisco", description="Superconducting qubit circuit discovery.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("discover", help="run the optimisation pipeline from a config file")
    p.add_argument("config")
    p.add_argument("--out", default="discovery", help="output directory (default: ./discovery)")

    p = sub.add_parser("analyze", help="metrics and sweeps for one circuit")
    _add_circuit_args(p)
    p.add_argument("--loss-config", help="JSON file with loss settings")
    p.add_argument("--sweep-dir", help="write flux_sweep.csv and charge_sweep.csv here")
    p.add_argument("--points", type=int, default=101, help="sweep grid size")

    p = sub.add_parser("codes", help="list canonical circuit codes")
    p.add_argument("--max-nodes", type=int, default=4)

    p = sub.add_parser("verify-grad", help="compare analytic and finite-difference gradients")
    _add_circuit_args(p)
    p.add_argument("--tol", type=float, default=GRAD_TOL)

    p = sub.add_parser("truncate", help="show the heuristic truncation for a budget")
    _add_circuit_args(p)
    p.add_argument("--check", action="store_true", help="also run the convergence test")
    return parser


def _truncations(args, circuit) -> List[int]:
    if args.truncation:
        return list(args.truncation)
    raw = _circuit_json(args.circuit).get("truncations")
    if raw and args.K is None:
        return [int(m) for m in raw]
    return list(assign_truncations(circuit, args.K or DEFAULT_BUDGET).truncations)


def _circuit_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _dump(obj) -> None:
    json.dump(obj, sys.stdout, indent=2)
    sys.stdout.write("\n")


def cmd_discover(args) -> int:
    config = DiscoveryConfig.load(args.config)
    result = run_discovery(config, args.out)
    _dump(result.summary())
    return EXIT_OK


def cmd_analyze(args) -> int:
    circuit = load_circuit(args.circuit)
    truncations = _truncations(args, circuit)
    loss_cfg = LossConfig.from_dict(_circuit_json(args.loss_config)) if args.loss_config else LossConfig()
    ev = evaluate(circuit, truncations, loss_cfg, gradient=False)
    report = ev.metrics.report(ev.loss)
    report["truncations"] = truncations
    _dump(report)
    if args.sweep_dir:
        out = Path(args.sweep_dir)
        out.mkdir(parents=True, exist_ok=True)
        decomp = compute_transformation(circuit)
        grid = np.linspace(0.0, 2 * np.pi, args.points)
        (out / "flux_sweep.csv").write_text(sweep(circuit, "flux", grid, truncations, decomp=decomp).to_csv())
        if decomp.n_charge:
            grid = np.linspace(0.0, 1.0, args.points)
            (out / "charge_sweep.csv").write_text(sweep(circuit, "n_g", grid, truncations, decomp=decomp).to_csv())
    return EXIT_OK


def cmd_codes(args) -> int:
    for code in enumerate_codes(args.max_nodes):
        print(code)
    return EXIT_OK


def cmd_verify_grad(args) -> int:
    circuit = load_circuit(args.circuit)
    report = verify_gradients(circuit, _truncations(args, circuit))
    passed = all(r.ok(args.tol) for r in report)
    worst = max((r.rel_error for r in report if abs(r.analytic - r.finite_difference) >= r.noise_floor), default=0.0)
    _dump({"checks": [r.to_dict() for r in report], "max_rel_error": worst, "tolerance": args.tol, "passed": passed})
    return EXIT_OK if passed else EXIT_NUMERIC


def cmd_truncate(args) -> int:
    circuit = load_circuit(args.circuit)
    decomp = compute_transformation(circuit)
    cfg = assign_truncations(circuit, args.K or DEFAULT_BUDGET, decomp=decomp) if not args.truncation else None
    truncations = list(args.truncation) if args.truncation else list(cfg.truncations)
    out = {"labels": decomp.labels, "truncations": truncations, "K": int(np.prod(truncations))}
    status = EXIT_OK
    if args.check:
        result = check_convergence(circuit, truncations, decomp=decomp)
        out.update(converged=result.passed, epsilon=result.error)
        status = EXIT_OK if result.passed else EXIT_NUMERIC
    _dump(out)
    return status


COMMANDS = {
    "discover": cmd_discover,
    "analyze": cmd_analyze,
    "codes": cmd_codes,
    "verify-grad": cmd_verify_grad,
    "truncate": cmd_truncate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CodeError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"qdisco: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"qdisco: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
