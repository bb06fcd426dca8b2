"""Acceptance checks; each test logs one PASS/FAIL line and then asserts it."""

import time

import numpy as np
import pytest

from qdisco.circuit import DEFAULT_BOUNDS, enumerate_codes, parse_code, realize_circuit
from qdisco.gradients import ParameterRef, SpectralDerivatives, verify_gradients
from qdisco.metrics import (
    LossConfig,
    MetricSet,
    charge_sensitivity,
    decoherence_time,
    element_sensitivity,
    evaluate,
    fabrication_draws,
    flux_sensitivity,
    gate_count,
    gate_speed,
    total_loss,
)
from qdisco.operators import build_system
from qdisco.pipeline import DiscoveryConfig, run_discovery, sample_circuit
from qdisco.reparam import from_alpha, reparam_chain, to_alpha
from qdisco.spectrum import assign_truncations, check_convergence, diagonalize, even_truncations, solve
from qdisco.transform import compute_transformation

from conftest import circuit_with
from reference_circuits import (
    FREQUENCY_TARGETS,
    GATE_SPEED_TARGETS,
    JJ_DESIGNS,
    JL_DESIGNS,
    RESULT_ROWS,
)

TWO_PI = 2 * np.pi
JJ_TRUNCATION = [61]
JL_TRUNCATION = [150]


def reference_circuit(name):
    if name in JJ_DESIGNS:
        values, flux = JJ_DESIGNS[name]
        return realize_circuit("JJ", values, TWO_PI * flux), JJ_TRUNCATION
    values, flux = JL_DESIGNS[name]
    return realize_circuit("JL", values, TWO_PI * flux), JL_TRUNCATION


def test_criterion_01_lc_spacing(record_criterion):
    start = time.perf_counter()
    # two 2 uH inductors in parallel make the 1 uH loop
    circuit = realize_circuit("LL", [2e-6, 2e-6, 1e-12])
    _, spectrum = solve(circuit, [12], n_eig=6)
    elapsed = time.perf_counter() - start
    spacings = np.diff(spectrum.frequencies)
    target = 159.154943e6
    exact = 1 / (TWO_PI * np.sqrt(1e-6 * 1e-12))
    rel = np.abs(spacings - target).max() / target
    rel_exact = np.abs(spacings - exact).max() / exact
    passed = rel < 1e-9 and rel_exact < 1e-9 and elapsed < 1.0
    assert record_criterion(1, passed, f"LC spacing rel err {rel:.2e} (vs exact {rel_exact:.1e}), {elapsed:.3f} s")


def test_criterion_02_reference_frequencies(record_criterion):
    start = time.perf_counter()
    misses, details = [], []
    for name, (target_ghz, tol) in FREQUENCY_TARGETS.items():
        circuit, truncations = reference_circuit(name)
        conv = check_convergence(circuit, truncations, n_eig=3)
        f_q = conv.spectrum.qubit_frequency / 1e9
        rel = abs(f_q - target_ghz) / target_ghz
        details.append(f"{name} {f_q:.4g}/{target_ghz} ({rel:.1%})")
        if not conv.passed or rel > tol:
            misses.append(name)
    elapsed = time.perf_counter() - start
    passed = not misses and elapsed < 60
    detail = "; ".join(details) + f"; {elapsed:.1f} s" + (f"; outside tolerance: {', '.join(misses)}" if misses else "")
    assert record_criterion(2, passed, detail)


def test_criterion_03_gate_speed(record_criterion):
    details, passed = [], True
    for name, target in GATE_SPEED_TARGETS.items():
        circuit, truncations = reference_circuit(name)
        _, spectrum = solve(circuit, truncations)
        g = gate_speed(spectrum.frequencies) / 1e9
        rel = abs(g - target) / target
        passed &= rel <= 0.10
        details.append(f"{name} G {g:.4g}/{target} GHz ({rel:.1%})")
    assert record_criterion(3, passed, "; ".join(details))


def test_criterion_04_loss_identity(record_criterion):
    config = LossConfig()
    checked, worst = [], 0.0
    for name, (loss, n, s_flux, s_charge, s_elem, f_q) in RESULT_ROWS.items():
        under = s_flux <= config.tol_flux and s_charge <= config.tol_charge and s_elem <= config.tol_element
        if not under or f_q * 1e9 > config.f_q_max:
            continue
        metrics = MetricSet(T1=np.inf, T_phi=np.inf, T=np.nan, G=np.nan, N=n, S_flux=s_flux,
                            S_charge=s_charge, S_element=s_elem, f_q=f_q * 1e9, flux_ext=0.0)
        computed, _ = total_loss(metrics, config)
        worst = max(worst, abs(computed - loss) / loss)
        checked.append(name)
    passed = len(checked) > 0 and worst < 0.01
    assert record_criterion(4, passed, f"{len(checked)} rows under tolerance, worst |1/N - L|/L = {worst:.2%}")


def _gradient_cases():
    return {
        "JJ": (realize_circuit("JJ", [5e9, 8e9, 60e-15], 0.7, [0.23]), [41]),
        "JL": (realize_circuit("JL", [4e9, 0.5e-6, 20e-15], 2.1), [120]),
        "JJL": (circuit_with("JJL", {"J": 6e9, "L": 0.3e-6, "C": 30e-15}, 1.3, [0.31]), [50, 31]),
    }


def _end_to_end_error(circuit, truncations, config, step=1e-5):
    """Worst relative error of dL/dalpha against central differences in alpha."""
    topo = circuit.topology
    kinds = [kind for _, _, kind in topo.branches]
    lower = np.array([DEFAULT_BOUNDS[k][0] for k in kinds])
    upper = np.array([DEFAULT_BOUNDS[k][1] for k in kinds])
    alpha = to_alpha(circuit.value_array(), lower, upper)
    draws = fabrication_draws(topo.n_branches, config.n_samples)
    params = [ParameterRef(kind, k) for k, kind in enumerate(kinds)]
    ev = evaluate(circuit, truncations, config, draws, params)
    analytic = reparam_chain(ev.gradient, alpha, lower, upper)
    worst = 0.0
    for k in range(len(alpha)):
        losses = []
        for sign in (1, -1):
            shifted = alpha.copy()
            shifted[k] += sign * step
            values = from_alpha(shifted, lower, upper)
            losses.append(evaluate(circuit.with_values(values), truncations, config, draws, params,
                                   gradient=False).loss)
        fd = (losses[0] - losses[1]) / (2 * step)
        worst = max(worst, abs(fd - analytic[k]) / max(abs(fd), abs(analytic[k])))
    active = [n for n in ("S_flux", "S_charge", "S_element") if getattr(ev.metrics, n) > getattr(
        config, {"S_flux": "tol_flux", "S_charge": "tol_charge", "S_element": "tol_element"}[n])]
    return worst, active


def test_criterion_05_gradient_certification(record_criterion):
    start = time.perf_counter()
    first_worst, kinds_seen = 0.0, set()
    e2e_worst, second_worst = 0.0, 0.0
    inactive = LossConfig(tol_flux=10.0, tol_charge=10.0, tol_element=10.0, f_q_max=1e12)
    failures = []
    for name, (circuit, truncations) in _gradient_cases().items():
        for check in verify_gradients(circuit, truncations):
            kinds_seen.add(check.parameter.rstrip("0123456789"))
            if not check.ok(1e-5):
                failures.append(f"{name} {check.parameter} state {check.state} rel {check.rel_error:.1e}")
            elif abs(check.analytic - check.finite_difference) >= check.noise_floor:
                first_worst = max(first_worst, check.rel_error)
        err, active = _end_to_end_error(circuit, truncations, inactive)
        assert not active
        e2e_worst = max(e2e_worst, err)
        if circuit.topology.flux_branch is not None:
            derivs = SpectralDerivatives.compute(circuit, truncations, 10)
            ref = ParameterRef("flux", 0)
            second = derivs.eigenvalue_second_gradient(ref, ref)
            analytic = second[1] - second[0]
            h = 1e-3
            fq = [solve(circuit.with_flux(circuit.flux_ext + s * h), truncations, 3)[1].qubit_frequency
                  for s in (1, 0, -1)]
            fd = (fq[0] - 2 * fq[1] + fq[2]) / h**2
            second_worst = max(second_worst, abs(analytic - fd) / abs(fd))
    elapsed = time.perf_counter() - start
    passed = (not failures and first_worst < 1e-5 and e2e_worst < 1e-3 and second_worst < 1e-3
              and elapsed < 300)
    detail = (f"first-order worst {first_worst:.1e} over kinds {sorted(kinds_seen)}, dL/dalpha {e2e_worst:.1e}, "
              f"d2f10/dphi2 {second_worst:.1e}, {elapsed:.0f} s")
    if failures:
        detail += "; " + "; ".join(failures)
    assert record_criterion(5, passed, detail)


def test_criterion_06_sparse_matches_dense(record_criterion):
    worst, cases = 0.0, 0
    budgets = {"JJ": [21, 151, 399], "JL": [30, 200, 400], "LL": [30, 200, 400]}
    codes = enumerate_codes(2)
    for code in codes:
        for seed, m in enumerate(budgets[code]):
            circuit = sample_circuit(code, seed)
            system = build_system(circuit, [m])
            dense = diagonalize(system.hamiltonian, 6, "dense", system.config)
            sparse = diagonalize(system.hamiltonian, 6, "sparse", system.config)
            rel = np.abs(sparse.frequencies - dense.frequencies).max() / np.abs(dense.frequencies).max()
            worst = max(worst, rel)
            cases += 1
    passed = worst < 1e-10 and set(codes) == set(budgets)
    assert record_criterion(6, passed, f"{cases} cases over codes {codes}, worst eigenvalue rel err {worst:.1e}")


def test_criterion_07_convergence_test(record_criterion):
    violations = 0
    for seed in range(10):
        circuit = sample_circuit("JL", seed)
        decomp = compute_transformation(circuit)
        eps = [check_convergence(circuit, [m], decomp=decomp).error for m in range(10, 161, 10)]
        violations += sum(b > a + 1e-12 for a, b in zip(eps, eps[1:]))
    values, flux = JJ_DESIGNS["Sycamore"]
    transmon = check_convergence(realize_circuit("JJ", values, TWO_PI * flux), JJ_TRUNCATION, t=2)
    passed = violations == 0 and transmon.passed
    assert record_criterion(7, passed, f"{violations} monotonicity violations on 10 JL circuits; "
                                        f"transmon eps {transmon.error:.1e} (threshold 1e-5)")


def _fraction_converged(code, budget, n_circuits):
    even_ok = heuristic_ok = 0
    for seed in range(n_circuits):
        circuit = sample_circuit(code, seed)
        decomp = compute_transformation(circuit)
        even = even_truncations(decomp.labels, budget)
        proxy = None
        try:
            result = check_convergence(circuit, even, decomp=decomp)
            even_ok += result.passed
            proxy = result.spectrum
        except ArithmeticError:
            pass
        cfg = assign_truncations(circuit, budget, decomp=decomp, proxy=proxy)
        try:
            heuristic_ok += check_convergence(circuit, cfg.truncations, decomp=decomp).passed
        except ArithmeticError:
            pass
    return even_ok / n_circuits, heuristic_ok / n_circuits


@pytest.mark.slow
def test_criterion_08_truncation_heuristic(record_criterion):
    start = time.perf_counter()
    parts, passed = [], True
    for code in ("JLL", "JLJL"):
        for budget in (1000, 2000, 3000):
            even, heuristic = _fraction_converged(code, budget, 100)
            passed &= heuristic >= even
            parts.append(f"{code}@{budget} heuristic {heuristic:.2f} even {even:.2f}")
    elapsed = time.perf_counter() - start
    passed &= elapsed < 1800
    assert record_criterion(8, passed, "; ".join(parts) + f"; {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_criterion_09_pipeline(record_criterion, tmp_path):
    start = time.perf_counter()
    config = DiscoveryConfig(codes=("JJ",), restarts=20, max_iter=50)
    first = run_discovery(config, tmp_path / "a")
    second = run_discovery(config, tmp_path / "b")
    runs = first.records["JJ"]
    initial = min(r.history[0]["loss"] for r in runs if r.history)
    best = first.best["JJ"]
    lower_ok = best is not None and best.final_loss <= initial
    bounds = config.bounds
    kinds = [kind for _, _, kind in parse_code("JJ").branches]
    in_bounds = all(bounds.contains(kind, v) for r in runs for h in r.history for kind, v in zip(kinds, h["values"]))
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.json"))
    identical = first.dumps() == second.dumps() and all(
        (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files_a)
    elapsed = time.perf_counter() - start
    passed = lower_ok and in_bounds and identical and elapsed < 1800
    steps = sum(len(r.history) - 1 for r in runs if r.history)
    detail = (f"best final {best.final_loss if best else float('nan'):.4g} <= best initial {initial:.4g}: {lower_ok}; "
              f"{steps} steps in bounds: {in_bounds}; byte-identical rerun: {identical}; {elapsed / 60:.1f} min")
    assert record_criterion(9, passed, detail)


def test_criterion_10_property_substitutes(record_criterion):
    checks = {}
    # combiner identities
    checks["T(inf, inf) = inf"] = decoherence_time(np.inf, np.inf) == np.inf
    checks["T(T1, inf) = 2 T1"] = np.isclose(decoherence_time(3e-5, np.inf), 6e-5)
    checks["T(inf, Tphi) = Tphi"] = np.isclose(decoherence_time(np.inf, 4e-5), 4e-5)
    checks["N = T G"] = np.isclose(gate_count(2e-5, 3e8), 6e3)
    # symmetric flux points
    values, _ = JL_DESIGNS["JL 1"]
    for flux in (0.0, np.pi):
        s = flux_sensitivity(realize_circuit("JL", values, flux), JL_TRUNCATION).value
        checks[f"S_flux = 0 at phi = {flux:.2f}"] = s < 1e-9
    checks["S_charge = 0 for JL"] = charge_sensitivity(realize_circuit("JL", values, 1.0), JL_TRUNCATION).value == 0
    jj, _ = reference_circuit("JJ 1")
    zero_fab = element_sensitivity(jj, JJ_TRUNCATION, fabrication_draws(3, 5), fab_error=0.0).value
    checks["S_element = 0 at zero fabrication error"] = abs(zero_fab) < 1e-12
    heavy, truncations = reference_circuit("Heavy fluxonium")
    light, _ = reference_circuit("JL 1")
    s_heavy = flux_sensitivity(heavy, truncations).value
    s_light = flux_sensitivity(light, truncations).value
    checks["heavy fluxonium S_flux > 0.1"] = s_heavy > 0.1
    checks["JL 1 S_flux < 0.1"] = s_light < 0.1
    failed = [name for name, ok in checks.items() if not ok]
    detail = f"{len(checks) - len(failed)}/{len(checks)} properties hold; S_flux heavy {s_heavy:.3g}, JL 1 {s_light:.3g}"
    if failed:
        detail += "; failing: " + ", ".join(failed)
    assert record_criterion(10, not failed, detail)
