import json

import numpy as np
import pytest

from qdisco.circuit import DEFAULT_BOUNDS, parse_code
from qdisco.pipeline import (
    ConfigError,
    DiscoveryConfig,
    RunRecord,
    budget_ladder,
    pick_truncation_budget,
    run_discovery,
    run_restart,
    sample_circuit,
    select_best,
    worker_count,
)

QUICK_LOSS = {"n_S": 2, "charge_samples": 5}


def quick_config(**overrides):
    data = {"codes": ["JJ"], "restarts": 3, "max_iter": 4, "K": 21, "loss": QUICK_LOSS}
    data.update(overrides)
    return DiscoveryConfig.from_dict(data)


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*.json"))}


def test_rerun_is_byte_identical(tmp_path):
    config = quick_config()
    first = run_discovery(config, tmp_path / "a")
    second = run_discovery(config, tmp_path / "b")
    assert first.dumps() == second.dumps()
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    assert set(_tree(tmp_path / "a")) == {"summary.json", "runs/JJ/best.json", "runs/JJ/0.json",
                                          "runs/JJ/1.json", "runs/JJ/2.json"}


def test_worker_count_does_not_change_results(tmp_path, monkeypatch):
    serial = run_discovery(quick_config(restarts=2, max_iter=2))
    monkeypatch.setenv("QF_WORKERS", "2")
    parallel = run_discovery(quick_config(restarts=2, max_iter=2))
    assert serial.dumps() == parallel.dumps()


def test_zero_iterations_returns_the_start():
    record = run_restart("JJ", 5, quick_config(max_iter=0))
    assert record.final_values == record.initial_values
    assert record.final_loss == record.history[0]["loss"]
    assert len(record.history) == 1


def test_visited_points_stay_in_bounds_and_loss_does_not_rise():
    config = quick_config(max_iter=8, K=41)
    kinds = [kind for _, _, kind in parse_code("JJ").branches]
    for seed in range(3):
        record = run_restart("JJ", seed, config)
        assert record.converged, record.status
        for entry in record.history:
            assert all(DEFAULT_BOUNDS.contains(k, v) for k, v in zip(kinds, entry["values"]))
        losses = [h["loss"] for h in record.history]
        assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_unconverged_start_is_recorded_not_optimised():
    config = DiscoveryConfig.from_dict({"codes": ["JL"], "K": 4, "loss": QUICK_LOSS})
    record = run_restart("JL", 1, config)
    assert record.status == "not converged"
    assert not record.converged and record.history == []
    assert select_best([record]) is None


def test_record_round_trip():
    record = run_restart("JJ", 1, quick_config(max_iter=2))
    back = RunRecord.loads(record.dumps())
    assert back.dumps() == record.dumps()
    circuit = back.final_circuit()
    np.testing.assert_allclose(circuit.values, record.final_values)


def _record(seed, loss, grad_norm, passed=True):
    return RunRecord("JJ", seed, [21], [], 0.0, [], convergence=[{"passed": passed}], final_loss=loss,
                     final_grad_norm=grad_norm)


def test_select_best_ordering():
    runs = [_record(0, 2.0, 0.1), _record(1, 1.0, 0.5), _record(2, 1.0, 0.2), _record(3, 0.5, 0.1, passed=False)]
    assert select_best(runs).seed == 2
    tie = [_record(4, 1.0, 0.2), _record(5, 1.0, 0.2)]
    assert select_best(tie).seed == 4
    assert select_best([_record(6, float("nan"), 0.0)]) is None


def test_budget_ladder():
    ladder = budget_ladder(16000)
    assert ladder[0] == 25 and ladder[-1] == 16000
    assert all(b > a for a, b in zip(ladder, ladder[1:]))
    assert budget_ladder(30) == [25, 30]


def test_budget_is_monotone_in_trials():
    budgets = [pick_truncation_budget("JJ", n, k_max=2000) for n in (1, 3, 6)]
    assert budgets == sorted(budgets)


def test_sampling_is_seeded():
    a, b = sample_circuit("JL", 3), sample_circuit("JL", 3)
    assert a == b
    assert sample_circuit("JL", 4) != a
    assert 0 <= a.flux_ext < 2 * np.pi


@pytest.mark.parametrize("data", [
    {},
    {"codes": []},
    {"codes": ["JX"]},
    {"codes": ["JJ"], "K": -3},
    {"codes": ["JJ"], "restarts": 2, "seeds": [1]},
    {"codes": ["JJ"], "colour": "red"},
    {"codes": ["JJ"], "loss": {"betas": {"speed": 1}}},
    {"codes": ["JJ"], "bounds": {"C": [2, 1]}},
])
def test_config_errors(data):
    with pytest.raises(ConfigError):
        DiscoveryConfig.from_dict(data)


def test_config_round_trip_and_seed_base():
    config = quick_config(seeds=10)
    assert config.seed_list == [10, 11, 12]
    assert DiscoveryConfig.from_dict(config.to_dict()) == config


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        DiscoveryConfig.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        DiscoveryConfig.load(bad)
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"codes": ["LJ"]}))
    assert DiscoveryConfig.load(good).codes == ("JL",)


def test_worker_environment(monkeypatch):
    config = quick_config()
    monkeypatch.setenv("QF_WORKERS", "3")
    assert worker_count(config) == 3
    monkeypatch.setenv("QF_WORKERS", "zero")
    with pytest.raises(ConfigError):
        worker_count(config)
