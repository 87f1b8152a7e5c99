import json
import math

import numpy as np
import pandas as pd
import pytest

import harness
from config_loader import ConfigError, build_experiment_config
from dynamics import EventType, Trajectory
from harness import (ExperimentInterrupted, ExperimentResult, SeedRecord, aggregate_records, compare,
                     controller_budget, correlation_study, failure_and_reset_steps, lead_time, pearson,
                     rectification_success_rate, relative_step_overhead, reset_outcomes, resolve_max_steps,
                     resolve_psi, run_experiment, simulate)
from observer import ObserverCalibration


@pytest.fixture
def make_config(experiment_doc, tmp_path):
    def build(scenario="halo", **sections):
        doc = json.loads(json.dumps(experiment_doc))
        doc["scenario"] = scenario
        for name, values in sections.items():
            doc.setdefault(name, {}).update(values)
        return build_experiment_config(doc, {"output.out_dir": str(tmp_path / "out")})
    return build


def _record(index, seed, n_steps, n_events, n_resets=0, reset_successes=0, success=True, baseline=10, **kw):
    return SeedRecord(index=index, seed=seed, status="finished", success=success, final_error=0.1,
                      n_steps=n_steps, n_events=n_events, n_resets=n_resets, reset_successes=reset_successes,
                      baseline_steps=baseline, **kw)


def _trajectory(norms, resets=()):
    """Scalar trajectory whose deviation after event k is norms[k - 1]"""
    traj = Trajectory(s0=np.zeros(1))
    for k, n in enumerate(norms, start=1):
        event = EventType.RESET if k in resets else EventType.STEP
        traj.append([n], [0.0], event)
    return traj


def test_resolved_budget_for_default_like_system(make_config):
    cfg = make_config()
    n_star = harness.system_horizon(cfg)
    assert n_star == pytest.approx(19.641, abs=1e-3)
    assert resolve_psi(cfg) == pytest.approx(0.1 * n_star / 2)
    assert resolve_max_steps(cfg) == 79
    assert resolve_max_steps(cfg, factor=2.0) == 40


def test_budget_needs_positive_exponent():
    with pytest.raises(ValueError):
        controller_budget(0.0, 10.0)


def test_reset_outcomes_follow_segments():
    traj = _trajectory([2.0, 0.0, 1.0, 4.0, 0.0, 1.0], resets=(2, 5))
    assert reset_outcomes(traj, 3.0) == [False, True]


def test_failure_and_reset_steps_count_dynamics_steps():
    traj = _trajectory([2.0, 0.0, 1.0, 4.0, 0.0, 1.0], resets=(2, 5))
    assert failure_and_reset_steps(traj, 3.0) == (3, [1, 3])
    assert failure_and_reset_steps(_trajectory([0.5, 1.0]), 3.0) == (None, [])


def test_rectification_success_rate():
    records = [_record(0, 1, 10, 12, n_resets=2, reset_successes=2),
               _record(1, 2, 10, 11, n_resets=1, reset_successes=0)]
    assert rectification_success_rate(records) == pytest.approx(2 / 3)
    assert rectification_success_rate([_record(0, 1, 10, 10)]) is None


def test_overhead_definition():
    closed = [_record(0, 5, 30, 33, n_resets=3)]
    assert relative_step_overhead(closed, [_record(0, 5, 30, 30)]) == pytest.approx(33 / 30)
    assert relative_step_overhead([_record(0, 5, 30, 30)], [_record(0, 5, 30, 30)]) == 1.0


def test_overhead_needs_matched_seeds():
    with pytest.raises(ValueError):
        relative_step_overhead([_record(0, 5, 30, 33)], [_record(0, 6, 30, 30)])
    with pytest.raises(ZeroDivisionError):
        relative_step_overhead([_record(0, 5, 0, 0)], [_record(0, 5, 0, 0)])


def test_pearson_examples():
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    omegas = np.linspace(0.1, 3.0, 20)
    assert pearson(omegas, 2.5 * omegas) == pytest.approx(1.0)
    assert pearson([1, 1, 1], [1, 2, 3]) is None
    assert pearson([1.0], [2.0]) is None


def test_lead_time_counts_events():
    traj = Trajectory(s0=np.zeros(1))
    for k, (h, n) in enumerate([(2.0, 0.1), (3.1, 0.5), (3.2, 1.0), (3.3, 4.0)]):
        traj.append([n], [0.0], entropy=h)
    assert lead_time(traj, 2.9412, 3.0) == 2.0
    assert lead_time(traj, 5.0, 3.0) is None


def test_aggregates_are_reductions_over_records():
    records = [_record(0, 1, 10, 12, n_resets=2, reset_successes=1, pearson_r=0.9),
               _record(1, 2, 10, 10, success=False, pearson_r=None, lead_time=3.0)]
    agg = aggregate_records(records)
    assert agg["success_rate"] == 0.5
    assert agg["relative_step_overhead"] == pytest.approx(22 / 20)
    assert agg["mean_resets"] == 1.0
    assert agg["pearson_r"] == pytest.approx(0.9)
    assert agg["lead_time"] == 3.0
    assert aggregate_records([])["success_rate"] is None


def test_open_loop_without_noise_always_succeeds(make_config):
    cfg = make_config("open_loop", system={"sigma2": 0.0}, run={"max_steps": 20})
    result = run_experiment(cfg)
    assert result.aggregates["success_rate"] == 1.0
    assert result.aggregates["mean_resets"] == 0.0
    assert result.aggregates["rectification_success_rate"] is None


def test_halo_result_is_reproducible_and_recomputable(make_config, tmp_path):
    cfg = make_config()
    first = run_experiment(cfg)
    second = run_experiment(cfg, write=False)
    assert [r.to_dict() for r in first.records] == [r.to_dict() for r in second.records]
    assert first.aggregates == aggregate_records(first.records)

    out = tmp_path / "out"
    saved = json.loads((out / "halo_result.json").read_text())
    assert saved["aggregates"] == json.loads(json.dumps(first.to_dict()))["aggregates"]
    assert (out / "halo_seeds.csv").exists()
    back = ExperimentResult.from_dict(saved)
    assert aggregate_records(back.records) == first.aggregates


def test_halo_rectification_is_exact_at_low_noise(make_config):
    result = run_experiment(make_config(system={"sigma2": 1e-6}, run={"max_steps": 60}, controller={"psi": 0.45}),
                            write=False)
    assert result.aggregates["mean_resets"] > 0
    assert result.aggregates["rectification_success_rate"] == 1.0


def test_halo_beats_open_loop(make_config, tmp_path):
    cmp = compare(make_config())
    assert cmp.open_loop.aggregates["success_rate"] <= 0.1
    assert cmp.halo.aggregates["success_rate"] >= 0.9
    assert cmp.overhead == pytest.approx(87 / 79)
    assert cmp.overhead <= 1.5
    written = tmp_path / "out" / "open_vs_halo.csv"
    assert written.exists()
    assert list(cmp.frame["seed"]) == [r.seed for r in cmp.halo.records]
    assert list(cmp.frame["halo_reset_steps"]) == ["9 18 27 36 45 54 63 72"] * 8
    assert list(cmp.frame["halo_first_reset_step"]) == [9] * 8
    for record, failed_at in zip(cmp.open_loop.records, cmp.frame["open_first_failure_step"]):
        assert record.success or not pd.isna(failed_at)
        assert pd.isna(failed_at) or 1 <= failed_at <= 79
    header = written.read_text().splitlines()[0].split(",")
    assert header[-3:] == ["open_first_failure_step", "halo_first_reset_step", "halo_reset_steps"]


def test_infinite_threshold_matches_open_loop_success(make_config):
    cmp = compare(make_config(controller={"psi": "inf"}), write=False)
    assert cmp.halo.aggregates["success_rate"] == cmp.open_loop.aggregates["success_rate"]
    assert [r.final_error for r in cmp.halo.records] == [r.final_error for r in cmp.open_loop.records]
    assert cmp.overhead == 1.0


def test_sensitivity_peaks_at_matched_budget(make_config, tmp_path):
    result = run_experiment(make_config("sensitivity"))
    cells = {c["psi_factor"]: c for c in result.extras["cells"]}
    assert result.extras["best_psi_factor"] == 1.0
    assert cells[1.0]["success_rate"] > cells[0.25]["success_rate"]
    assert cells[1.0]["success_rate"] > cells[4.0]["success_rate"]
    assert all(r.status == "terminated_hard_limit" for r in result.group("psi_factor=0.25,alpha=0.85"))
    assert (tmp_path / "out" / "sensitivity.csv").exists()


@pytest.mark.slow
def test_halo_beats_open_loop_over_many_seeds(make_config):
    cmp = compare(make_config(run={"n_seeds": 500}), write=False)
    assert cmp.halo.aggregates["success_rate"] - cmp.open_loop.aggregates["success_rate"] >= 0.3
    assert cmp.overhead <= 1.5


@pytest.mark.slow
def test_sensitivity_peaks_at_matched_budget_over_many_seeds(make_config):
    result = run_experiment(make_config("sensitivity", run={"n_seeds": 300}), write=False)
    cells = {c["psi_factor"]: c for c in result.extras["cells"]}
    assert result.extras["best_psi_factor"] == 1.0
    assert cells[1.0]["success_rate"] > max(cells[0.25]["success_rate"], cells[4.0]["success_rate"])


def test_compression_loss_lowers_halo_success(make_config):
    exact = run_experiment(make_config(), write=False)
    lossy = run_experiment(make_config(controller={"compression_sigma2": 1.0}), write=False)
    assert lossy.aggregates["success_rate"] < exact.aggregates["success_rate"]


def test_compression_loss_must_be_non_negative(make_config):
    with pytest.raises(ConfigError):
        make_config(controller={"compression_sigma2": -0.1})


@pytest.mark.slow
def test_partial_reset_lowers_rectification_success(make_config):
    full = run_experiment(make_config(run={"n_seeds": 50}), write=False)
    partial = run_experiment(make_config(run={"n_seeds": 50}, controller={"mode": "partial", "epsilon": 0.5}),
                             write=False)
    assert partial.aggregates["rectification_success_rate"] < full.aggregates["rectification_success_rate"]


def test_calibration_scenario_writes_artifacts(make_config, tmp_path):
    result = run_experiment(make_config("calibration", observer={"calibration": "calibrate-first"}))
    cal = ObserverCalibration.from_dict(result.extras["calibration"])
    assert cal.boundary_entropy == pytest.approx(2.9412, abs=0.1)
    assert (tmp_path / "out" / "drift_samples.csv").exists()
    assert (tmp_path / "out" / "calibration.json").exists()


def test_calibrate_first_halo_run(make_config):
    result = run_experiment(make_config(observer={"calibration": "calibrate-first"}), write=False)
    assert result.extras["calibration"]["fit"]["n_samples"] == 2000
    assert result.aggregates["success_rate"] is not None


@pytest.mark.slow
def test_uncertainty_tracks_error(make_config):
    cfg = make_config("correlation", system={"d": 8}, observer={"obs_noise": 0.1}, run={"n_seeds": 50})
    report = correlation_study(cfg)
    assert report.pearson_r >= 0.8
    assert all(r.n_resets == 0 for r in report.records)


def test_phase_sweep_scenario_tables(make_config, tmp_path):
    result = run_experiment(make_config("phase_sweep", run={"n_seeds": 30}, sweep={"lengths": [1, 5, 10]}))
    assert result.records == []
    assert result.extras["grid"]["lengths"] == [1, 5, 10]
    assert (tmp_path / "out" / "phase_grid.csv").exists()
    assert (tmp_path / "out" / "n_star_curve.csv").exists()


def test_interrupt_flushes_partial_results(make_config, tmp_path, monkeypatch):
    real = harness.run_seed
    calls = []

    def flaky(task):
        calls.append(task.index)
        if len(calls) > 2:
            raise KeyboardInterrupt
        return real(task)

    monkeypatch.setattr(harness, "run_seed", flaky)
    with pytest.raises(ExperimentInterrupted) as info:
        run_experiment(make_config())
    assert len(info.value.records) == 2
    partial = json.loads((tmp_path / "out" / "partial_halo.json").read_text())
    assert len(partial["records"]) == 2
    assert partial["extras"]["interrupted"] is True


@pytest.mark.slow
def test_parallel_workers_match_serial(make_config):
    serial = run_experiment(make_config(run={"jobs": 1}), write=False)
    parallel = run_experiment(make_config(run={"jobs": 2}), write=False)
    assert [r.to_dict() for r in serial.records] == [r.to_dict() for r in parallel.records]


def test_simulate_writes_trajectory_and_traces(make_config, tmp_path):
    traj = simulate(make_config("open_loop"))
    assert traj.n_steps == 79
    assert (tmp_path / "out" / "trajectory.csv").exists()
    assert (tmp_path / "out" / "trace_comparison.csv").exists()


def test_echo_round_trips_through_json(make_config):
    cfg = make_config()
    assert json.loads(json.dumps(cfg.echo()))["system"]["d"] == 4
    assert math.isclose(cfg.system.lam, 0.1)
