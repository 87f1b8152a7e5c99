"""
Experiment harness
Scenario drivers over the simulator, observer and controller, per-seed
scoring, and the aggregate metrics: success rate, rectification success
rate, relative step overhead and the uncertainty/error correlation.
"""

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import pearsonr

from analysis.persist import (make_json_safe, save_calibration, save_samples, save_trajectory, write_json,
                              write_table)
from controller import ControllerConfig, RectifierSpec, RunStatus, run_halo
from dynamics import (DivergenceError, EventType, HaloError, NoiseModel, SystemSpec, Trajectory, TransitionMap,
                      derive_seed, simulate_open_loop)
from error_prop import trace_comparison
from horizon import difficulty_grid, fifty_percent_length, matched_horizon, phase_sweep
from observer import (DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_CONTEXT_LEN, CalibrationConfig, ObserverCalibration,
                      calibrate, collect_drift_samples, planted_drift_samples)

logger = logging.getLogger(__name__)

TOOL_VERSION = "1.0.0"


class Scenario(str, Enum):
    OPEN_LOOP = "open_loop"
    HALO = "halo"
    PHASE_SWEEP = "phase_sweep"
    SENSITIVITY = "sensitivity"
    CALIBRATION = "calibration"
    CORRELATION = "correlation"


class ExperimentInterrupted(HaloError):
    """Raised after an interrupt once the finished seeds have been collected"""

    def __init__(self, message, records):
        super().__init__(message)
        self.records = records


@dataclass(frozen=True)
class ObserverSettings:
    """``calibration`` None means calibrate first from drift samples"""

    calibration: Optional[ObserverCalibration] = None
    obs_noise: float = 0.0
    context_len: int = DEFAULT_CONTEXT_LEN
    calibration_source: str = "planted"
    calibration_samples: int = 2000
    label_noise: float = 0.05
    fit: CalibrationConfig = field(default_factory=CalibrationConfig)


@dataclass(frozen=True)
class ControllerSettings:
    """``psi`` is a number, "inf" (never rectify) or "matched" (the calibrated budget)"""

    psi: Union[float, str] = "matched"
    epsilon: float = 0.0
    mode: str = "full_reset"
    osc_window: int = 3
    floor_at_zero: bool = True
    progress_tol: float = 1e-9
    recoverable_radius: float = math.inf
    compression_sigma2: float = 0.0
    hard_limit_factor: float = 1.25


@dataclass(frozen=True)
class RunSettings:
    n_seeds: int = 100
    seed: int = 0
    max_steps: Optional[int] = None
    horizon_factor: float = 4.0
    correlation_horizon_factor: float = 2.0
    success_tol: float = 3.0
    jobs: int = 1


@dataclass(frozen=True)
class SweepSettings:
    lengths: Tuple[int, ...] = ()
    difficulties: Tuple[float, ...] = ()
    psi_factors: Tuple[float, ...] = (0.25, 1.0, 4.0)
    alphas: Tuple[float, ...] = ()


@dataclass(frozen=True)
class OutputSettings:
    out_dir: str = "artifacts"
    format: str = "csv"


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: Scenario = Scenario.HALO
    system: SystemSpec = field(default_factory=SystemSpec)
    observer: ObserverSettings = field(default_factory=ObserverSettings)
    controller: ControllerSettings = field(default_factory=ControllerSettings)
    run: RunSettings = field(default_factory=RunSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    output: OutputSettings = field(default_factory=OutputSettings)
    document: Dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        if self.run.n_seeds < 1:
            raise ValueError("run.n_seeds must be >= 1")

    def echo(self) -> Dict:
        """The validated document when loaded from a file, else the dataclass fields"""
        if self.document:
            return make_json_safe(self.document)
        data = asdict(replace(self, document={}))
        data.pop("document")
        return make_json_safe(data)


@dataclass
class SeedRecord:
    index: int
    seed: int
    status: str
    success: bool
    final_error: Optional[float]
    n_steps: int
    n_events: int
    n_resets: int
    reset_successes: int
    baseline_steps: int
    pearson_r: Optional[float] = None
    lead_time: Optional[float] = None
    group: str = ""
    first_failure_step: Optional[int] = None
    reset_steps: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return make_json_safe(asdict(self))

    @classmethod
    def from_dict(cls, data: Dict) -> "SeedRecord":
        return cls(**data)


def controller_budget(lam: float, n_star: float) -> float:
    """Psi* = lam * N* / 2: the drift integral reached halfway to the critical horizon"""
    if not lam > 0:
        raise ValueError("A matched budget needs a positive Lyapunov exponent")
    return lam * n_star / 2.0


def system_horizon(cfg: ExperimentConfig) -> float:
    system = cfg.system
    if system.sigma2 <= 0 or system.lam <= 0:
        return math.inf
    return matched_horizon(system.lam, system.sigma2, system.d, cfg.run.success_tol)


def resolve_max_steps(cfg: ExperimentConfig, factor: Optional[float] = None) -> int:
    if cfg.run.max_steps is not None:
        return int(cfg.run.max_steps)
    n_star = system_horizon(cfg)
    if not math.isfinite(n_star):
        raise ValueError("run.max_steps is required when the system has no finite critical horizon")
    return int(math.ceil((factor or cfg.run.horizon_factor) * n_star))


def resolve_psi(cfg: ExperimentConfig) -> float:
    psi = cfg.controller.psi
    if psi == "inf":
        return math.inf
    if psi == "matched":
        return controller_budget(cfg.system.lam, system_horizon(cfg))
    return float(psi)


def resolve_calibration(cfg: ExperimentConfig) -> ObserverCalibration:
    """The configured calibration, or one fitted from freshly generated drift samples"""
    if cfg.observer.calibration is not None:
        return cfg.observer.calibration
    return calibrate(drift_samples(cfg), cfg.observer.fit)


def drift_samples(cfg: ExperimentConfig):
    obs = cfg.observer
    truth = obs.calibration or ObserverCalibration(DEFAULT_ALPHA, DEFAULT_BETA)
    if obs.calibration_source == "collected":
        rates = list(cfg.sweep.difficulties) or difficulty_grid()
        return collect_drift_samples(cfg.system.build, rates, cfg.system.initial_state(), cfg.system.sigma2,
                                     resolve_max_steps(cfg), cfg.run.success_tol, truth,
                                     obs_noise=obs.obs_noise, seed=cfg.run.seed, context_len=obs.context_len)
    return planted_drift_samples(obs.calibration_samples, boundary=truth.boundary_entropy,
                                 label_noise=obs.label_noise, seed=cfg.run.seed)


def _psi_label(psi: float):
    return psi if math.isfinite(psi) else "inf"


def reset_outcomes(traj: Trajectory, success_tol: float) -> List[bool]:
    """
    One flag per reset: whether ||delta|| stayed within ``success_tol`` from
    the reset until the next reset (or the end of the run).
    """
    norms = traj.deviation_norms()
    events = [k + 1 for k, rec in enumerate(traj.records) if rec.event is EventType.RESET]
    outcomes = []
    for j, start in enumerate(events):
        end = events[j + 1] if j + 1 < len(events) else len(norms)
        outcomes.append(bool(np.max(norms[start:end]) <= success_tol))
    return outcomes


def failure_and_reset_steps(traj: Trajectory, success_tol: float) -> Tuple[Optional[int], List[int]]:
    """
    Dynamics step at which ||delta|| first exceeds ``success_tol`` (None if
    never), and the number of steps executed before each reset.
    """
    norms = traj.deviation_norms()[1:]
    steps, first, resets = 0, None, []
    for rec, norm in zip(traj.records, norms):
        if rec.event is EventType.STEP:
            steps += 1
            if first is None and norm > success_tol:
                first = steps
        elif rec.event is EventType.RESET:
            resets.append(steps)
    return first, resets


def _join_steps(steps) -> str:
    return " ".join(str(int(s)) for s in steps)


def pearson(x, y) -> Optional[float]:
    """Pearson r, or None when either series is constant or too short"""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.size < 2 or x.size != y.size or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(pearsonr(x, y).statistic)


def lead_time(traj: Trajectory, boundary_entropy: float, error_level: float) -> Optional[float]:
    """Events between the first entropy above the boundary and the first ||delta|| above ``error_level``"""
    entropies = np.array([np.nan if r.entropy is None else r.entropy for r in traj.records])
    norms = traj.deviation_norms()[1:]
    over_h = np.flatnonzero(entropies > boundary_entropy)
    over_e = np.flatnonzero(norms > error_level)
    if not over_h.size or not over_e.size:
        return None
    return float(over_e[0] - over_h[0])


def score_trajectory(traj: Trajectory, success_tol: float, baseline_steps: int, index: int = 0,
                     seed: int = 0, cal: Optional[ObserverCalibration] = None) -> SeedRecord:
    """Per-seed record; success needs a finished run ending within ``success_tol``"""
    final = traj.final_error()
    outcomes = reset_outcomes(traj, success_tol)
    first_failure, reset_steps = failure_and_reset_steps(traj, success_tol)
    record = SeedRecord(index=index, seed=seed, status=traj.status,
                        success=bool(traj.status == RunStatus.FINISHED.value and final <= success_tol),
                        final_error=final, n_steps=traj.n_steps, n_events=traj.n_events,
                        n_resets=traj.n_resets, reset_successes=sum(outcomes), baseline_steps=baseline_steps,
                        first_failure_step=first_failure, reset_steps=reset_steps)
    if cal is not None and traj.records:
        record.pearson_r = pearson(traj.omegas(), traj.deviation_norms()[1:])
        record.lead_time = lead_time(traj, cal.boundary_entropy, success_tol)
    return record


def rectification_success_rate(records: Sequence[SeedRecord]) -> Optional[float]:
    """Fraction of resets followed by an error that stays within tolerance; None without resets"""
    total = sum(r.n_resets for r in records)
    if total == 0:
        return None
    return sum(r.reset_successes for r in records) / total


def relative_step_overhead(closed, open_) -> float:
    """
    Closed-loop events (steps plus resets) over open-loop steps on matched seeds.

    Raises:
        ValueError: when the two sides were run on different seeds
        ZeroDivisionError: when the open-loop side executed no steps
    """
    closed_records = closed.records if isinstance(closed, ExperimentResult) else list(closed)
    open_records = open_.records if isinstance(open_, ExperimentResult) else list(open_)
    if [r.seed for r in closed_records] != [r.seed for r in open_records]:
        raise ValueError("relative_step_overhead needs results on matched seeds")
    open_steps = sum(r.n_steps for r in open_records)
    if open_steps == 0:
        raise ZeroDivisionError("Open-loop result has zero steps")
    return sum(r.n_events for r in closed_records) / open_steps


def _mean_defined(values) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def aggregate_records(records: Sequence[SeedRecord]) -> Dict:
    """Aggregates as pure reductions over the per-seed records"""
    if not records:
        return {"n_seeds": 0, "success_rate": None, "rectification_success_rate": None,
                "relative_step_overhead": None, "mean_resets": None, "pearson_r": None, "lead_time": None}
    baseline = sum(r.baseline_steps for r in records)
    return {
        "n_seeds": len(records),
        "success_rate": sum(1 for r in records if r.success) / len(records),
        "rectification_success_rate": rectification_success_rate(records),
        "relative_step_overhead": sum(r.n_events for r in records) / baseline if baseline else None,
        "mean_resets": sum(r.n_resets for r in records) / len(records),
        "pearson_r": _mean_defined(r.pearson_r for r in records),
        "lead_time": _mean_defined(r.lead_time for r in records),
    }


@dataclass
class ExperimentResult:
    scenario: str
    records: List[SeedRecord]
    aggregates: Dict
    config: Dict
    version: str = TOOL_VERSION
    wall_time: float = 0.0
    extras: Dict = field(default_factory=dict)

    def records_frame(self) -> pd.DataFrame:
        columns = list(SeedRecord.__dataclass_fields__)
        frame = pd.DataFrame([asdict(r) for r in self.records], columns=columns)
        frame["first_failure_step"] = pd.array(frame["first_failure_step"].tolist(), dtype="Int64")
        frame["reset_steps"] = frame["reset_steps"].map(_join_steps)
        return frame

    def group(self, name: str) -> List[SeedRecord]:
        return [r for r in self.records if r.group == name]

    def to_dict(self) -> Dict:
        return {"scenario": self.scenario, "version": self.version, "wall_time": self.wall_time,
                "config": make_json_safe(self.config), "aggregates": make_json_safe(self.aggregates),
                "extras": make_json_safe(self.extras), "records": [r.to_dict() for r in self.records]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict) -> "ExperimentResult":
        return cls(scenario=data["scenario"], records=[SeedRecord.from_dict(r) for r in data["records"]],
                   aggregates=dict(data["aggregates"]), config=dict(data["config"]),
                   version=data.get("version", TOOL_VERSION), wall_time=float(data.get("wall_time", 0.0)),
                   extras=dict(data.get("extras", {})))


@dataclass(frozen=True)
class SeedTask:
    """Everything one worker needs to run and score a single seed"""

    closed_loop: bool
    index: int
    seed: int
    transition: TransitionMap
    s0: np.ndarray
    sigma2: float
    max_steps: int
    success_tol: float
    controller: Optional[ControllerConfig] = None
    rectifier: Optional[RectifierSpec] = None
    cal: Optional[ObserverCalibration] = None
    generator_cal: Optional[ObserverCalibration] = None
    obs_noise: float = 0.0
    context_len: int = DEFAULT_CONTEXT_LEN
    group: str = ""


def run_seed(task: SeedTask) -> SeedRecord:
    noise = NoiseModel(task.sigma2, task.seed)
    try:
        if task.closed_loop:
            traj = run_halo(task.transition, task.s0, noise, task.cal, task.controller, task.rectifier,
                            obs_noise=task.obs_noise, context_len=task.context_len,
                            generator_cal=task.generator_cal)
        else:
            traj = simulate_open_loop(task.transition, task.s0, noise, task.max_steps)
    except DivergenceError as e:
        logger.warning(f"Seed {task.index} diverged at step {e.step}")
        steps = (e.step or 0) + 1
        return SeedRecord(index=task.index, seed=task.seed, status="diverged", success=False, final_error=None,
                          n_steps=steps, n_events=steps, n_resets=0, reset_successes=0,
                          baseline_steps=task.max_steps, group=task.group, first_failure_step=steps)
    record = score_trajectory(traj, task.success_tol, task.max_steps, task.index, task.seed,
                              cal=task.cal if task.closed_loop else None)
    record.group = task.group
    return record


def run_tasks(tasks: Sequence[SeedTask], jobs: int = 1) -> List[SeedRecord]:
    """Run seeds in order, or sharded over ``jobs`` worker processes; results keep task order"""
    records = []
    try:
        if jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for record in pool.map(run_seed, tasks, chunksize=max(1, len(tasks) // (4 * jobs))):
                    records.append(record)
        else:
            for task in tasks:
                records.append(run_seed(task))
    except KeyboardInterrupt:
        raise ExperimentInterrupted(f"Interrupted after {len(records)} of {len(tasks)} seeds", records) from None
    return records


def _tasks(cfg: ExperimentConfig, closed_loop: bool, transition: TransitionMap, max_steps: int,
           psi: float = math.inf, cal: Optional[ObserverCalibration] = None,
           generator_cal: Optional[ObserverCalibration] = None, group: str = "") -> List[SeedTask]:
    ctl = cfg.controller
    controller = rectifier = None
    if closed_loop:
        controller = ControllerConfig(psi=psi, floor_at_zero=ctl.floor_at_zero, max_steps=max_steps,
                                      osc_window=ctl.osc_window, progress_tol=ctl.progress_tol,
                                      hard_limit=int(math.ceil(ctl.hard_limit_factor * max_steps)))
        rectifier = RectifierSpec(epsilon=ctl.epsilon, mode=ctl.mode, recoverable_radius=ctl.recoverable_radius,
                                  compression_sigma2=ctl.compression_sigma2)
    s0 = cfg.system.initial_state()
    return [SeedTask(closed_loop=closed_loop, index=i, seed=derive_seed(cfg.run.seed, i), transition=transition,
                     s0=s0, sigma2=cfg.system.sigma2, max_steps=max_steps, success_tol=cfg.run.success_tol,
                     controller=controller, rectifier=rectifier, cal=cal, generator_cal=generator_cal,
                     obs_noise=cfg.observer.obs_noise, context_len=cfg.observer.context_len, group=group)
            for i in range(cfg.run.n_seeds)]


def _open_loop(cfg: ExperimentConfig):
    max_steps = resolve_max_steps(cfg)
    records = run_tasks(_tasks(cfg, False, cfg.system.build(), max_steps), cfg.run.jobs)
    extras = {"n_star": _psi_label(system_horizon(cfg)), "max_steps": max_steps}
    return records, extras, {}


def _halo(cfg: ExperimentConfig):
    cal = resolve_calibration(cfg)
    psi = resolve_psi(cfg)
    max_steps = resolve_max_steps(cfg)
    logger.info(f"Halo run: psi={psi:.4f}, max_steps={max_steps}, alpha={cal.alpha:.4f}, beta={cal.beta:.4f}")
    records = run_tasks(_tasks(cfg, True, cfg.system.build(), max_steps, psi, cal), cfg.run.jobs)
    extras = {"psi": _psi_label(psi), "n_star": _psi_label(system_horizon(cfg)), "max_steps": max_steps,
              "calibration": cal.to_dict()}
    return records, extras, {}


def _phase_sweep(cfg: ExperimentConfig):
    difficulties = list(cfg.sweep.difficulties) or difficulty_grid()
    lengths = list(cfg.sweep.lengths)
    if not lengths:
        longest = max(matched_horizon(lam, cfg.system.sigma2, cfg.system.d, cfg.run.success_tol)
                      for lam in difficulties)
        lengths = list(range(1, int(math.ceil(3 * longest)) + 1))
    grid = phase_sweep(cfg.system.build, lengths, difficulties, cfg.run.n_seeds, cfg.run.success_tol,
                       cfg.system.sigma2, cfg.system.initial_state(), seed=cfg.run.seed)
    curve = grid.n_star_frame()
    curve["fifty_percent_length"] = [fifty_percent_length(grid.lengths, grid.row(j))
                                     for j in range(len(grid.difficulties))]
    extras = {"grid": grid.to_dict(), "n_star_curve": curve.to_dict(orient="list")}
    return [], extras, {"phase_grid": grid.to_frame(), "n_star_curve": curve}


def _sensitivity(cfg: ExperimentConfig):
    truth = resolve_calibration(cfg)
    psi_star = controller_budget(cfg.system.lam, system_horizon(cfg))
    max_steps = resolve_max_steps(cfg)
    transition = cfg.system.build()
    alphas = list(cfg.sweep.alphas) or [truth.alpha]
    records, rows = [], []
    for factor in cfg.sweep.psi_factors:
        for alpha in alphas:
            proxy = truth if alpha == truth.alpha else ObserverCalibration(alpha, truth.beta)
            group = f"psi_factor={factor:g},alpha={alpha:g}"
            cell = run_tasks(_tasks(cfg, True, transition, max_steps, factor * psi_star, proxy, truth, group),
                             cfg.run.jobs)
            records.extend(cell)
            agg = aggregate_records(cell)
            rows.append({"psi_factor": factor, "psi": factor * psi_star, "alpha": alpha,
                         "success_rate": agg["success_rate"],
                         "rectification_success_rate": agg["rectification_success_rate"],
                         "relative_step_overhead": agg["relative_step_overhead"],
                         "mean_resets": agg["mean_resets"]})
            logger.info(f"Sensitivity {group}: success {agg['success_rate']:.3f}, "
                        f"overhead {agg['relative_step_overhead']:.3f}")
    table = pd.DataFrame(rows)
    best = table.loc[table["success_rate"].idxmax()]
    extras = {"psi_star": psi_star, "max_steps": max_steps, "cells": table.to_dict(orient="records"),
              "best_psi_factor": float(best["psi_factor"]), "best_alpha": float(best["alpha"])}
    return records, extras, {"sensitivity": table}


def _calibration(cfg: ExperimentConfig):
    samples = drift_samples(cfg)
    cal = calibrate(samples, cfg.observer.fit)
    out = Path(cfg.output.out_dir)
    save_samples(samples, out / "drift_samples.csv")
    save_calibration(cal, out / "calibration.json")
    return [], {"calibration": cal.to_dict(), "n_samples": len(samples)}, {}


@dataclass
class CorrelationReport:
    pearson_r: Optional[float]
    lead_time: Optional[float]
    records: List[SeedRecord]


def correlation_study(cfg: ExperimentConfig) -> CorrelationReport:
    """
    Observer-only closed loop (psi = inf) recording Omega_t and ||delta_t||.

    Pearson r is computed per run and averaged across runs.
    """
    cal = resolve_calibration(cfg)
    max_steps = resolve_max_steps(cfg, factor=cfg.run.correlation_horizon_factor)
    records = run_tasks(_tasks(cfg, True, cfg.system.build(), max_steps, math.inf, cal), cfg.run.jobs)
    agg = aggregate_records(records)
    if agg["pearson_r"] is None:
        logger.warning("Every run produced a constant series; correlation undefined")
    return CorrelationReport(agg["pearson_r"], agg["lead_time"], records)


def _correlation(cfg: ExperimentConfig):
    report = correlation_study(cfg)
    return report.records, {"pearson_r": report.pearson_r, "lead_time": report.lead_time}, {}


SCENARIOS = {
    Scenario.OPEN_LOOP: _open_loop,
    Scenario.HALO: _halo,
    Scenario.PHASE_SWEEP: _phase_sweep,
    Scenario.SENSITIVITY: _sensitivity,
    Scenario.CALIBRATION: _calibration,
    Scenario.CORRELATION: _correlation,
}


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """
    Run the configured scenario and write its artifacts under output.out_dir.

    Deterministic given the config (base seed included). On interrupt the
    finished seeds are flushed to partial_<scenario>.json before re-raising.
    """
    logger.info(f"Starting scenario {cfg.scenario.value} with {cfg.run.n_seeds} seeds")
    started = time.perf_counter()
    out = Path(cfg.output.out_dir)
    try:
        records, extras, tables = SCENARIOS[cfg.scenario](cfg)
    except ExperimentInterrupted as e:
        partial = ExperimentResult(cfg.scenario.value, e.records, aggregate_records(e.records), cfg.echo(),
                                   wall_time=time.perf_counter() - started, extras={"interrupted": True})
        write_json(out / f"partial_{cfg.scenario.value}.json", partial.to_dict())
        raise

    result = ExperimentResult(scenario=cfg.scenario.value, records=records, aggregates=aggregate_records(records),
                              config=cfg.echo(), wall_time=time.perf_counter() - started,
                              extras=make_json_safe(extras))
    if write:
        write_json(out / f"{cfg.scenario.value}_result.json", result.to_dict())
        if records:
            write_table(result.records_frame(), out / f"{cfg.scenario.value}_seeds", cfg.output.format)
        for name, frame in tables.items():
            write_table(frame, out / name, cfg.output.format)
    logger.info(f"Scenario {cfg.scenario.value} finished in {result.wall_time:.2f}s: "
                f"success_rate={result.aggregates['success_rate']}")
    return result


@dataclass
class Comparison:
    open_loop: ExperimentResult
    halo: ExperimentResult
    overhead: float
    frame: pd.DataFrame


def compare(cfg: ExperimentConfig, write: bool = True) -> Comparison:
    """Open loop and Halo on the same seeds, joined per seed into open_vs_halo"""
    open_result = run_experiment(replace(cfg, scenario=Scenario.OPEN_LOOP), write=False)
    halo_result = run_experiment(replace(cfg, scenario=Scenario.HALO), write=False)
    overhead = relative_step_overhead(halo_result, open_result)
    frame = pd.DataFrame({
        "seed_index": [r.index for r in open_result.records],
        "seed": [r.seed for r in open_result.records],
        "open_success": [r.success for r in open_result.records],
        "open_final_error": [r.final_error for r in open_result.records],
        "open_steps": [r.n_steps for r in open_result.records],
        "halo_success": [r.success for r in halo_result.records],
        "halo_final_error": [r.final_error for r in halo_result.records],
        "halo_steps": [r.n_steps for r in halo_result.records],
        "halo_events": [r.n_events for r in halo_result.records],
        "halo_resets": [r.n_resets for r in halo_result.records],
        "halo_status": [r.status for r in halo_result.records],
        "open_first_failure_step": pd.array([r.first_failure_step for r in open_result.records], dtype="Int64"),
        "halo_first_reset_step": pd.array([r.reset_steps[0] if r.reset_steps else None
                                           for r in halo_result.records], dtype="Int64"),
        "halo_reset_steps": [_join_steps(r.reset_steps) for r in halo_result.records],
    })
    logger.info(f"Open-loop success {open_result.aggregates['success_rate']:.3f}, "
                f"Halo success {halo_result.aggregates['success_rate']:.3f}, overhead {overhead:.3f}")
    if write:
        out = Path(cfg.output.out_dir)
        write_table(frame, out / "open_vs_halo", cfg.output.format)
        write_json(out / "compare_result.json", {"open_loop": open_result.to_dict(), "halo": halo_result.to_dict(),
                                                 "relative_step_overhead": overhead})
    return Comparison(open_result, halo_result, overhead, frame)


def simulate(cfg: ExperimentConfig, write: bool = True) -> Trajectory:
    """
    Single open-loop trajectory on the base seed.

    Also writes the analytic vs Monte Carlo trace comparison over
    ``run.n_seeds`` samples (skipped with a warning if any sample diverges).
    """
    max_steps = resolve_max_steps(cfg)
    transition = cfg.system.build()
    s0 = cfg.system.initial_state()
    traj = simulate_open_loop(transition, s0, cfg.system.noise(derive_seed(cfg.run.seed, 0)), max_steps)
    if write:
        fmt = cfg.output.format
        save_trajectory(traj, cfg.output.out_dir, "trajectory", "json" if fmt == "json" else "csv")
        try:
            frame = trace_comparison(transition, cfg.system.noise(cfg.run.seed), s0, max_steps,
                                     max(2, cfg.run.n_seeds))
            write_table(frame, Path(cfg.output.out_dir) / "trace_comparison", fmt)
        except DivergenceError as e:
            logger.warning(f"Trace comparison skipped: {e}")
    return traj
