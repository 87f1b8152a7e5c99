#!/usr/bin/env python3
"""
main.py
Command-line entry for the reasoning-horizon simulator and the Halo controller.

Usage examples:
  python main.py horizon --lambda 0.0953 --sigma2 0.01 --psi 0.2727
  python main.py compare --config configs/default.json --out artifacts
  python main.py sweep --kind sensitivity --config configs/default.json --jobs 4
  python main.py serve-adapter-stub --entropies 1,1,4,4 --transport tcp --port 7070
  python main.py halo --config configs/default.json --adapter tcp://127.0.0.1:7070

Exit codes: 0 success, 1 validation or usage error, 2 runtime error.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from adapter_protocol import DEFAULT_TIMEOUT, StubGenerator, connect
from analysis.persist import ensure_dir, make_json_safe, save_trajectory
from config_loader import ConfigError, ConfigLoader, load_experiment_config
from controller import ControllerConfig, run_halo_external
from dynamics import HaloError
from harness import (ExperimentInterrupted, Scenario, compare, resolve_calibration, resolve_max_steps,
                     resolve_psi, run_experiment, simulate)
from horizon import HorizonParams, horizon_consistency

logger = logging.getLogger(__name__)

ROOT = Path(__file__).resolve().parent
DEFAULT_EXPERIMENT = ROOT / "configs" / "default.json"
LOG_FORMAT = "%(asctime)s %(levelname)s:%(name)s:%(message)s"

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def setup_logging(level: str, out_dir=None, to_file: bool = True):
    """Console handler plus an optional file handler under <out>/logs/halo.log"""
    handlers = [logging.StreamHandler(sys.stderr)]
    if out_dir is not None and to_file:
        log_dir = ensure_dir(Path(out_dir) / "logs")
        handlers.append(logging.FileHandler(log_dir / "halo.log"))
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT,
                        handlers=handlers, force=True)


def _experiment_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", default=str(DEFAULT_EXPERIMENT), help="experiment document (JSON or YAML)")
    p.add_argument("--seed", type=int, help="base seed (overrides run.seed)")
    p.add_argument("--out", help="output directory (overrides output.out_dir)")
    p.add_argument("--format", choices=["csv", "json"], help="table format (overrides output.format)")
    p.add_argument("--jobs", type=int, help="worker processes (overrides run.jobs)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="halo", description="Reasoning-horizon simulator and Halo controller")
    settings = ConfigLoader()
    ap.add_argument("--log-level", default=os.getenv("HALO_LOG_LEVEL") or settings.get("logging.level", "INFO"),
                    choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = ap.add_subparsers(dest="command", required=True)

    for name, text in (("simulate", "single open-loop trajectory"),
                       ("calibrate", "fit the observer calibration from drift samples"),
                       ("halo", "closed-loop runs (internal simulator or external adapter)"),
                       ("compare", "open loop vs Halo on matched seeds"),
                       ("correlate", "uncertainty/error correlation study")):
        p = sub.add_parser(name, help=text)
        _experiment_flags(p)
        if name == "halo":
            p.add_argument("--adapter", help="external generator endpoint (tcp://host:port or stdio:<cmd>)")
            p.add_argument("--template", help="compression prompt template file sent with rectify")
            p.add_argument("--reinit-template", help="re-initialization prompt template file sent with rectify")
            p.add_argument("--timeout", type=float, help="adapter read timeout in seconds")

    p = sub.add_parser("sweep", help="phase-transition or sensitivity sweep")
    _experiment_flags(p)
    p.add_argument("--kind", choices=["phase", "sensitivity"], default="phase")

    p = sub.add_parser("horizon", help="critical horizon N* and its crossing-step check")
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--sigma2", type=float, required=True)
    p.add_argument("--psi", type=float, help="variance tolerance")
    p.add_argument("--d", type=int, help="state dimension for the matched form")
    p.add_argument("--success-tol", type=float, help="norm tolerance for the matched form")
    p.add_argument("--format", choices=["text", "json"], default="text")

    p = sub.add_parser("serve-adapter-stub", help="replay an entropy series over the adapter protocol")
    p.add_argument("--entropies", required=True, help="comma-separated entropies, or @file with one per line")
    p.add_argument("--transport", choices=["stdio", "tcp"], default="stdio")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--close-after", type=int)
    p.add_argument("--anchor", default="anchor {n}", help="anchor summary template; {n} is the reset count")
    return ap


def _load(args, scenario=None):
    overrides = {"run.seed": args.seed, "output.out_dir": args.out, "output.format": args.format,
                 "run.jobs": args.jobs}
    if scenario is not None:
        overrides["scenario"] = scenario.value
    return load_experiment_config(args.config, overrides)


def _print(payload):
    print(json.dumps(make_json_safe(payload), indent=2, sort_keys=True))


def cmd_horizon(args) -> int:
    if args.psi is None and (args.d is None or args.success_tol is None):
        raise ConfigError("psi", "give --psi, or --d with --success-tol for the matched form")
    if args.psi is not None:
        report = horizon_consistency(HorizonParams(args.lam, args.sigma2, args.psi))
    else:
        report = horizon_consistency(HorizonParams(args.lam, args.d * args.sigma2, args.success_tol ** 2))
    if args.format == "json":
        _print(report.to_dict())
    else:
        print(f"N* = {report.n_star:.4f} (floor {report.n_floor}, ceil {report.n_ceil}, "
              f"crossing step {report.crossing})")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load(args, Scenario.OPEN_LOOP)
    traj = simulate(cfg)
    _print({"steps": traj.n_steps, "final_error": traj.final_error(), "out_dir": cfg.output.out_dir})
    return EXIT_OK


def cmd_scenario(args, scenario: Scenario) -> int:
    result = run_experiment(_load(args, scenario))
    _print({"scenario": result.scenario, "aggregates": result.aggregates, "extras": _summary(result.extras)})
    return EXIT_OK


def _summary(extras):
    return {k: v for k, v in extras.items() if k not in ("grid", "cells", "n_star_curve")}


def cmd_sweep(args) -> int:
    return cmd_scenario(args, Scenario.PHASE_SWEEP if args.kind == "phase" else Scenario.SENSITIVITY)


def cmd_compare(args) -> int:
    cmp = compare(_load(args, Scenario.HALO))
    _print({"open_loop": cmp.open_loop.aggregates, "halo": cmp.halo.aggregates,
            "relative_step_overhead": cmp.overhead})
    return EXIT_OK


def _read_template(path) -> str:
    path = Path(path)
    if not path.is_absolute() and not path.exists():
        path = ROOT / path
    return path.read_text()


def cmd_halo(args) -> int:
    if not args.adapter:
        return cmd_scenario(args, Scenario.HALO)
    cfg = _load(args, Scenario.HALO)
    settings = ConfigLoader()
    template = _read_template(args.template or settings.get("adapter.template", "templates/semantic_compression.txt"))
    reinit = _read_template(args.reinit_template
                            or settings.get("adapter.reinit_template", "templates/trajectory_reinit.txt"))
    timeout = args.timeout or settings.get("adapter.timeout_seconds", DEFAULT_TIMEOUT)

    controller = ControllerConfig(psi=resolve_psi(cfg), floor_at_zero=cfg.controller.floor_at_zero,
                                  max_steps=resolve_max_steps(cfg), osc_window=cfg.controller.osc_window,
                                  progress_tol=cfg.controller.progress_tol)
    session = connect(args.adapter, timeout=timeout)
    try:
        traj = run_halo_external(session, resolve_calibration(cfg), controller, template, reinit)
    finally:
        session.close()
    save_trajectory(traj, cfg.output.out_dir, "external_trajectory", "json")
    _print({"status": traj.status, "events": traj.n_events, "resets": traj.n_resets, "error": traj.error})
    return EXIT_OK


def cmd_serve_stub(args) -> int:
    raw = args.entropies
    if raw.startswith("@"):
        values = [line.strip() for line in Path(raw[1:]).read_text().splitlines() if line.strip()]
    else:
        values = [v for v in raw.split(",") if v.strip()]
    try:
        entropies = [float(v) for v in values]
    except ValueError as e:
        raise ConfigError("entropies", f"expected numbers: {e}") from e
    stub = StubGenerator(entropies, close_after=args.close_after, anchor_template=args.anchor)
    if args.transport == "stdio":
        stub.serve_stdio()
    else:
        stub.serve_tcp(args.host, args.port, ready=lambda port: print(f"listening {args.host}:{port}", flush=True))
    return EXIT_OK


COMMANDS = {
    "horizon": cmd_horizon,
    "simulate": cmd_simulate,
    "calibrate": lambda a: cmd_scenario(a, Scenario.CALIBRATION),
    "halo": cmd_halo,
    "compare": cmd_compare,
    "correlate": lambda a: cmd_scenario(a, Scenario.CORRELATION),
    "sweep": cmd_sweep,
    "serve-adapter-stub": cmd_serve_stub,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_VALIDATION

    out_dir = getattr(args, "out", None)
    # stdio stub owns stdout; keep its logs on stderr only
    to_file = ConfigLoader().get("logging.file", True) and args.command not in ("horizon", "serve-adapter-stub")
    setup_logging(args.log_level, out_dir, to_file=to_file)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError) as e:
        logger.error(f"Validation error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except ExperimentInterrupted as e:
        logger.error(f"{e}; partial results flushed")
        return EXIT_RUNTIME
    except (HaloError, OSError) as e:
        logger.error(f"Runtime error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(cli_main())
