"""
Configuration loader with YAML support and environment variable substitution
Repository settings come from config.yaml; experiment documents (YAML or
JSON, versioned) are validated into an ExperimentConfig with every failure
naming its dotted field path.
"""

import logging
import math
import os
import re
from dataclasses import fields
from pathlib import Path
from typing import Dict, Optional

import yaml

from dynamics import HaloError, MapFamily, SystemSpec
from harness import (ControllerSettings, ExperimentConfig, ObserverSettings, OutputSettings, RunSettings, Scenario,
                     SweepSettings)
from observer import CalibrationConfig, ObserverCalibration

logger = logging.getLogger(__name__)

DOCUMENT_VERSION = 1
DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent / "config.yaml"
_ENV_PATTERN = re.compile(r"\$\{([^}]+)\}")


class ConfigError(HaloError, ValueError):
    """Invalid configuration; ``path`` is the dotted field path"""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def substitute_env_vars(content: str) -> str:
    """Substitute ${VAR_NAME} patterns with environment variables, leaving unknown ones as is"""
    return _ENV_PATTERN.sub(lambda m: os.getenv(m.group(1), m.group(0)), content)


def load_document(path) -> Dict:
    """Parse a YAML or JSON file (PyYAML reads both) after env substitution"""
    p = Path(path)
    if not p.exists():
        raise ConfigError("", f"Config file {p} not found")
    try:
        data = yaml.safe_load(substitute_env_vars(p.read_text()))
    except yaml.YAMLError as e:
        raise ConfigError("", f"Cannot parse {p}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("", f"{p} must contain a mapping at the top level")
    logger.info(f"Loaded configuration from {p}")
    return data


class ConfigLoader:
    """Repository settings (logging, output, adapter) with dot-path access"""

    def __init__(self, config_path=DEFAULT_CONFIG_PATH):
        self.config_path = config_path
        self._config = None
        self.load_config()

    def load_config(self):
        if os.path.exists(self.config_path):
            self._config = load_document(self.config_path)
        else:
            logger.warning(f"Config file {self.config_path} not found, using defaults")
            self._config = self._default_config()

    def _default_config(self):
        return {
            "logging": {"level": "INFO", "file": True},
            "output": {"out_dir": "artifacts", "format": "csv"},
            "adapter": {"timeout_seconds": 30.0, "template": "templates/semantic_compression.txt"},
        }

    def get(self, key_path, default=None):
        """Get config value by dot-notation path (e.g., 'adapter.timeout_seconds')"""
        value = self._config
        for key in key_path.split("."):
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default
        return value


# Allowed keys per section of an experiment document
SECTION_TYPES = {
    "system": SystemSpec,
    "observer": ObserverSettings,
    "controller": ControllerSettings,
    "run": RunSettings,
    "sweep": SweepSettings,
    "output": OutputSettings,
}
REQUIRED = ("system.d", "system.sigma2", "run.n_seeds")
TOP_LEVEL = {"version", "scenario", *SECTION_TYPES}


def _number(value, path, minimum=None, strict=False, integer=False, allow_inf=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        if allow_inf and value == "inf":
            return math.inf
        raise ConfigError(path, f"expected a number, got {value!r}")
    if integer and not float(value).is_integer():
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if math.isnan(value) or (math.isinf(value) and not allow_inf):
        raise ConfigError(path, "must be finite")
    if minimum is not None and (value <= minimum if strict else value < minimum):
        raise ConfigError(path, f"must be {'>' if strict else '>='} {minimum}, got {value!r}")
    return int(value) if integer else float(value)


def _choice(value, path, options):
    if value not in options:
        raise ConfigError(path, f"expected one of {sorted(options)}, got {value!r}")
    return value


def _number_list(value, path, **kwargs):
    if not isinstance(value, list):
        raise ConfigError(path, f"expected a list, got {type(value).__name__}")
    return tuple(_number(v, f"{path}[{i}]", **kwargs) for i, v in enumerate(value))


def _section(doc: Dict, name: str) -> Dict:
    section = doc.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(name, "expected a mapping")
    allowed = {f.name for f in fields(SECTION_TYPES[name])}
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}", f"unknown key (allowed: {', '.join(sorted(allowed))})")
    return section


def _system(section: Dict) -> SystemSpec:
    kw = {}
    if "family" in section:
        kw["family"] = _choice(section["family"], "system.family", {m.value for m in MapFamily})
    kw["d"] = _number(section["d"], "system.d", minimum=1, integer=True)
    kw["sigma2"] = _number(section["sigma2"], "system.sigma2", minimum=0)
    for key in ("hidden", "duration"):
        if key in section:
            kw[key] = _number(section[key], f"system.{key}", minimum=1, integer=True)
    if "map_seed" in section:
        kw["map_seed"] = _number(section["map_seed"], "system.map_seed", minimum=0, integer=True)
    if "lipschitz" in section:
        kw["lipschitz"] = _number(section["lipschitz"], "system.lipschitz", minimum=0)
    if "rho_plant" in section and "lambda_plant" in section:
        raise ConfigError("system.rho_plant", "give either lambda_plant or rho_plant, not both")
    if "rho_plant" in section:
        kw["rho_plant"] = _number(section["rho_plant"], "system.rho_plant", minimum=0, strict=True)
        kw["lambda_plant"] = None
    elif "lambda_plant" in section:
        kw["lambda_plant"] = _number(section["lambda_plant"], "system.lambda_plant")
    if "schedule" in section:
        kw["schedule"] = _number_list(section["schedule"], "system.schedule", minimum=0, strict=True)
    if "s0" in section:
        s0 = _number_list(section["s0"], "system.s0")
        if len(s0) != kw["d"]:
            raise ConfigError("system.s0", f"expected {kw['d']} entries, got {len(s0)}")
        kw["s0"] = s0
    return SystemSpec(**kw)


def _observer(section: Dict) -> ObserverSettings:
    kw = {}
    cal = section.get("calibration", "calibrate-first")
    if cal != "calibrate-first":
        if not isinstance(cal, dict) or set(cal) - {"alpha", "beta"} or not {"alpha", "beta"} <= set(cal):
            raise ConfigError("observer.calibration", 'expected {"alpha": .., "beta": ..} or "calibrate-first"')
        kw["calibration"] = ObserverCalibration(_number(cal["alpha"], "observer.calibration.alpha", 0, strict=True),
                                                _number(cal["beta"], "observer.calibration.beta"))
    if "obs_noise" in section:
        kw["obs_noise"] = _number(section["obs_noise"], "observer.obs_noise", minimum=0)
    if "context_len" in section:
        kw["context_len"] = _number(section["context_len"], "observer.context_len", minimum=2, integer=True)
    if "calibration_source" in section:
        kw["calibration_source"] = _choice(section["calibration_source"], "observer.calibration_source",
                                           {"planted", "collected"})
    if "calibration_samples" in section:
        kw["calibration_samples"] = _number(section["calibration_samples"], "observer.calibration_samples",
                                            minimum=2, integer=True)
    if "label_noise" in section:
        kw["label_noise"] = _number(section["label_noise"], "observer.label_noise", minimum=0)
        if kw["label_noise"] >= 0.5:
            raise ConfigError("observer.label_noise", "must be < 0.5")
    if "fit" in section:
        fit = section["fit"]
        allowed = {f.name for f in fields(CalibrationConfig)}
        if not isinstance(fit, dict) or set(fit) - allowed:
            raise ConfigError("observer.fit", f"expected a mapping with keys among {sorted(allowed)}")
        fit_kw = {}
        for key, value in fit.items():
            path = f"observer.fit.{key}"
            if key == "max_iters":
                fit_kw[key] = _number(value, path, minimum=1, integer=True)
            elif key == "reference_alpha":
                fit_kw[key] = None if value is None else _number(value, path, minimum=0, strict=True)
            else:
                fit_kw[key] = _number(value, path, minimum=0, strict=True)
        kw["fit"] = CalibrationConfig(**fit_kw)
    return ObserverSettings(**kw)


def _controller(section: Dict) -> ControllerSettings:
    kw = {}
    if "psi" in section:
        psi = section["psi"]
        kw["psi"] = psi if psi in ("inf", "matched") else _number(psi, "controller.psi", 0, strict=True)
    if "epsilon" in section:
        kw["epsilon"] = _number(section["epsilon"], "controller.epsilon", minimum=0)
        if kw["epsilon"] >= 1:
            raise ConfigError("controller.epsilon", "must lie in [0, 1)")
    if "mode" in section:
        kw["mode"] = _choice(section["mode"], "controller.mode", {"full_reset", "partial"})
    if "osc_window" in section:
        kw["osc_window"] = _number(section["osc_window"], "controller.osc_window", minimum=1, integer=True)
    if "floor_at_zero" in section:
        if not isinstance(section["floor_at_zero"], bool):
            raise ConfigError("controller.floor_at_zero", "expected a boolean")
        kw["floor_at_zero"] = section["floor_at_zero"]
    if "progress_tol" in section:
        kw["progress_tol"] = _number(section["progress_tol"], "controller.progress_tol", minimum=0)
    if "recoverable_radius" in section:
        kw["recoverable_radius"] = _number(section["recoverable_radius"], "controller.recoverable_radius",
                                           0, strict=True, allow_inf=True)
    if "compression_sigma2" in section:
        kw["compression_sigma2"] = _number(section["compression_sigma2"], "controller.compression_sigma2", minimum=0)
    if "hard_limit_factor" in section:
        kw["hard_limit_factor"] = _number(section["hard_limit_factor"], "controller.hard_limit_factor", 1)
    return ControllerSettings(**kw)


def _run(section: Dict) -> RunSettings:
    kw = {"n_seeds": _number(section["n_seeds"], "run.n_seeds", minimum=1, integer=True)}
    for key in ("seed", "jobs"):
        if key in section:
            kw[key] = _number(section[key], f"run.{key}", minimum=0 if key == "seed" else 1, integer=True)
    if section.get("max_steps") is not None:
        kw["max_steps"] = _number(section["max_steps"], "run.max_steps", minimum=1, integer=True)
    for key in ("horizon_factor", "correlation_horizon_factor", "success_tol"):
        if key in section:
            kw[key] = _number(section[key], f"run.{key}", 0, strict=True)
    return RunSettings(**kw)


def _sweep(section: Dict) -> SweepSettings:
    kw = {}
    if "lengths" in section:
        kw["lengths"] = _number_list(section["lengths"], "sweep.lengths", minimum=1, integer=True)
    for key in ("difficulties", "psi_factors", "alphas"):
        if key in section:
            kw[key] = _number_list(section[key], f"sweep.{key}", minimum=0, strict=True)
    return SweepSettings(**kw)


def _output(section: Dict) -> OutputSettings:
    kw = {}
    if "out_dir" in section:
        if not isinstance(section["out_dir"], str) or not section["out_dir"]:
            raise ConfigError("output.out_dir", "expected a nonempty path")
        kw["out_dir"] = section["out_dir"]
    if "format" in section:
        kw["format"] = _choice(section["format"], "output.format", {"csv", "json"})
    return OutputSettings(**kw)


def build_experiment_config(doc: Dict, overrides: Optional[Dict] = None) -> ExperimentConfig:
    """
    Validate an experiment document and apply CLI overrides.

    ``overrides`` maps dotted paths (``run.seed``, ``output.out_dir``, ...)
    to values and is applied before validation.

    Raises:
        ConfigError: naming the first offending field path
    """
    doc = _apply_overrides(doc, overrides or {})
    unknown = sorted(set(doc) - TOP_LEVEL)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    if "version" not in doc:
        raise ConfigError("version", "missing required field")
    if doc["version"] != DOCUMENT_VERSION:
        raise ConfigError("version", f"unsupported document version {doc['version']!r}, expected {DOCUMENT_VERSION}")
    if "scenario" not in doc:
        raise ConfigError("scenario", "missing required field")
    scenario = Scenario(_choice(doc["scenario"], "scenario", {s.value for s in Scenario}))

    sections = {name: _section(doc, name) for name in SECTION_TYPES}
    for path in REQUIRED:
        name, key = path.split(".")
        if key not in sections[name]:
            raise ConfigError(path, "missing required field")

    system = _system(sections["system"])
    controller = _controller(sections["controller"])
    run = _run(sections["run"])
    sweep = _sweep(sections["sweep"])

    if scenario is Scenario.PHASE_SWEEP and run.n_seeds < 30:
        raise ConfigError("run.n_seeds", "phase_sweep needs at least 30 seeds per cell")
    if scenario is Scenario.SENSITIVITY and not sweep.psi_factors:
        raise ConfigError("sweep.psi_factors", "sensitivity needs at least one psi factor")
    needs_budget = scenario is Scenario.SENSITIVITY or (scenario is Scenario.HALO and controller.psi == "matched")
    if needs_budget and not (system.lam > 0 and system.sigma2 > 0):
        raise ConfigError("system.lambda_plant", "a matched psi needs lambda_plant > 0 and sigma2 > 0")
    if run.max_steps is None and not (system.lam > 0 and system.sigma2 > 0) \
            and scenario not in (Scenario.PHASE_SWEEP, Scenario.CALIBRATION):
        raise ConfigError("run.max_steps", "required when the system has no finite critical horizon")

    return ExperimentConfig(scenario=scenario, system=system, observer=_observer(sections["observer"]),
                            controller=controller, run=run, sweep=sweep, output=_output(sections["output"]),
                            document=doc)


def _apply_overrides(doc: Dict, overrides: Dict) -> Dict:
    merged = {k: (dict(v) if isinstance(v, dict) else v) for k, v in doc.items()}
    for path, value in overrides.items():
        if value is None:
            continue
        head, _, tail = path.partition(".")
        if tail:
            section = merged.setdefault(head, {})
            if not isinstance(section, dict):
                raise ConfigError(head, "expected a mapping")
            section[tail] = value
        else:
            merged[head] = value
    return merged


def load_experiment_config(path, overrides: Optional[Dict] = None) -> ExperimentConfig:
    return build_experiment_config(load_document(path), overrides)
